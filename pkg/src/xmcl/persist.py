"""Binary container for model snapshots and importance maps.

Layout (little-endian)::

    b"XMCL"  u16 version  u8 sharing (0 no-sharing, 1 share-top)
    u32 image_input  u32 image_hidden  u32 text_input  u32 text_hidden  u32 embed
    u32 task_index
    f64 arrays: image_hidden W, b; image_top W, b; text_hidden W, b; text_top W, b
                (share-top: the top W, b is stored once, in the image_top slot)
    zero or more sections:
        u8 section_id (1 = importance)  u8 estimator (0 EWC, 1 MAS)  u32 task_index
        f64 Theta arrays (image-branch order), f64 Omega arrays (text-branch order)

Weights are ``(out, in)`` row-major.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DimensionError, TruncatedFileError, VersionMismatchError
from .model import BranchConfig, ModelSnapshot
from .regularization import ESTIMATORS, ImportanceMap

MAGIC = b"XMCL"
VERSION = 1
SECTION_IMPORTANCE = 1
_HEADER = struct.Struct("<4sHB6I")


def _param_shapes(snap: ModelSnapshot) -> list:
    ic, tc = snap.image_config, snap.text_config
    shapes = [
        ("image_hidden.weight", (ic.hidden_dim, ic.input_dim)),
        ("image_hidden.bias", (ic.hidden_dim,)),
    ]
    top = "shared_top" if snap.sharing == "share-top" else "image_top"
    shapes += [(f"{top}.weight", (ic.embed_dim, ic.hidden_dim)), (f"{top}.bias", (ic.embed_dim,))]
    shapes += [
        ("text_hidden.weight", (tc.hidden_dim, tc.input_dim)),
        ("text_hidden.bias", (tc.hidden_dim,)),
    ]
    if snap.sharing != "share-top":
        shapes += [("text_top.weight", (tc.embed_dim, tc.hidden_dim)), ("text_top.bias", (tc.embed_dim,))]
    return shapes


def _write_array(buf, arr, shape):
    arr = np.asarray(arr, dtype="<f8")
    if arr.shape != shape:
        raise DimensionError(f"array shape {arr.shape} != expected {shape}")
    buf.write(arr.tobytes(order="C"))


def _read_array(buf, shape):
    n = int(np.prod(shape))
    raw = buf.read(8 * n)
    if len(raw) != 8 * n:
        raise TruncatedFileError("snapshot ended inside a parameter array")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def dumps(snap: ModelSnapshot, importance: ImportanceMap | None = None) -> bytes:
    buf = io.BytesIO()
    ic, tc = snap.image_config, snap.text_config
    buf.write(_HEADER.pack(
        MAGIC, VERSION, 1 if snap.sharing == "share-top" else 0,
        ic.input_dim, ic.hidden_dim, tc.input_dim, tc.hidden_dim, ic.embed_dim, snap.task_index,
    ))
    shapes = _param_shapes(snap)
    for name, shape in shapes:
        _write_array(buf, snap.params[name], shape)
    if importance is not None:
        buf.write(struct.pack("<BBI", SECTION_IMPORTANCE, ESTIMATORS.index(importance.estimator),
                              importance.task_index))
        lookup = dict(shapes)
        for branch in ("image", "text"):
            for name in snap.branch_param_names(branch):
                _write_array(buf, importance.branch(branch)[name], lookup[name])
    return buf.getvalue()


def loads(data: bytes):
    """Parse a container; returns ``(snapshot, importance_or_None)``."""
    buf = io.BytesIO(data)
    head = buf.read(_HEADER.size)
    if len(head) < 4 or head[:4] != MAGIC:
        raise BadMagicError("not an XMCL snapshot")
    if len(head) != _HEADER.size:
        raise TruncatedFileError("snapshot header truncated")
    _, version, sharing, i_in, i_hid, t_in, t_hid, embed, task_index = _HEADER.unpack(head)
    if version != VERSION:
        raise VersionMismatchError(f"snapshot version {version}, expected {VERSION}")
    if sharing not in (0, 1):
        raise BadMagicError(f"invalid sharing flag {sharing}")
    snap = ModelSnapshot(
        task_index=task_index,
        sharing="share-top" if sharing else "no-sharing",
        image_config=BranchConfig(i_in, i_hid, embed),
        text_config=BranchConfig(t_in, t_hid, embed),
        params={},
    )
    shapes = _param_shapes(snap)
    for name, shape in shapes:
        snap.params[name] = _read_array(buf, shape)
    importance = None
    while True:
        tag = buf.read(1)
        if not tag:
            break
        if tag[0] != SECTION_IMPORTANCE:
            raise BadMagicError(f"unknown section id {tag[0]}")
        rest = buf.read(5)
        if len(rest) != 5:
            raise TruncatedFileError("importance section header truncated")
        est, imp_task = struct.unpack("<BI", rest)
        lookup = dict(shapes)
        importance = ImportanceMap({}, {}, ESTIMATORS[est], imp_task)
        for branch in ("image", "text"):
            for name in snap.branch_param_names(branch):
                importance.branch(branch)[name] = _read_array(buf, lookup[name])
    return snap, importance


def save(path, snap: ModelSnapshot, importance: ImportanceMap | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(snap, importance))
    return path


def load(path):
    return loads(Path(path).read_bytes())
