"""Synthetic task generation and the XMFT feature file format.

Feature file layout (little-endian)::

    b"XMFT"  u16 version  u8 modality (0 image, 1 text)  u64 count  u32 dim
    f32[count * dim]   row-major features
    u64[count]         item ids
    u16[count]         task ids

A dataset directory holds ``images.xmft``, ``texts.xmft``, ``pairs.csv``
(``task_id,image_id,text_id,split``) and ``manifest.json``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DuplicateIdError,
    FormatError,
    NonFiniteError,
    TruncatedFileError,
    VersionMismatchError,
)
from .tasks import TaskDataset

MAGIC = b"XMFT"
VERSION = 1
MODALITIES = ("image", "text")
_HEADER = struct.Struct("<4sHBQI")


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale stand-in for a sequence of retrieval domains.

    Each category owns a unit latent direction. An item's latent is
    ``separation * direction + item_spread * xi`` with ``xi`` shared by the
    item's image and text. Images and texts are two different affine lifts of
    that latent plus independent ``noise``. ``task_mixing`` blends in a
    task-specific lift on top of the shared one (0 keeps one lift for all
    tasks), which is what makes later tasks overwrite earlier alignments.
    ``category_overlap`` pulls every task's category directions toward a
    shared set of prototypes, so items of different tasks look alike, and
    ``task_shift`` adds a small per-task feature offset: the only cue a model
    can use to keep tasks apart. The defaults are the benchmark setting used
    by the experiment harness.
    """

    tasks: int = 3
    categories_per_task: int = 3
    pairs_per_category: int = 80
    image_dim: int = 64
    text_dim: int = 96
    separation: float = 1.0
    noise: float = 0.2
    seed: int = 0
    latent_dim: int = 8
    item_spread: float = 1.0
    task_mixing: float = 0.75
    category_overlap: float = 0.95
    task_shift: float = 0.1

    def __post_init__(self):
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.noise < 0 or self.item_spread < 0 or self.task_shift < 0:
            raise ValueError("noise and item_spread must be non-negative")
        if not 0.0 <= self.task_mixing <= 1.0:
            raise ValueError("task_mixing must lie in [0, 1]")
        if not 0.0 <= self.category_overlap <= 1.0:
            raise ValueError("category_overlap must lie in [0, 1]")
        if min(self.image_dim, self.text_dim) < self.latent_dim:
            raise ValueError("feature dims must be at least the latent rank")
        if self.tasks < 1 or self.categories_per_task < 1 or self.pairs_per_category < 1:
            raise ValueError("tasks, categories and pairs must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _split_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val), dtype=object)
    return labels[rng.permutation(n)]


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _lift(rng, out_dim, latent_dim):
    return rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(out_dim, latent_dim)), rng.normal(0.0, 0.5, size=out_dim)


def generate_synthetic(spec: SyntheticSpec) -> list:
    rng = np.random.default_rng(spec.seed)
    r = spec.latent_dim
    lift_img = _lift(rng, spec.image_dim, r)
    lift_txt = _lift(rng, spec.text_dim, r)
    prototypes = _unit_rows(rng.normal(size=(spec.categories_per_task, r)))
    n_per_task = spec.categories_per_task * spec.pairs_per_category
    total = spec.tasks * n_per_task
    mix = spec.task_mixing
    out = []
    for t in range(1, spec.tasks + 1):
        task_img = _lift(rng, spec.image_dim, r)
        task_txt = _lift(rng, spec.text_dim, r)
        A_img = np.sqrt(1 - mix**2) * lift_img[0] + mix * task_img[0]
        A_txt = np.sqrt(1 - mix**2) * lift_txt[0] + mix * task_txt[0]
        # a small per-task offset is the only feature-level cue telling tasks apart
        b_img = lift_img[1] + spec.task_shift * rng.normal(size=spec.image_dim)
        b_txt = lift_txt[1] + spec.task_shift * rng.normal(size=spec.text_dim)
        latents, splits = [], []
        own = _unit_rows(rng.normal(size=(spec.categories_per_task, r)))
        directions = _unit_rows(spec.category_overlap * prototypes + (1 - spec.category_overlap) * own)
        for direction in directions:
            xi = rng.normal(0.0, 1.0 / np.sqrt(r), size=(spec.pairs_per_category, r))
            latents.append(spec.separation * direction + spec.item_spread * xi)
            splits.append(_split_labels(spec.pairs_per_category, rng))
        Z = np.concatenate(latents)
        split = np.concatenate(splits)
        X = Z @ A_img.T + b_img + spec.noise * rng.normal(size=(n_per_task, spec.image_dim))
        Y = Z @ A_txt.T + b_txt + spec.noise * rng.normal(size=(n_per_task, spec.text_dim))
        base = (t - 1) * n_per_task
        image_ids = np.arange(base, base + n_per_task, dtype=np.int64)
        text_ids = image_ids + total
        out.append(TaskDataset(
            task_id=t,
            image_ids=image_ids,
            # stored as float32 on disk; keep in-memory values representable
            image_features=X.astype(np.float32).astype(np.float64),
            text_ids=text_ids,
            text_features=Y.astype(np.float32).astype(np.float64),
            positives=list(zip(image_ids.tolist(), text_ids.tolist())),
            image_split=split,
            text_split=split.copy(),
            name=f"task{t}",
        ))
    return out


# feature files


def dumps_features(features: np.ndarray, ids: Sequence[int], task_ids: Sequence[int], modality: str) -> bytes:
    feats = np.asarray(features)
    ids = np.asarray(ids, dtype="<u8")
    task_ids = np.asarray(task_ids, dtype="<u2")
    if feats.ndim != 2 or feats.shape[0] != ids.shape[0] or ids.shape != task_ids.shape:
        raise FormatError("features, ids and task ids disagree in length")
    head = _HEADER.pack(MAGIC, VERSION, MODALITIES.index(modality), feats.shape[0], feats.shape[1])
    return head + feats.astype("<f4").tobytes() + ids.tobytes() + task_ids.tobytes()


@dataclass
class FeatureTable:
    modality: str
    features: np.ndarray  # float64 copy of the stored float32 values
    ids: np.ndarray
    task_ids: np.ndarray


def loads_features(data: bytes) -> FeatureTable:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not an XMFT feature file")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("feature header truncated")
    _, version, modality, count, dim = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"feature file version {version}, expected {VERSION}")
    if modality >= len(MODALITIES):
        raise FormatError(f"invalid modality code {modality}")
    expected = _HEADER.size + count * dim * 4 + count * 8 + count * 2
    if len(data) != expected:
        raise TruncatedFileError(f"feature file holds {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    feats = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    off += count * dim * 4
    ids = np.frombuffer(data, dtype="<u8", count=count, offset=off)
    off += count * 8
    task_ids = np.frombuffer(data, dtype="<u2", count=count, offset=off)
    bad = ~np.all(np.isfinite(feats), axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite feature value in row {row}", row=row)
    if np.unique(ids).size != ids.size:
        raise DuplicateIdError("duplicate item ids in feature file")
    return FeatureTable(MODALITIES[modality], feats.astype(np.float64), ids.astype(np.int64),
                        task_ids.astype(np.int64))


def write_features(path, features, ids, task_ids, modality) -> Path:
    path = Path(path)
    path.write_bytes(dumps_features(features, ids, task_ids, modality))
    return path


def load_features(path) -> FeatureTable:
    return loads_features(Path(path).read_bytes())


def save_dataset(tasks: Sequence[TaskDataset], out_dir, manifest: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for modality in MODALITIES:
        feats = np.concatenate([t.image_features if modality == "image" else t.text_features for t in tasks])
        ids = np.concatenate([t.image_ids if modality == "image" else t.text_ids for t in tasks])
        tids = np.concatenate([np.full(len(t.image_ids if modality == "image" else t.text_ids), t.task_id)
                               for t in tasks])
        write_features(out / f"{modality}s.xmft", feats, ids, tids, modality)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", "image_id", "text_id", "split"])
    for t in tasks:
        rows = {int(i): r for r, i in enumerate(t.image_ids)}
        for i, j in t.positives:
            w.writerow([t.task_id, i, j, t.image_split[rows[i]]])
    (out / "pairs.csv").write_text(buf.getvalue())
    meta = dict(manifest or {})
    meta["data_hash"] = dataset_hash(out)
    (out / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def dataset_hash(path) -> str:
    h = hashlib.sha256()
    for name in ("images.xmft", "texts.xmft", "pairs.csv"):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


def tasks_hash(tasks: Sequence[TaskDataset]) -> str:
    """Content hash of in-memory tasks (features, ids, pairs, splits)."""
    h = hashlib.sha256()
    for t in tasks:
        h.update(struct.pack("<q", t.task_id))
        for arr in (t.image_ids, t.text_ids, t.image_features.astype("<f8"), t.text_features.astype("<f8")):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps([t.positives, t.image_split.tolist(), t.text_split.tolist()]).encode())
    return h.hexdigest()


def load_dataset(path) -> list:
    path = Path(path)
    images = load_features(path / "images.xmft")
    texts = load_features(path / "texts.xmft")
    if images.modality != "image" or texts.modality != "text":
        raise FormatError("images.xmft / texts.xmft hold the wrong modality")
    with open(path / "pairs.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    split_of = {}
    pairs_by_task: dict = {}
    for row in rows:
        t, i, j = int(row["task_id"]), int(row["image_id"]), int(row["text_id"])
        pairs_by_task.setdefault(t, []).append((i, j))
        split_of[("image", i)] = row["split"]
        split_of[("text", j)] = row["split"]
    tasks = []
    for t in sorted(set(images.task_ids.tolist()) | set(texts.task_ids.tolist())):
        im = images.task_ids == t
        tx = texts.task_ids == t
        tasks.append(TaskDataset(
            task_id=t,
            image_ids=images.ids[im],
            image_features=images.features[im],
            text_ids=texts.ids[tx],
            text_features=texts.features[tx],
            positives=pairs_by_task.get(t, []),
            image_split=np.array([split_of.get(("image", int(i)), "train") for i in images.ids[im]], dtype=object),
            text_split=np.array([split_of.get(("text", int(j)), "train") for j in texts.ids[tx]], dtype=object),
            name=f"task{t}",
        ))
    return tasks
