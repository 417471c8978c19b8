import numpy as np
import pytest
from conftest import toy_model

from xmcl import persist
from xmcl.errors import BadMagicError, TruncatedFileError, VersionMismatchError
from xmcl.regularization import ImportanceMap


def _importance(model, seed):
    rng = np.random.default_rng(seed)
    imp = ImportanceMap.zeros(model, "MAS")
    imp.task_index = 3
    for d in (imp.theta, imp.omega):
        for v in d.values():
            v[...] = rng.random(v.shape)
    return imp


@pytest.mark.parametrize("sharing", ["no-sharing", "share-top"])
def test_importance_section_round_trip(sharing):
    model = toy_model(2, sharing)
    imp = _importance(model, 0)
    snap, back = persist.loads(persist.dumps(model.snapshot(3), imp))
    assert snap.equals(model.snapshot(3))
    assert back.estimator == "MAS" and back.task_index == 3
    for branch in ("image", "text"):
        for name, v in imp.branch(branch).items():
            assert back.branch(branch)[name].tobytes() == v.tobytes()


def test_snapshot_without_importance():
    snap, imp = persist.loads(persist.dumps(toy_model(0).snapshot()))
    assert imp is None and snap.task_index == 0


def test_every_truncation_is_rejected():
    model = toy_model(1, hidden=4, embed=2)
    data = persist.dumps(model.snapshot(1), _importance(model, 1))
    bare = len(persist.dumps(model.snapshot(1)))
    # cutting exactly before the optional section leaves a valid bare snapshot
    assert persist.loads(data[:bare])[1] is None
    for cut in set(range(1, len(data))) - {bare}:
        with pytest.raises((TruncatedFileError, BadMagicError)):
            persist.loads(data[:cut])


def test_bad_magic_version_and_section():
    data = persist.dumps(toy_model(0).snapshot())
    with pytest.raises(BadMagicError):
        persist.loads(b"XMCX" + data[4:])
    with pytest.raises(VersionMismatchError):
        persist.loads(data[:4] + (2).to_bytes(2, "little") + data[6:])
    with pytest.raises(BadMagicError):
        persist.loads(data + b"\x07")


def test_loaded_snapshot_embeds_identically(tmp_path):
    model = toy_model(5, "share-top")
    x = np.random.default_rng(0).normal(size=(3, 5))
    snap, _ = persist.load(persist.save(tmp_path / "m.xmcl", model.snapshot()))
    assert np.array_equal(snap.restore().embed("image", x), model.embed("image", x))
