import itertools

import numpy as np
import pytest
from conftest import random_store, toy_model, toy_task

from xmcl.errors import (
    BadMagicError,
    DimensionError,
    EmptyScopeError,
    PolicyViolationError,
    StateError,
    TruncatedFileError,
    VersionMismatchError,
)
from xmcl.index import (
    IndexStore,
    diagnose_drift,
    overlap_score,
    query,
    query_batch,
    recall_at_k,
    recall_report,
)
from xmcl.triplets import SimilarityMatrix


def brute_force(store, model, q, direction, task, k):
    modality = "text" if direction == "im2txt" else "image"
    emb = model.embed("image" if direction == "im2txt" else "text", q[None])[0]
    rows = [r for r in store.records(modality) if task is None or r["task_id"] == task]
    scored = [(float(np.sqrt(np.sum((r["vector"].astype(np.float64) - emb) ** 2))), int(r["item_id"])) for r in rows]
    scored.sort()
    return [i for _, i in scored[:k]], [d for d, _ in scored[:k]]


def test_no_reindex_entries_are_immutable():
    model = toy_model(0)
    store = IndexStore(model.embed_dim, "no-reindex")
    store.index_task(model, toy_task(1))
    before = store.entry_bytes(task_id=1)
    store.index_task(toy_model(1), toy_task(2))
    store.index_task(toy_model(2), toy_task(3))
    assert store.entry_bytes(task_id=1) == before
    assert {e.extractor_version for e in store.entries() if e.task_id == 1} == {1}
    with pytest.raises(PolicyViolationError):
        store.index_task(model, toy_task(1))


def test_reindex_recomputes_every_entry():
    store = IndexStore(3, "reindex")
    tasks = [toy_task(t) for t in (1, 2, 3)]
    for t, task in enumerate(tasks):
        store.index_task(toy_model(t), task)
    latest = toy_model(2)
    for task in tasks:
        for modality, ids, feats in (("image", task.image_ids, task.image_features),
                                     ("text", task.text_ids, task.text_features)):
            expected = latest.embed(modality, feats).astype(np.float32)
            for item, vec in zip(ids, expected):
                entry = store.entry(modality, int(item))
                assert entry.extractor_version == 3
                assert entry.vector.tobytes() == vec.tobytes()


def test_reindex_without_sources_fails():
    store = IndexStore(3, "reindex")
    store.index_task(toy_model(0), toy_task(1))
    reloaded = IndexStore.loads(store.dumps())
    with pytest.raises(StateError):
        reloaded.index_task(toy_model(0), toy_task(2))
    reloaded.register_source(toy_task(1))
    reloaded.index_task(toy_model(0), toy_task(2))
    assert reloaded.task_ids() == [1, 2]


def test_index_dimension_mismatch():
    with pytest.raises(DimensionError):
        IndexStore(4).index_task(toy_model(0), toy_task(1))


def test_index_respects_database_splits():
    task = toy_task(1, splits=["train", "val", "test", "train", "val", "test"])
    store = IndexStore(3).index_task(toy_model(0), task)
    assert sorted(e.item_id for e in store.entries("image")) == [100, 102, 103, 105]


def test_exact_match_ranks_first_with_zero_distance():
    model = toy_model(0)
    task = toy_task(1)
    store = IndexStore(3).index_task(model, task)
    # plant the query's own embedding as a text entry
    emb = model.embed("image", task.image_features[:1])[0]
    store._gen.table("text")["vector"][2] = emb.astype(np.float32)
    res = query(store, model, task.image_features[0], "im2txt", k=3)
    assert res.ranking[0] == task.text_ids[2]
    assert res.distances[0] == pytest.approx(0.0, abs=1e-6)


def test_ties_break_by_item_id():
    model = toy_model(0)
    task = toy_task(1, n=4)
    store = IndexStore(3).index_task(model, task)
    store._gen.table("image")["vector"][:] = np.float32([1.0, 0.0, 0.0])
    res = query(store, model, task.text_features[0], "txt2im", k=4)
    assert res.ranking.tolist() == sorted(task.image_ids.tolist())


def test_k_larger_than_scope_returns_everything():
    model = toy_model(0)
    store = IndexStore(3).index_task(model, toy_task(1, n=3)).index_task(model, toy_task(2, n=4))
    res = query(store, model, np.zeros(5) + 1, "im2txt", task=2, k=50)
    assert len(res.ranking) == 4 and set(res.ranking) == {250, 251, 252, 253}
    assert res.scope == "known(2)"
    with pytest.raises(EmptyScopeError):
        query(store, model, np.ones(5), "im2txt", task=9)
    with pytest.raises(ValueError):
        query(store, model, np.ones(5), "im2txt", k=0)


def test_query_matches_brute_force_seed_13():
    store, model, tasks = random_store(13)
    rng = np.random.default_rng(13)
    for direction, task in itertools.product(("im2txt", "txt2im"), [None] + [t.task_id for t in tasks]):
        q = rng.normal(size=5 if direction == "im2txt" else 4)
        res = query(store, model, q, direction, task, k=7)
        ids, dists = brute_force(store, model, q, direction, task, 7)
        assert res.ranking.tolist() == ids
        assert res.distances.tolist() == dists


def test_query_batch_agrees_with_single_queries():
    store, model, tasks = random_store(3)
    Q = np.random.default_rng(0).normal(size=(4, 4))
    batch = query_batch(store, model, Q, [1, 2, 3, 4], "txt2im", k=5)
    for row, res in zip(Q, batch):
        single = query(store, model, row, "txt2im", k=5)
        assert np.array_equal(single.ranking, res.ranking)


def _result(qid, ranking, direction="im2txt"):
    from xmcl.index import QueryResult
    return QueryResult(qid, direction, None, np.array(ranking), np.zeros(len(ranking)))


def test_recall_hand_cases():
    sim = SimilarityMatrix(1, [1, 2], [11, 12], [(1, 11), (2, 12)])
    results = [_result(1, [12, 11]), _result(2, [11, 13])]
    assert recall_at_k(results, sim, 1) == 0.0
    assert recall_at_k(results, sim, 2) == 0.5
    both = [_result(1, [11]), _result(2, [12])]
    assert recall_at_k(both, sim, 1) == 1.0
    rev = [_result(11, [1], "txt2im"), _result(12, [1], "txt2im")]
    assert recall_at_k(rev, sim, 1) == 0.5


def test_recall_excludes_queries_without_positives():
    sim = SimilarityMatrix(1, [1, 2], [11, 12], [(1, 11), (2, 12)])
    report = recall_report([_result(1, [11]), _result(2, [11])], sim, 1, database_ids=[11])
    assert (report.recall, report.evaluated, report.excluded) == (1.0, 1, 1)
    with pytest.raises(ValueError):
        recall_report([_result(2, [11])], sim, 1, database_ids=[11])
    with pytest.raises(ValueError):
        recall_at_k([_result(1, [11])], sim, 0)


def test_store_round_trip_and_format_errors(tmp_path):
    store, _, _ = random_store(5)
    path = store.save(tmp_path / "s.xmix")
    again = IndexStore.load(path)
    assert again.dumps() == store.dumps()
    assert again.policy == store.policy and len(again) == len(store)
    data = store.dumps()
    with pytest.raises(BadMagicError):
        IndexStore.loads(b"NOPE" + data[4:])
    with pytest.raises(TruncatedFileError):
        IndexStore.loads(data[:-3])
    with pytest.raises(TruncatedFileError):
        IndexStore.loads(data[:10])
    with pytest.raises(VersionMismatchError):
        IndexStore.loads(data[:4] + (9).to_bytes(2, "little") + data[6:])


def test_empty_store_round_trip():
    store = IndexStore(8, "reindex")
    again = IndexStore.loads(store.dumps())
    assert len(again) == 0 and again.policy == "reindex"


def test_overlap_score_matches_brute_force():
    store, _, tasks = random_store(21, max_entries=60)
    for task in tasks:
        crossing = total = 0
        for modality in ("image", "text"):
            recs = store.records(modality)
            mine = [r for r in recs if r["task_id"] == task.task_id]
            others = [r for r in recs if r["task_id"] != task.task_id]
            for r in mine:
                total += 1
                if len(mine) < 2 or not others:
                    continue
                d_own = min(np.linalg.norm(r["vector"].astype(float) - s["vector"].astype(float))
                            for s in mine if s["item_id"] != r["item_id"])
                d_other = min(np.linalg.norm(r["vector"].astype(float) - s["vector"].astype(float)) for s in others)
                crossing += d_other < d_own
        assert overlap_score(store, task.task_id) == pytest.approx(crossing / total)


def test_drift_is_zero_for_identical_snapshots():
    model = toy_model(0)
    tasks = [toy_task(1), toy_task(2)]
    report = diagnose_drift([model.snapshot(1), model.snapshot(2)], tasks)
    for vals in report.as_dict().values():
        assert vals["image_drift"] == 0.0 and vals["text_drift"] == 0.0 and vals["misalignment"] == 0.0


def test_drift_matches_direct_computation():
    a, b = toy_model(0), toy_model(1)
    tasks = [toy_task(1), toy_task(2)]
    report = diagnose_drift([a.snapshot(1), b.snapshot(2)], tasks).as_dict()
    t = tasks[0]
    expected = np.mean(np.linalg.norm(a.embed("image", t.image_features) - b.embed("image", t.image_features), axis=1))
    assert report[1]["image_drift"] == pytest.approx(expected)
    assert report[2]["image_drift"] == 0.0
    with pytest.raises(ValueError):
        diagnose_drift([a.snapshot(1)], tasks[:1])
