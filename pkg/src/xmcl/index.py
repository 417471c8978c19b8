"""Versioned embedding index, exact cross-modal querying, Recall@K and drift diagnostics.

Entries are l2-normalised float32 vectors tagged with the task they belong to
and the extractor version (task index of the model that produced them).

* ``no-reindex``: each task's items are embedded once, right after that task
  is learned, and never touched again.
* ``reindex``: every time a task is indexed, all live entries are re-embedded
  with the current model.

Queries are always embedded with the model passed in (the latest one).
Search is exact brute force with ties broken by ascending item id.
"""

from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DimensionError,
    EmptyScopeError,
    PolicyViolationError,
    StateError,
    TruncatedFileError,
    VersionMismatchError,
)
from .model import ModelSnapshot, TwoBranchModel
from .tasks import TaskDataset

log = logging.getLogger(__name__)

MODALITIES = ("image", "text")
POLICIES = ("reindex", "no-reindex")
DIRECTIONS = ("im2txt", "txt2im")
DATABASE_SPLITS = ("train", "test")

MAGIC = b"XMIX"
VERSION = 1
_HEADER = struct.Struct("<4sHBIQ")


def record_dtype(embed_dim: int) -> np.dtype:
    return np.dtype([
        ("item_id", "<u8"),
        ("task_id", "<u2"),
        ("modality", "u1"),
        ("version", "<u2"),
        ("vector", "<f4", (embed_dim,)),
    ])


@dataclass(frozen=True)
class IndexedEmbedding:
    item_id: int
    task_id: int
    modality: str
    extractor_version: int
    vector: np.ndarray


@dataclass(frozen=True)
class _Generation:
    number: int
    records: dict  # modality -> structured record array

    def table(self, modality):
        return self.records[modality]


def query_modality(direction: str) -> str:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    return "image" if direction == "im2txt" else "text"


def target_modality(direction: str) -> str:
    return "text" if query_modality(direction) == "image" else "image"


class IndexStore:
    """Exact index with one live entry per ``(modality, item_id)``.

    Readers always see a complete generation; ``index_task`` builds the next
    generation aside and swaps it in under a lock.
    """

    def __init__(self, embed_dim: int, policy: str = "no-reindex"):
        if policy not in POLICIES:
            raise ValueError(f"unknown index policy {policy!r}")
        self.embed_dim = int(embed_dim)
        self.policy = policy
        self._dtype = record_dtype(self.embed_dim)
        empty = np.zeros(0, dtype=self._dtype)
        self._gen = _Generation(0, {"image": empty, "text": empty.copy()})
        self._sources: dict = {}
        self._lock = threading.Lock()

    @property
    def generation(self) -> int:
        return self._gen.number

    def __len__(self):
        gen = self._gen
        return sum(len(gen.table(m)) for m in MODALITIES)

    def records(self, modality: str) -> np.ndarray:
        return self._gen.table(modality)

    def entries(self, modality: str | None = None) -> list:
        out = []
        for m in MODALITIES if modality is None else (modality,):
            for rec in self._gen.table(m):
                out.append(IndexedEmbedding(int(rec["item_id"]), int(rec["task_id"]), m,
                                            int(rec["version"]), rec["vector"].copy()))
        return out

    def entry(self, modality: str, item_id: int) -> IndexedEmbedding:
        table = self._gen.table(modality)
        hit = np.flatnonzero(table["item_id"] == item_id)
        if hit.size == 0:
            raise KeyError((modality, item_id))
        rec = table[hit[0]]
        return IndexedEmbedding(int(rec["item_id"]), int(rec["task_id"]), modality,
                                int(rec["version"]), rec["vector"].copy())

    def task_ids(self) -> list:
        gen = self._gen
        return sorted(set(gen.table("image")["task_id"].tolist()) | set(gen.table("text")["task_id"].tolist()))

    def register_source(self, task: TaskDataset) -> None:
        """Make a task's raw features available for re-embedding (reindex policy)."""
        self._sources[task.task_id] = task

    def _embed_records(self, model, task, modality, ids, version):
        feats = task.images(ids) if modality == "image" else task.texts(ids)
        vecs = model.embed(modality, feats) if len(ids) else np.zeros((0, self.embed_dim))
        rec = np.zeros(len(ids), dtype=self._dtype)
        rec["item_id"] = ids
        rec["task_id"] = task.task_id
        rec["modality"] = MODALITIES.index(modality)
        rec["version"] = version
        rec["vector"] = vecs.astype(np.float32)
        return rec

    def index_task(self, model: TwoBranchModel, task: TaskDataset, version: int | None = None,
                   splits: Sequence[str] = DATABASE_SPLITS) -> "IndexStore":
        if model.embed_dim != self.embed_dim:
            raise DimensionError(f"model embeds into {model.embed_dim} dims, index holds {self.embed_dim}")
        version = task.task_id if version is None else int(version)
        with self._lock:
            old = self._gen
            new = {}
            for modality in MODALITIES:
                ids = np.sort(task.image_ids_in(splits) if modality == "image" else task.text_ids_in(splits))
                table = old.table(modality)
                live = np.isin(table["item_id"], ids)
                if self.policy == "no-reindex" and live.any():
                    dup = int(table["item_id"][live][0])
                    raise PolicyViolationError(f"{modality} item {dup} is already indexed (no-reindex)")
                table = table[~live]
                if self.policy == "reindex" and len(table):
                    table = self._reembed(model, table, modality, version)
                new[modality] = np.concatenate([table, self._embed_records(model, task, modality, ids, version)])
            self._sources[task.task_id] = task
            self._gen = _Generation(old.number + 1, new)
        return self

    def _reembed(self, model, table, modality, version):
        table = table.copy()
        for task_id in np.unique(table["task_id"]):
            source = self._sources.get(int(task_id))
            if source is None:
                raise StateError(f"reindex needs the source features of task {int(task_id)}")
            rows = np.flatnonzero(table["task_id"] == task_id)
            fresh = self._embed_records(model, source, modality, table["item_id"][rows].astype(np.int64), version)
            table[rows] = fresh
        return table

    # persistence

    def entry_bytes(self, modality: str | None = None, task_id: int | None = None) -> bytes:
        """Persisted record bytes, optionally restricted to one modality / task."""
        parts = []
        for m in MODALITIES if modality is None else (modality,):
            table = self._gen.table(m)
            if task_id is not None:
                table = table[table["task_id"] == task_id]
            parts.append(table.tobytes())
        return b"".join(parts)

    def dumps(self) -> bytes:
        gen = self._gen
        count = sum(len(gen.table(m)) for m in MODALITIES)
        head = _HEADER.pack(MAGIC, VERSION, POLICIES.index(self.policy), self.embed_dim, count)
        return head + b"".join(gen.table(m).tobytes() for m in MODALITIES)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.dumps())
        return path

    @classmethod
    def loads(cls, data: bytes) -> "IndexStore":
        if data[:4] != MAGIC:
            raise BadMagicError("not an XMIX index file")
        if len(data) < _HEADER.size:
            raise TruncatedFileError("index header truncated")
        _, version, policy, embed_dim, count = _HEADER.unpack_from(data)
        if version != VERSION:
            raise VersionMismatchError(f"index version {version}, expected {VERSION}")
        store = cls(embed_dim, POLICIES[policy])
        body = data[_HEADER.size:]
        if len(body) != count * store._dtype.itemsize:
            raise TruncatedFileError(f"index body holds {len(body)} bytes, expected {count * store._dtype.itemsize}")
        recs = np.frombuffer(body, dtype=store._dtype).copy()
        store._gen = _Generation(1 if count else 0, {
            m: recs[recs["modality"] == k] for k, m in enumerate(MODALITIES)
        })
        return store

    @classmethod
    def load(cls, path) -> "IndexStore":
        return cls.loads(Path(path).read_bytes())


@dataclass
class QueryResult:
    query_id: int | None
    direction: str
    task: int | None  # None means unknown-task scope
    ranking: np.ndarray
    distances: np.ndarray

    @property
    def scope(self) -> str:
        return "unknown" if self.task is None else f"known({self.task})"


def pairwise_distances(queries: np.ndarray, database: np.ndarray) -> np.ndarray:
    """Exact Euclidean distances, float64; each cell depends only on its two rows."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d = np.asarray(database, dtype=np.float64)
    out = np.empty((q.shape[0], d.shape[0]))
    for r in range(q.shape[0]):
        out[r] = np.sqrt(np.sum((d - q[r]) ** 2, axis=1))
    return out


def _scope_table(store: IndexStore, direction: str, task: int | None):
    table = store.records(target_modality(direction))
    if task is not None:
        table = table[table["task_id"] == task]
    if len(table) == 0:
        raise EmptyScopeError(f"no {target_modality(direction)} entries in scope {task!r}")
    return table


def rank(distances: np.ndarray, ids: np.ndarray, k: int):
    order = np.lexsort((ids, distances))[:k]
    return ids[order], distances[order]


def query_embedded(store: IndexStore, embeddings: np.ndarray, direction: str, task: int | None = None,
                   k: int = 10, query_ids=None) -> list:
    """Rank scope-eligible entries for already-embedded queries."""
    if k < 1:
        raise ValueError("K must be >= 1")
    table = _scope_table(store, direction, task)
    ids = table["item_id"].astype(np.int64)
    dist = pairwise_distances(embeddings, table["vector"])
    query_ids = [None] * dist.shape[0] if query_ids is None else list(query_ids)
    results = []
    for qid, row in zip(query_ids, dist):
        r_ids, r_dist = rank(row, ids, k)
        results.append(QueryResult(None if qid is None else int(qid), direction, task, r_ids, r_dist))
    return results


def query(store: IndexStore, model: TwoBranchModel, q, direction: str, task: int | None = None,
          k: int = 10, query_id: int | None = None) -> QueryResult:
    """Embed one query with the current model and return its top-``k`` ranking."""
    emb = model.embed(query_modality(direction), np.atleast_2d(q))
    return query_embedded(store, emb, direction, task, k, [query_id])[0]


def query_batch(store: IndexStore, model: TwoBranchModel, Q, query_ids, direction: str,
                task: int | None = None, k: int = 10) -> list:
    emb = model.embed(query_modality(direction), np.atleast_2d(Q))
    return query_embedded(store, emb, direction, task, k, query_ids)


@dataclass
class RecallReport:
    recall: float
    hits: int
    evaluated: int
    excluded: int


def _positive_map(ground_truth, direction: str) -> dict:
    sims = ground_truth if isinstance(ground_truth, (list, tuple)) else [ground_truth]
    pos: dict = {}
    for s in sims:
        for i, j in s.positives:
            if direction == "im2txt":
                pos.setdefault(i, set()).add(j)
            else:
                pos.setdefault(j, set()).add(i)
    return pos


def recall_report(results: Sequence[QueryResult], ground_truth, k: int, database_ids=None) -> RecallReport:
    """Fraction of queries with at least one positive in their top-``k``.

    Queries with no positive (in ``database_ids`` when given) are excluded.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    maps = {}
    db = None if database_ids is None else set(int(x) for x in database_ids)
    hits = evaluated = excluded = 0
    for res in results:
        if res.direction not in maps:
            maps[res.direction] = _positive_map(ground_truth, res.direction)
        positives = maps[res.direction].get(res.query_id, set())
        if db is not None:
            positives = positives & db
        if not positives:
            excluded += 1
            continue
        evaluated += 1
        if any(int(x) in positives for x in res.ranking[:k]):
            hits += 1
    if excluded:
        log.warning("%d quer(ies) without positives excluded from Recall@%d", excluded, k)
    if evaluated == 0:
        raise ValueError("no query has a positive to retrieve")
    return RecallReport(hits / evaluated, hits, evaluated, excluded)


def recall_at_k(results: Sequence[QueryResult], ground_truth, k: int, database_ids=None) -> float:
    return recall_report(results, ground_truth, k, database_ids).recall


# diagnostics


@dataclass
class TaskDrift:
    task_id: int
    image_drift: float
    text_drift: float
    positive_distance_then: float
    positive_distance_now: float
    overlap: float

    @property
    def misalignment(self) -> float:
        """Growth in mean positive-pair distance since the task was learned."""
        return self.positive_distance_now - self.positive_distance_then


@dataclass
class DriftReport:
    tasks: list

    def as_dict(self) -> dict:
        return {
            t.task_id: {
                "image_drift": t.image_drift,
                "text_drift": t.text_drift,
                "positive_distance_then": t.positive_distance_then,
                "positive_distance_now": t.positive_distance_now,
                "misalignment": t.misalignment,
                "overlap": t.overlap,
            }
            for t in self.tasks
        }


def overlap_score(store: IndexStore, task_id: int) -> float:
    """Fraction of a task's indexed items whose nearest other-task neighbour (same
    modality) is strictly closer than their nearest same-task neighbour."""
    crossing = total = 0
    for modality in MODALITIES:
        table = store.records(modality)
        mine = table["task_id"] == task_id
        if mine.sum() < 2 or (~mine).sum() == 0:
            total += int(mine.sum())
            continue
        own = table["vector"][mine]
        other = table["vector"][~mine]
        d_own = pairwise_distances(own, own)
        np.fill_diagonal(d_own, np.inf)
        d_other = pairwise_distances(own, other)
        crossing += int(np.sum(d_other.min(axis=1) < d_own.min(axis=1)))
        total += own.shape[0]
    return crossing / total if total else 0.0


def diagnose_drift(snapshots: Sequence[ModelSnapshot], tasks: Sequence[TaskDataset],
                   store: IndexStore | None = None) -> DriftReport:
    """Compare each task's embeddings under the model that learned it with the latest model.

    ``snapshots[i]`` is the model right after ``tasks[i]``; the last snapshot
    is the current model.
    """
    if len(snapshots) < 2:
        raise ValueError("drift diagnosis needs at least two snapshots")
    if len(snapshots) != len(tasks):
        raise ValueError("need one snapshot per task")
    now = snapshots[-1].restore()
    report = []
    for snap, task in zip(snapshots, tasks):
        then = snap.restore()
        drift = {}
        for modality, feats in (("image", task.image_features), ("text", task.text_features)):
            a = then.embed(modality, feats)
            b = now.embed(modality, feats)
            drift[modality] = float(np.mean(np.sqrt(np.sum((a - b) ** 2, axis=1))))
        img = [i for i, _ in task.positives]
        txt = [j for _, j in task.positives]
        pos = {}
        for label, m in (("then", then), ("now", now)):
            u = m.embed("image", task.images(img))
            v = m.embed("text", task.texts(txt))
            pos[label] = float(np.mean(np.sqrt(np.sum((u - v) ** 2, axis=1))))
        overlap = overlap_score(store, task.task_id) if store is not None else 0.0
        report.append(TaskDrift(task.task_id, drift["image"], drift["text"], pos["then"], pos["now"], overlap))
    return DriftReport(report)
