"""Positive-pair bookkeeping, triplet sampling and the bi-directional ranking loss.

Two triplet directions exist. An image-anchored triplet ``(x_i, y_j, y_k)``
asks ``d(x_i, y_j) + m <= d(x_i, y_k)``; a text-anchored one ``(y_j, x_i, x_k)``
asks ``d(y_j, x_i) + m <= d(y_j, x_k)``. Negatives drawn from the anchor's
own task are ITNPs, negatives from any other task are CTNPs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MissingEmbeddingError

log = logging.getLogger(__name__)

IM_ANCHOR = "im-anchor"
TXT_ANCHOR = "txt-anchor"
ITNP = "ITNP"
CTNP = "CTNP"
POLICIES = ("ITNP-only", "ITNP+CTNP")
MINING = ("random", "hardest-in-batch")


@dataclass(frozen=True, order=True)
class PositivePair:
    task_id: int
    image_id: int
    text_id: int


class SimilarityMatrix:
    """Sparse 0/1 cross-modal labels of one task; only annotated pairs are positive."""

    def __init__(self, task_id: int, image_ids: Iterable[int], text_ids: Iterable[int], positives):
        self.task_id = int(task_id)
        self.image_ids = [int(i) for i in image_ids]
        self.text_ids = [int(j) for j in text_ids]
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError(f"task {task_id}: duplicate image ids")
        if len(set(self.text_ids)) != len(self.text_ids):
            raise ValueError(f"task {task_id}: duplicate text ids")
        self.positives = frozenset((int(i), int(j)) for i, j in positives)
        images, texts = set(self.image_ids), set(self.text_ids)
        self._texts_of: dict = {i: set() for i in self.image_ids}
        self._images_of: dict = {j: set() for j in self.text_ids}
        for i, j in self.positives:
            if i not in images or j not in texts:
                raise ValueError(f"task {task_id}: positive ({i}, {j}) references unknown id")
            self._texts_of[i].add(j)
            self._images_of[j].add(i)
        lonely = [i for i, s in self._texts_of.items() if not s] + [j for j, s in self._images_of.items() if not s]
        if lonely:
            raise ValueError(f"task {task_id}: ids without a positive pair: {sorted(lonely)[:5]}")

    def is_positive(self, image_id: int, text_id: int) -> bool:
        return (image_id, text_id) in self.positives

    def texts_of(self, image_id: int) -> set:
        return self._texts_of[image_id]

    def images_of(self, text_id: int) -> set:
        return self._images_of[text_id]

    def pairs(self) -> list:
        return sorted(PositivePair(self.task_id, i, j) for i, j in self.positives)

    def __repr__(self):
        return (
            f"SimilarityMatrix(task={self.task_id}, images={len(self.image_ids)}, "
            f"texts={len(self.text_ids)}, positives={len(self.positives)})"
        )


@dataclass(frozen=True)
class Triplet:
    direction: str
    anchor_id: int
    positive_id: int
    negative_id: int
    negative_kind: str
    task_id: int


@dataclass
class LossConfig:
    margin: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 1.5
    negatives_per_positive: int | None = 1  # None means every valid negative
    mining: str = "random"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("direction weights must be non-negative")
        if self.mining not in MINING:
            raise ValueError(f"unknown mining strategy {self.mining!r}")
        if self.negatives_per_positive is not None and self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1 or None")


@dataclass
class TripletBatch:
    triplets: list = field(default_factory=list)
    skipped: int = 0

    @property
    def ctnp_count(self) -> int:
        return sum(t.negative_kind == CTNP for t in self.triplets)

    def __len__(self):
        return len(self.triplets)


class TripletSampler:
    """Negative pools per anchor under a pair policy, cached across batches."""

    def __init__(self, sims: Sequence[SimilarityMatrix], policy: str = "ITNP-only"):
        if policy not in POLICIES:
            raise ValueError(f"unknown pair policy {policy!r}")
        self.policy = policy
        self.sims = {s.task_id: s for s in sims}
        if len(self.sims) != len(sims):
            raise ValueError("duplicate task ids among similarity matrices")
        self._image_task = {i: s.task_id for s in sims for i in s.image_ids}
        self._text_task = {j: s.task_id for s in sims for j in s.text_ids}
        self._images = {t: np.array(sorted(s.image_ids), dtype=np.int64) for t, s in self.sims.items()}
        self._texts = {t: np.array(sorted(s.text_ids), dtype=np.int64) for t, s in self.sims.items()}
        self._cache: dict = {}

    def task_of(self, modality: str, item_id: int) -> int:
        return (self._image_task if modality == "image" else self._text_task)[item_id]

    def negative_pool(self, direction: str, anchor_id: int) -> np.ndarray:
        """Sorted candidate negatives: within-task ones first, then other tasks'."""
        key = (direction, anchor_id)
        pool = self._cache.get(key)
        if pool is not None:
            return pool
        if direction == IM_ANCHOR:
            task = self._image_task[anchor_id]
            positives, by_task = self.sims[task].texts_of(anchor_id), self._texts
        else:
            task = self._text_task[anchor_id]
            positives, by_task = self.sims[task].images_of(anchor_id), self._images
        own = by_task[task]
        parts = [own[~np.isin(own, list(positives))]]
        if self.policy == "ITNP+CTNP":
            parts += [by_task[t] for t in sorted(by_task) if t != task]
        pool = np.concatenate(parts)
        self._cache[key] = pool
        return pool

    def _kind(self, direction, anchor_task, negative_id):
        modality = "text" if direction == IM_ANCHOR else "image"
        return ITNP if self.task_of(modality, negative_id) == anchor_task else CTNP

    def sample(self, batch: Sequence[PositivePair], cfg: LossConfig, rng: np.random.Generator,
               image_embeddings: Mapping | None = None, text_embeddings: Mapping | None = None) -> TripletBatch:
        if not batch:
            raise ValueError("empty batch")
        out = TripletBatch()
        n = cfg.negatives_per_positive
        hardest = cfg.mining == "hardest-in-batch"
        if hardest:
            if image_embeddings is None or text_embeddings is None:
                raise ValueError("hardest-in-batch mining needs embeddings")
            batch_texts = np.array(sorted({p.text_id for p in batch}), dtype=np.int64)
            batch_images = np.array(sorted({p.image_id for p in batch}), dtype=np.int64)
        for pair in batch:
            lacking = False
            for direction, anchor, positive in (
                (IM_ANCHOR, pair.image_id, pair.text_id),
                (TXT_ANCHOR, pair.text_id, pair.image_id),
            ):
                pool = self.negative_pool(direction, anchor)
                if hardest:
                    pool = pool[np.isin(pool, batch_texts if direction == IM_ANCHOR else batch_images)]
                if pool.size == 0:
                    lacking = True
                    continue
                if hardest:
                    a = (image_embeddings if direction == IM_ANCHOR else text_embeddings)[anchor]
                    others = text_embeddings if direction == IM_ANCHOR else image_embeddings
                    d = np.array([np.linalg.norm(a - others[k]) for k in pool])
                    order = np.lexsort((pool, d))
                    chosen = pool[order[: (pool.size if n is None else n)]]
                elif n is None or n >= pool.size:
                    chosen = pool
                elif n == 1:
                    chosen = pool[[rng.integers(pool.size)]]
                else:
                    chosen = np.sort(rng.choice(pool, size=n, replace=False))
                for neg in chosen:
                    out.triplets.append(
                        Triplet(direction, anchor, positive, int(neg),
                                self._kind(direction, pair.task_id, int(neg)), pair.task_id)
                    )
            if lacking:
                out.skipped += 1
        if out.skipped:
            log.warning("%d positive pair(s) had no valid negative and were skipped", out.skipped)
        return out


def sample_triplets(batch, sims, policy="ITNP-only", cfg: LossConfig | None = None, rng=None,
                    image_embeddings=None, text_embeddings=None) -> TripletBatch:
    """One-shot convenience wrapper around :class:`TripletSampler`."""
    cfg = cfg or LossConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    return TripletSampler(sims, policy).sample(batch, cfg, rng, image_embeddings, text_embeddings)


@dataclass
class LossResult:
    loss: float
    image_grads: dict
    text_grads: dict
    active: int = 0


def _hinge_terms(anchor, pos, neg, margin, weight):
    """Per-triplet hinge and its gradients w.r.t. anchor / positive / negative rows."""
    diff_p = anchor - pos
    diff_n = anchor - neg
    d_p = np.sqrt(np.sum(diff_p**2, axis=1))
    d_n = np.sqrt(np.sum(diff_n**2, axis=1))
    h = d_p + margin - d_n
    active = h > 0
    # d(|a-b|)/da is undefined at a == b; take the zero subgradient there
    dir_p = np.divide(diff_p, d_p[:, None], out=np.zeros_like(diff_p), where=d_p[:, None] > 0)
    dir_n = np.divide(diff_n, d_n[:, None], out=np.zeros_like(diff_n), where=d_n[:, None] > 0)
    w = (weight * active)[:, None]
    loss = weight * float(np.sum(h[active]))
    return loss, w * (dir_p - dir_n), -w * dir_p, w * dir_n, int(active.sum())


def ranking_loss_rows(U, V, im_rows, txt_rows, cfg: LossConfig):
    """Vectorised bi-directional loss over row-indexed embedding matrices.

    ``im_rows`` is ``(anchor_rows_in_U, pos_rows_in_V, neg_rows_in_V)``,
    ``txt_rows`` is ``(anchor_rows_in_V, pos_rows_in_U, neg_rows_in_U)``.
    Returns ``(loss, dU, dV, n_active)``.
    """
    dU = np.zeros_like(U)
    dV = np.zeros_like(V)
    loss = 0.0
    active = 0
    a, p, n = (np.asarray(r, dtype=np.intp) for r in im_rows)
    if a.size:
        l, ga, gp, gn, k = _hinge_terms(U[a], V[p], V[n], cfg.margin, cfg.lambda1)
        loss += l
        active += k
        np.add.at(dU, a, ga)
        np.add.at(dV, p, gp)
        np.add.at(dV, n, gn)
    a, p, n = (np.asarray(r, dtype=np.intp) for r in txt_rows)
    if a.size:
        l, ga, gp, gn, k = _hinge_terms(V[a], U[p], U[n], cfg.margin, cfg.lambda2)
        loss += l
        active += k
        np.add.at(dV, a, ga)
        np.add.at(dU, p, gp)
        np.add.at(dU, n, gn)
    return loss, dU, dV, active


def triplet_rows(triplets: Sequence[Triplet], image_row: Mapping, text_row: Mapping):
    """Translate triplets into row indices for :func:`ranking_loss_rows`."""
    im = ([], [], [])
    tx = ([], [], [])
    try:
        for t in triplets:
            if t.direction == IM_ANCHOR:
                im[0].append(image_row[t.anchor_id])
                im[1].append(text_row[t.positive_id])
                im[2].append(text_row[t.negative_id])
            else:
                tx[0].append(text_row[t.anchor_id])
                tx[1].append(image_row[t.positive_id])
                tx[2].append(image_row[t.negative_id])
    except KeyError as exc:
        raise MissingEmbeddingError(f"no embedding for id {exc.args[0]}") from None
    return im, tx


def ranking_loss(triplets: Sequence[Triplet], image_embeddings: Mapping, text_embeddings: Mapping,
                 cfg: LossConfig | None = None) -> LossResult:
    """Bi-directional margin loss with gradients keyed by item id."""
    cfg = cfg or LossConfig()
    image_ids, text_ids = set(), set()
    for t in triplets:
        if t.direction == IM_ANCHOR:
            image_ids.add(t.anchor_id)
            text_ids.update((t.positive_id, t.negative_id))
        else:
            text_ids.add(t.anchor_id)
            image_ids.update((t.positive_id, t.negative_id))
    image_ids, text_ids = sorted(image_ids), sorted(text_ids)
    try:
        U = np.array([image_embeddings[i] for i in image_ids], dtype=np.float64).reshape(len(image_ids), -1)
        V = np.array([text_embeddings[j] for j in text_ids], dtype=np.float64).reshape(len(text_ids), -1)
    except KeyError as exc:
        raise MissingEmbeddingError(f"no embedding for id {exc.args[0]}") from None
    image_row = {i: r for r, i in enumerate(image_ids)}
    text_row = {j: r for r, j in enumerate(text_ids)}
    im, tx = triplet_rows(triplets, image_row, text_row)
    loss, dU, dV, active = ranking_loss_rows(U, V, im, tx, cfg)
    return LossResult(
        loss,
        {i: dU[r] for i, r in image_row.items()},
        {j: dV[r] for j, r in text_row.items()},
        active,
    )


@dataclass
class ViolationReport:
    count: int
    total: int
    violations: list


def anchored_constraint_check(sims, image_embeddings: Mapping, text_embeddings: Mapping,
                              margin: float) -> ViolationReport:
    """Check every ``d(anchor, pos) + m <= d(anchor, neg)`` constraint in both directions.

    Negatives are every opposite-modality item among ``sims`` with ``s = 0``.
    """
    if isinstance(sims, SimilarityMatrix):
        sims = [sims]
    positives = {(i, j) for s in sims for i, j in s.positives}
    image_ids = sorted(i for s in sims for i in s.image_ids)
    text_ids = sorted(j for s in sims for j in s.text_ids)
    U = np.array([image_embeddings[i] for i in image_ids], dtype=np.float64)
    V = np.array([text_embeddings[j] for j in text_ids], dtype=np.float64)
    D = np.sqrt(np.sum((U[:, None, :] - V[None, :, :]) ** 2, axis=2))
    S = np.zeros(D.shape, dtype=bool)
    irow = {i: r for r, i in enumerate(image_ids)}
    trow = {j: r for r, j in enumerate(text_ids)}
    for i, j in positives:
        S[irow[i], trow[j]] = True
    violations = []
    total = 0
    for i, j in sorted(positives):
        a, p = irow[i], trow[j]
        negs = np.flatnonzero(~S[a])
        total += negs.size
        bad = negs[D[a, p] + margin > D[a, negs]]
        violations += [(IM_ANCHOR, i, j, text_ids[k]) for k in bad]
        negs = np.flatnonzero(~S[:, p])
        total += negs.size
        bad = negs[D[a, p] + margin > D[negs, p]]
        violations += [(TXT_ANCHOR, j, i, image_ids[k]) for k in bad]
    return ViolationReport(len(violations), total, violations)
