"""Quadratic anti-forgetting penalty and its two importance estimators.

The penalty pulls each parameter toward its value after the previous task,
weighted per parameter:

    L_R = sum_k Theta_k (theta_prev_k - theta_k)^2 + sum_k Omega_k (omega_prev_k - omega_k)^2

Theta covers the image branch, Omega the text branch. With a shared top layer
that layer belongs to both branches and collects both terms.

* ``estimate_ewc``: mean over batches of squared ranking-loss gradients.
* ``estimate_mas``: mean absolute gradient of the squared norm of the
  pre-normalization branch output, accumulated over tasks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DimensionError
from .model import ModelSnapshot, TwoBranchModel
from .objective import forward_items, objective_from_forward, triplet_objective, zero_grads
from .triplets import LossConfig, TripletSampler

ESTIMATORS = ("EWC", "MAS")
SCOPES = ("both-branches", "image-only", "text-only")


@dataclass
class ImportanceMap:
    theta: dict
    omega: dict
    estimator: str = "EWC"
    task_index: int = 0

    @classmethod
    def zeros(cls, model: TwoBranchModel, estimator: str = "EWC") -> "ImportanceMap":
        params = model.parameters()
        return cls(
            {n: np.zeros_like(params[n]) for n in model.branch_param_names("image")},
            {n: np.zeros_like(params[n]) for n in model.branch_param_names("text")},
            estimator,
            0,
        )

    def branch(self, branch: str) -> dict:
        return self.theta if branch == "image" else self.omega

    def flat(self, branch: str) -> np.ndarray:
        d = self.branch(branch)
        return np.concatenate([d[n].ravel() for n in d])

    def copy(self) -> "ImportanceMap":
        return ImportanceMap(
            {k: v.copy() for k, v in self.theta.items()},
            {k: v.copy() for k, v in self.omega.items()},
            self.estimator,
            self.task_index,
        )


@dataclass
class RegConfig:
    lambda3: float = 1e6
    scope: str = "both-branches"

    def __post_init__(self):
        if self.lambda3 < 0:
            raise ValueError("lambda3 must be non-negative")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown regularization scope {self.scope!r}")

    def branches(self) -> tuple:
        return {"both-branches": ("image", "text"), "image-only": ("image",), "text-only": ("text",)}[self.scope]


def penalty(model: TwoBranchModel, anchor: ModelSnapshot, imp: ImportanceMap, cfg: RegConfig):
    """Return ``(L_R, grads)``; gradients are keyed by model parameter name."""
    params = model.parameters()
    value = 0.0
    grads = {}
    for branch in cfg.branches():
        weights = imp.branch(branch)
        for name in model.branch_param_names(branch):
            if name not in weights or name not in anchor.params:
                raise DimensionError(f"importance/anchor lacks parameter {name}")
            w, ref, cur = weights[name], anchor.params[name], params[name]
            if not (w.shape == ref.shape == cur.shape):
                raise DimensionError(f"shape mismatch for {name}")
            diff = ref - cur
            value += float(np.sum(w * diff * diff))
            g = -2.0 * w * diff
            grads[name] = grads[name] + g if name in grads else g
    return value, grads


def compose_loss(task_loss: float, task_grads: dict, reg_loss: float, reg_grads: dict, lambda3: float):
    """``L = L_T + lambda3 * L_R`` with superposed gradients."""
    grads = dict(task_grads)
    for name, g in reg_grads.items():
        grads[name] = grads[name] + lambda3 * g if name in grads else lambda3 * g
    return task_loss + lambda3 * reg_loss, grads


def mean_squared_gradients(grad_batches: Iterable[dict]) -> dict:
    total = {}
    n = 0
    for grads in grad_batches:
        n += 1
        for name, g in grads.items():
            total[name] = total[name] + g * g if name in total else g * g
    if n == 0:
        raise ValueError("no gradient batches")
    return {k: v / n for k, v in total.items()}


def estimate_ewc(model: TwoBranchModel, pairs, sampler: TripletSampler, bank, cfg: LossConfig,
                 rng: np.random.Generator, batch_size: int = 64, task_index: int = 0) -> ImportanceMap:
    """Squared triplet-loss gradients averaged over batches of the task's pairs.

    Runs in eval mode (no dropout). Batches follow the order of ``pairs``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("EWC estimation needs at least one positive pair")

    def batches():
        for start in range(0, len(pairs), batch_size):
            batch = pairs[start:start + batch_size]
            if cfg.mining == "hardest-in-batch":
                fp = forward_items(model, bank, sorted({p.image_id for p in batch}),
                                   sorted({p.text_id for p in batch}))
                trip = sampler.sample(batch, cfg, rng, fp.image_embeddings(), fp.text_embeddings())
                yield objective_from_forward(model, fp, trip.triplets, cfg)[1]
            else:
                trip = sampler.sample(batch, cfg, rng)
                yield triplet_objective(model, trip.triplets, bank, cfg)[1]

    sq = mean_squared_gradients(batches())
    base = zero_grads(model)
    sq = {k: sq.get(k, base[k]) for k in base}
    return ImportanceMap(
        {n: sq[n].copy() for n in model.branch_param_names("image")},
        {n: sq[n].copy() for n in model.branch_param_names("text")},
        "EWC",
        task_index,
    )


def mas_increment(model: TwoBranchModel, branch: str, x: np.ndarray) -> dict:
    """Mean over samples of |d ||z(x)||^2 / d param| with z the pre-normalization output."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError(f"MAS estimation needs at least one {branch} sample")
    hidden, top = model.layers[branch]
    pre = x @ hidden.weight.T + hidden.bias
    act = np.maximum(pre, 0.0)
    z = act @ top.weight.T + top.bias
    dz = 2.0 * z
    d_pre = (dz @ top.weight) * (pre > 0.0)
    n = x.shape[0]
    # |outer(a, b)| == outer(|a|, |b|), so per-sample magnitudes reduce to one matmul
    h_name, t_name = (name.rsplit(".", 1)[0] for name in model.branch_param_names(branch)[::2])
    return {
        f"{t_name}.weight": np.abs(dz).T @ np.abs(act) / n,
        f"{t_name}.bias": np.abs(dz).mean(axis=0),
        f"{h_name}.weight": np.abs(d_pre).T @ np.abs(x) / n,
        f"{h_name}.bias": np.abs(d_pre).mean(axis=0),
    }


def estimate_mas(model: TwoBranchModel, images, texts, prev: ImportanceMap | None = None,
                 task_index: int = 0) -> ImportanceMap:
    """Accumulate per-branch MAS importances on top of ``prev``."""
    prev = prev if prev is not None else ImportanceMap.zeros(model, "MAS")
    out = ImportanceMap({}, {}, "MAS", task_index)
    for branch, data in (("image", images), ("text", texts)):
        inc = mas_increment(model, branch, data)
        old = prev.branch(branch)
        target = out.branch(branch)
        for name in model.branch_param_names(branch):
            target[name] = old[name] + inc[name]
    return out
