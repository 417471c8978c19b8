"""Ranking loss evaluated through the two-branch model, with parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BranchCache, TwoBranchModel
from .triplets import IM_ANCHOR, LossConfig, ranking_loss_rows, triplet_rows


@dataclass
class ForwardPass:
    image_ids: list
    U: np.ndarray
    image_cache: BranchCache
    text_ids: list
    V: np.ndarray
    text_cache: BranchCache

    def image_embeddings(self) -> dict:
        return {i: self.U[r] for r, i in enumerate(self.image_ids)}

    def text_embeddings(self) -> dict:
        return {j: self.V[r] for r, j in enumerate(self.text_ids)}


def forward_items(model: TwoBranchModel, bank, image_ids, text_ids, train=False, rng=None) -> ForwardPass:
    """Embed each listed item exactly once (images first, then texts)."""
    image_ids = list(image_ids)
    text_ids = list(text_ids)
    U, cu = model.forward("image", bank.images(image_ids), train, rng)
    V, cv = model.forward("text", bank.texts(text_ids), train, rng)
    return ForwardPass(image_ids, U, cu, text_ids, V, cv)


def zero_grads(model: TwoBranchModel) -> dict:
    return {k: np.zeros_like(v) for k, v in model.parameters().items()}


def objective_from_forward(model: TwoBranchModel, fp: ForwardPass, triplets, cfg: LossConfig):
    """Return ``(loss, grads, n_active)`` for triplets over an existing forward pass."""
    if not triplets:
        return 0.0, zero_grads(model), 0
    image_row = {i: r for r, i in enumerate(fp.image_ids)}
    text_row = {j: r for r, j in enumerate(fp.text_ids)}
    im, tx = triplet_rows(triplets, image_row, text_row)
    loss, dU, dV, active = ranking_loss_rows(fp.U, fp.V, im, tx, cfg)
    grads = model.backward("image", fp.image_cache, dU)
    model.backward("text", fp.text_cache, dV, grads)
    return loss, grads, active


def triplet_ids(triplets):
    images, texts = set(), set()
    for t in triplets:
        if t.direction == IM_ANCHOR:
            images.add(t.anchor_id)
            texts.update((t.positive_id, t.negative_id))
        else:
            texts.add(t.anchor_id)
            images.update((t.positive_id, t.negative_id))
    return sorted(images), sorted(texts)


def triplet_objective(model: TwoBranchModel, triplets, bank, cfg: LossConfig, train=False, rng=None):
    """Forward the items referenced by ``triplets`` and return ``(loss, grads, n_active)``."""
    if not triplets:
        return 0.0, zero_grads(model), 0
    image_ids, text_ids = triplet_ids(triplets)
    fp = forward_items(model, bank, image_ids, text_ids, train, rng)
    return objective_from_forward(model, fp, triplets, cfg)
