"""Task datasets: features, ids, positive pairs and split membership."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError
from .triplets import PositivePair, SimilarityMatrix

SPLITS = ("train", "val", "test")


def _as_splits(splits) -> tuple:
    if isinstance(splits, str):
        splits = (splits,)
    for s in splits:
        if s not in SPLITS:
            raise ValueError(f"unknown split {s!r}")
    return tuple(splits)


@dataclass
class TaskDataset:
    task_id: int
    image_ids: np.ndarray
    image_features: np.ndarray
    text_ids: np.ndarray
    text_features: np.ndarray
    positives: list
    image_split: np.ndarray
    text_split: np.ndarray
    name: str = ""
    _image_row: dict = field(init=False, repr=False)
    _text_row: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.task_id = int(self.task_id)
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        self.text_ids = np.asarray(self.text_ids, dtype=np.int64)
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        self.text_features = np.asarray(self.text_features, dtype=np.float64)
        self.image_split = np.asarray(self.image_split, dtype=object)
        self.text_split = np.asarray(self.text_split, dtype=object)
        self.positives = sorted((int(i), int(j)) for i, j in self.positives)
        for label, ids, feats, split in (
            ("image", self.image_ids, self.image_features, self.image_split),
            ("text", self.text_ids, self.text_features, self.text_split),
        ):
            if feats.ndim != 2 or feats.shape[0] != ids.shape[0] or split.shape != ids.shape:
                raise DimensionError(f"task {self.task_id}: {label} ids/features/splits disagree in length")
            if not np.all(np.isfinite(feats)):
                raise ValueError(f"task {self.task_id}: non-finite {label} features")
            _as_splits(sorted(set(split.tolist())))
        self._image_row = {int(i): r for r, i in enumerate(self.image_ids)}
        self._text_row = {int(j): r for r, j in enumerate(self.text_ids)}
        if len(self._image_row) != len(self.image_ids) or len(self._text_row) != len(self.text_ids):
            raise ValueError(f"task {self.task_id}: duplicate item ids")
        for i, j in self.positives:
            if i not in self._image_row or j not in self._text_row:
                raise ValueError(f"task {self.task_id}: positive ({i}, {j}) references unknown id")
            if self.image_split[self._image_row[i]] != self.text_split[self._text_row[j]]:
                raise ValueError(f"task {self.task_id}: positive ({i}, {j}) straddles splits")

    @property
    def image_dim(self) -> int:
        return self.image_features.shape[1]

    @property
    def text_dim(self) -> int:
        return self.text_features.shape[1]

    def image_ids_in(self, splits=SPLITS) -> np.ndarray:
        return self.image_ids[np.isin(self.image_split, _as_splits(splits))]

    def text_ids_in(self, splits=SPLITS) -> np.ndarray:
        return self.text_ids[np.isin(self.text_split, _as_splits(splits))]

    def images(self, ids) -> np.ndarray:
        return self.image_features[[self._image_row[int(i)] for i in ids]]

    def texts(self, ids) -> np.ndarray:
        return self.text_features[[self._text_row[int(j)] for j in ids]]

    def pairs(self, splits=SPLITS) -> list:
        keep = set(_as_splits(splits))
        return [
            PositivePair(self.task_id, i, j)
            for i, j in self.positives
            if self.image_split[self._image_row[i]] in keep
        ]

    def sim(self, splits=SPLITS) -> SimilarityMatrix:
        pairs = self.pairs(splits)
        return SimilarityMatrix(
            self.task_id,
            sorted({p.image_id for p in pairs}),
            sorted({p.text_id for p in pairs}),
            [(p.image_id, p.text_id) for p in pairs],
        )


class FeatureBank:
    """Feature lookup by item id across several tasks."""

    def __init__(self, tasks: Iterable[TaskDataset]):
        self._image = {}
        self._text = {}
        for task in tasks:
            for r, i in enumerate(task.image_ids):
                if int(i) in self._image:
                    raise ValueError(f"image id {int(i)} appears in more than one task")
                self._image[int(i)] = (task, r)
            for r, j in enumerate(task.text_ids):
                if int(j) in self._text:
                    raise ValueError(f"text id {int(j)} appears in more than one task")
                self._text[int(j)] = (task, r)

    def images(self, ids: Sequence[int]) -> np.ndarray:
        return np.stack([t.image_features[r] for t, r in (self._image[int(i)] for i in ids)])

    def texts(self, ids: Sequence[int]) -> np.ndarray:
        return np.stack([t.text_features[r] for t, r in (self._text[int(j)] for j in ids)])
