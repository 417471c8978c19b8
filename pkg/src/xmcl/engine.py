"""Training over a task sequence: joint baselines and continual fine-tuning with
optional EWC / MAS regularization.

Random streams are derived from ``(seed, stream, phase)`` so that model
initialisation, per-task training and importance estimation never share
draws; a regularizer with ``lambda3 = 0`` therefore reproduces plain
fine-tuning bit for bit.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import persist
from .errors import DimensionError, NumericError, StateError, TrainingDivergedError
from .index import pairwise_distances, rank
from .model import BranchConfig, TwoBranchModel
from .nn import AdamState, adam_step
from .objective import forward_items, objective_from_forward, triplet_objective
from .regularization import (
    ImportanceMap,
    RegConfig,
    compose_loss,
    estimate_ewc,
    estimate_mas,
    penalty,
)
from .tasks import FeatureBank, TaskDataset
from .triplets import LossConfig, TripletSampler

log = logging.getLogger(__name__)

MODES = ("joint-with-ctnp", "joint-no-ctnp", "continual")
REGULARIZERS = ("none", "EWC", "MAS")

_STREAM_INIT, _STREAM_TRAIN, _STREAM_IMPORTANCE = 0, 1, 2


@dataclass
class TrainConfig:
    mode: str = "continual"
    regularizer: str = "none"
    sharing: str = "no-sharing"
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 1e-4
    hidden_dim: int = 2048
    embed_dim: int = 64
    keep_prob: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    # most-recent anchor; True sums EWC importances over tasks instead
    ewc_accumulate: bool = False
    select_best_epoch: bool = True
    val_k: int = 10
    dump_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.reg, dict):
            self.reg = RegConfig(**self.reg)
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def pair_policy(self) -> str:
        return "ITNP+CTNP" if self.mode == "joint-with-ctnp" else "ITNP-only"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        blob = json.dumps({k: v for k, v in self.to_dict().items() if k != "dump_dir"}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TaskRecord:
    task_ids: list
    phase: int
    epoch_losses: list = field(default_factory=list)
    val_recalls: list = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0
    ctnp_sampled: int = 0
    skipped_pairs: int = 0


@dataclass
class RunRecord:
    config: TrainConfig
    snapshots: list = field(default_factory=list)
    importances: list = field(default_factory=list)
    tasks: list = field(default_factory=list)
    wall_clock: float = 0.0
    label: str = ""

    @property
    def ctnp_sampled(self) -> int:
        return sum(t.ctnp_sampled for t in self.tasks)

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, (snap, imp) in enumerate(zip(self.snapshots, self.importances), start=1):
            persist.save(out / f"snapshot_{k:02d}.xmcl", snap, imp)
        meta = {
            "label": self.label,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "tasks": [dataclasses.asdict(t) for t in self.tasks],
            "wall_clock": self.wall_clock,
        }
        (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, out_dir) -> "RunRecord":
        out = Path(out_dir)
        meta = json.loads((out / "run.json").read_text())
        rec = cls(TrainConfig.from_dict(meta["config"]), label=meta.get("label", ""),
                  wall_clock=meta["wall_clock"])
        rec.tasks = [TaskRecord(**t) for t in meta["tasks"]]
        for path in sorted(out.glob("snapshot_*.xmcl")):
            snap, imp = persist.load(path)
            rec.snapshots.append(snap)
            rec.importances.append(imp)
        return rec


def build_model(cfg: TrainConfig, tasks: Sequence[TaskDataset]) -> TwoBranchModel:
    first = tasks[0]
    for t in tasks:
        if (t.image_dim, t.text_dim) != (first.image_dim, first.text_dim):
            raise DimensionError(f"task {t.task_id} feature dims differ from task {first.task_id}")
    return TwoBranchModel(
        BranchConfig(first.image_dim, cfg.hidden_dim, cfg.embed_dim),
        BranchConfig(first.text_dim, cfg.hidden_dim, cfg.embed_dim),
        sharing=cfg.sharing,
        keep_prob=cfg.keep_prob,
        seed=np.random.default_rng([cfg.seed, _STREAM_INIT]),
    )


def validation_recall(model: TwoBranchModel, tasks: Sequence[TaskDataset], k: int = 10) -> float:
    """Known-task Recall@k of val queries against each task's train+val items,
    averaged over tasks and both directions."""
    scores = []
    for task in tasks:
        val_pairs = task.pairs("val")
        if not val_pairs:
            continue
        img_db = np.sort(task.image_ids_in(("train", "val")))
        txt_db = np.sort(task.text_ids_in(("train", "val")))
        U = model.embed("image", task.images(img_db))
        V = model.embed("text", task.texts(txt_db))
        irow = {int(i): r for r, i in enumerate(img_db)}
        trow = {int(j): r for r, j in enumerate(txt_db)}
        for queries, db, db_ids, target_of in (
            (U, V, txt_db, lambda p: (irow[p.image_id], p.text_id)),
            (V, U, img_db, lambda p: (trow[p.text_id], p.image_id)),
        ):
            hits = 0
            for p in val_pairs:
                row, target = target_of(p)
                ranked, _ = rank(pairwise_distances(queries[row], db)[0], db_ids, k)
                hits += target in ranked
            scores.append(hits / len(val_pairs))
    return float(np.mean(scores)) if scores else 0.0


def _dump_batch(cfg: TrainConfig, phase: int, epoch: int, batch) -> str | None:
    if cfg.dump_dir is None:
        return None
    path = Path(cfg.dump_dir) / f"nan_phase{phase}_epoch{epoch}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([dataclasses.asdict(p) for p in batch]))
    return str(path)


def _diverged(cfg, phase, epoch, batch, reason):
    dump = _dump_batch(cfg, phase, epoch, batch)
    raise TrainingDivergedError(f"{reason} in phase {phase}, epoch {epoch}",
                                [(p.image_id, p.text_id) for p in batch], dump)


def _train_phase(model: TwoBranchModel, tasks: Sequence[TaskDataset], prev, cfg: TrainConfig,
                 phase: int) -> TaskRecord:
    record = TaskRecord([t.task_id for t in tasks], phase)
    sampler = TripletSampler([t.sim("train") for t in tasks], cfg.pair_policy)
    bank = FeatureBank(tasks)
    pairs = [p for t in tasks for p in t.pairs("train")]
    rng = np.random.default_rng([cfg.seed, _STREAM_TRAIN, phase])
    adam = AdamState(cfg.learning_rate)
    params = model.parameters()
    use_penalty = prev is not None and cfg.regularizer != "none" and cfg.reg.lambda3 > 0
    if use_penalty:
        anchor, importance = prev
    hardest = cfg.loss.mining == "hardest-in-batch"
    best_score, best_snap = -np.inf, None

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            if hardest:
                fp = forward_items(model, bank, sorted({p.image_id for p in batch}),
                                   sorted({p.text_id for p in batch}), train=True, rng=rng)
                trip = sampler.sample(batch, cfg.loss, rng, fp.image_embeddings(), fp.text_embeddings())
                loss, grads, _ = objective_from_forward(model, fp, trip.triplets, cfg.loss)
            else:
                trip = sampler.sample(batch, cfg.loss, rng)
                loss, grads, _ = triplet_objective(model, trip.triplets, bank, cfg.loss, train=True, rng=rng)
            record.ctnp_sampled += trip.ctnp_count
            record.skipped_pairs += trip.skipped
            if not np.isfinite(loss):
                _diverged(cfg, phase, epoch, batch, "non-finite loss")
            losses.append(loss)
            if use_penalty:
                reg_value, reg_grads = penalty(model, anchor, importance, cfg.reg)
                _, grads = compose_loss(loss, grads, reg_value, reg_grads, cfg.reg.lambda3)
            try:
                adam_step(params, grads, adam)
            except NumericError as exc:
                _diverged(cfg, phase, epoch, batch, str(exc))
            record.steps += 1
        record.epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
        if cfg.select_best_epoch:
            score = validation_recall(model, tasks, cfg.val_k)
            record.val_recalls.append(score)
            # ties go to the later epoch
            if score >= best_score:
                best_score, best_snap, record.best_epoch = score, model.snapshot(), epoch
    if cfg.select_best_epoch and best_snap is not None:
        model.load_snapshot(best_snap)
    elif cfg.epochs:
        record.best_epoch = cfg.epochs - 1
    return record


def train_task(model: TwoBranchModel, task: TaskDataset, prev=None, cfg: TrainConfig | None = None,
               task_index: int = 1) -> tuple:
    """Fine-tune ``model`` in place on one task; returns ``(model, TaskRecord)``.

    ``prev`` is ``(anchor_snapshot, importance_map)`` from the previous task,
    or None for the first task / unregularized runs.
    """
    cfg = cfg or TrainConfig()
    _check_dims(model, [task])
    return model, _train_phase(model, [task], prev, cfg, task_index)


def _check_dims(model, tasks):
    for t in tasks:
        if t.image_dim != model.image_config.input_dim or t.text_dim != model.text_config.input_dim:
            raise DimensionError(f"task {t.task_id} feature dims do not match the model")


def estimate_importance(model: TwoBranchModel, task: TaskDataset, prev: ImportanceMap | None,
                        cfg: TrainConfig, task_index: int) -> ImportanceMap | None:
    if cfg.regularizer == "none":
        return None
    if cfg.regularizer == "MAS":
        return estimate_mas(model, task.images(task.image_ids_in("train")),
                            task.texts(task.text_ids_in("train")), prev, task_index)
    rng = np.random.default_rng([cfg.seed, _STREAM_IMPORTANCE, task_index])
    sampler = TripletSampler([task.sim("train")], "ITNP-only")
    imp = estimate_ewc(model, task.pairs("train"), sampler, FeatureBank([task]), cfg.loss, rng,
                       cfg.batch_size, task_index)
    if cfg.ewc_accumulate and prev is not None:
        for branch in ("image", "text"):
            for name, arr in imp.branch(branch).items():
                arr += prev.branch(branch)[name]
    return imp


TaskHook = Callable[[TwoBranchModel, list, int], None]


def run_sequence(tasks: Sequence[TaskDataset], cfg: TrainConfig, on_task_end: TaskHook | None = None,
                 model: TwoBranchModel | None = None) -> RunRecord:
    """Train over ``tasks`` according to ``cfg.mode``.

    Continual mode learns tasks in order and calls ``on_task_end(model,
    [task], t)`` after each; joint modes train one phase over every task and
    call the hook once with the whole list.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("need at least one task")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids: {ids}")
    model = model or build_model(cfg, tasks)
    _check_dims(model, tasks)
    record = RunRecord(cfg)
    started = time.perf_counter()

    if cfg.mode == "continual":
        prev = None
        for t, task in enumerate(tasks, start=1):
            _, task_rec = train_task(model, task, prev, cfg, t)
            if task_rec.ctnp_sampled:
                raise StateError(f"continual run sampled {task_rec.ctnp_sampled} cross-task negatives")
            snap = model.snapshot(t)
            imp = estimate_importance(model, task, record.importances[-1] if record.importances else None, cfg, t)
            record.tasks.append(task_rec)
            record.snapshots.append(snap)
            record.importances.append(imp)
            prev = (snap, imp) if imp is not None else None
            if on_task_end is not None:
                on_task_end(model, [task], t)
    else:
        task_rec = _train_phase(model, tasks, None, cfg, 1)
        record.tasks.append(task_rec)
        record.snapshots.append(model.snapshot(len(tasks)))
        record.importances.append(None)
        if on_task_end is not None:
            on_task_end(model, tasks, len(tasks))
    record.wall_clock = time.perf_counter() - started
    return record


@dataclass
class DecoupledRecord:
    im2txt: RunRecord
    txt2im: RunRecord

    def for_direction(self, direction: str) -> RunRecord:
        return self.im2txt if direction == "im2txt" else self.txt2im


def run_decoupled(tasks: Sequence[TaskDataset], cfg: TrainConfig, on_task_end=None) -> DecoupledRecord:
    """One model per retrieval direction, each regularizing only its query branch.

    ``on_task_end`` receives ``(direction, model, tasks, t)``.
    """
    out = {}
    for direction, scope in (("im2txt", "image-only"), ("txt2im", "text-only")):
        sub = cfg.replace(reg=RegConfig(cfg.reg.lambda3, scope))
        hook = None if on_task_end is None else functools.partial(on_task_end, direction)
        rec = run_sequence(tasks, sub, hook)
        rec.label = direction
        out[direction] = rec
    return DecoupledRecord(out["im2txt"], out["txt2im"])

