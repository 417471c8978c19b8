"""Experiment grid: variants x sharing x index policy x direction, repeated over seeds.

Each cell trains once per repetition; ft / EWC / MAS runs feed both a
reindex and a no-reindex store so the two policies see the same trajectory.
Results are kept per repetition and averaged into long-format rows.

Rows carry a scope. Known-task rows are ``task<id>`` and their ``average``;
unknown-task rows are ``task<id>`` (that task's queries against the union
index) and ``total`` (all queries pooled).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import tasks_hash
from .engine import RunRecord, TrainConfig, run_decoupled, run_sequence
from .index import (
    DATABASE_SPLITS,
    DIRECTIONS,
    IndexStore,
    pairwise_distances,
    query_modality,
    rank,
    target_modality,
)
from .regularization import RegConfig
from .tasks import TaskDataset

log = logging.getLogger(__name__)

VARIANTS = ("ft", "EWC", "MAS", "EWC-query", "MAS-query", "joint-ctnp", "joint-no-ctnp")
RESULT_COLUMNS = ("sharing", "policy", "variant", "label", "direction", "scope", "k", "row", "mean", "values",
                  "status")
HISTORY_COLUMNS = ("sharing", "policy", "variant", "direction", "k", "repetition", "trained", "task", "recall")


def harness_config(**overrides) -> TrainConfig:
    """Training preset for the desk-scale synthetic benchmark.

    Smaller layers and a larger step than the full-size defaults so a
    3-task grid with 5 repetitions runs in minutes on one core.
    """
    base = dict(hidden_dim=64, embed_dim=16, learning_rate=3e-3, epochs=60, batch_size=64)
    base.update(overrides)
    return TrainConfig(**base)


def column_label(variant: str, direction: str) -> str:
    """Results-table column name; query-branch variants name the regularized branch."""
    if variant.endswith("-query"):
        return variant.replace("query", "im" if direction == "im2txt" else "txt")
    return variant


@dataclass(frozen=True)
class Cell:
    variant: str
    sharing: str = "no-sharing"
    policies: tuple = ("reindex", "no-reindex")

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def key(self) -> str:
        return f"{self.variant}/{self.sharing}/{'+'.join(self.policies)}"

    @property
    def decoupled(self) -> bool:
        return self.variant.endswith("-query")

    def train_config(self, base: TrainConfig, seed: int) -> TrainConfig:
        if self.variant.startswith("joint"):
            mode = "joint-with-ctnp" if self.variant == "joint-ctnp" else "joint-no-ctnp"
            return base.replace(mode=mode, regularizer="none", sharing=self.sharing, seed=seed)
        reg = {"ft": "none", "EWC": "EWC", "MAS": "MAS", "EWC-query": "EWC", "MAS-query": "MAS"}[self.variant]
        return base.replace(mode="continual", regularizer=reg, sharing=self.sharing, seed=seed,
                            reg=RegConfig(base.reg.lambda3, "both-branches"))


@dataclass
class ExperimentGrid:
    base: TrainConfig
    cells: list
    directions: tuple = DIRECTIONS
    k_values: tuple = (1, 5, 10)
    repetitions: int = 5
    query_split: str = "test"
    database_splits: tuple = DATABASE_SPLITS

    def seed(self, repetition: int) -> int:
        return self.base.seed + repetition

    @classmethod
    def full_grid(cls, base: TrainConfig, repetitions: int = 5, **kw) -> "ExperimentGrid":
        cells = []
        for sharing in ("no-sharing", "share-top"):
            cells += [Cell("joint-ctnp", sharing, ("reindex",)), Cell("joint-no-ctnp", sharing, ("reindex",))]
            cells += [Cell(v, sharing, ("reindex", "no-reindex")) for v in ("ft", "EWC", "MAS")]
            cells += [Cell(v, sharing, ("no-reindex",)) for v in ("EWC-query", "MAS-query")]
        return cls(base, cells, repetitions=repetitions, **kw)


def evaluate(model, store: IndexStore, tasks: Sequence[TaskDataset], direction: str, k_values,
             query_split: str = "test") -> dict:
    """Recall for every task in ``tasks`` under both scopes.

    Returns ``{(scope, task_id, k): r}`` plus ``("unknown", None, k)`` for
    all queries pooled. Known-scope rankings come from the same distance rows
    as the unknown scope, restricted to the query's task, so known recall can
    never fall below unknown recall for the same task.
    """
    qmod, tmod = query_modality(direction), target_modality(direction)
    table = store.records(tmod)
    ids = table["item_id"].astype(np.int64)
    entry_task = table["task_id"].astype(np.int64)
    kmax = max(k_values)
    out = {}
    hits_unknown = {k: 0 for k in k_values}
    n_unknown = 0
    for task in tasks:
        pairs = task.pairs(query_split)
        if qmod == "image":
            qids = [p.image_id for p in pairs]
            targets = [{p.text_id} for p in pairs]
            feats = task.images(qids)
        else:
            qids = [p.text_id for p in pairs]
            targets = [{p.image_id} for p in pairs]
            feats = task.texts(qids)
        if not qids:
            continue
        D = pairwise_distances(model.embed(qmod, feats), table["vector"])
        mask = entry_task == task.task_id
        hits = {(scope, k): 0 for scope in ("known", "unknown") for k in k_values}
        for row, positives in zip(D, targets):
            known, _ = rank(row[mask], ids[mask], kmax)
            unknown, _ = rank(row, ids, kmax)
            for k in k_values:
                hits[("known", k)] += any(int(x) in positives for x in known[:k])
                hits[("unknown", k)] += any(int(x) in positives for x in unknown[:k])
        n_unknown += len(qids)
        for (scope, k), h in hits.items():
            out[(scope, task.task_id, k)] = h / len(qids)
            if scope == "unknown":
                hits_unknown[k] += h
    for k in k_values:
        out[("unknown", None, k)] = hits_unknown[k] / n_unknown if n_unknown else float("nan")
    return out


@dataclass
class CellResult:
    cell: Cell
    repetition: int
    seed: int
    config_hash: str
    final: dict = field(default_factory=dict)  # (policy, direction, scope, row, k) -> recall
    history: list = field(default_factory=list)
    eval_models: dict = field(default_factory=dict)  # direction -> reg scope of the model used
    error: str | None = None


def _rows_from_eval(res: dict, tasks, k_values):
    rows = {}
    for k in k_values:
        known = []
        for t in tasks:
            known.append(res[("known", t.task_id, k)])
            rows[("known", f"task{t.task_id}", k)] = known[-1]
            rows[("unknown", f"task{t.task_id}", k)] = res[("unknown", t.task_id, k)]
        rows[("known", "average", k)] = float(np.mean(known))
        rows[("unknown", "total", k)] = res[("unknown", None, k)]
    return rows


def run_cell(cell: Cell, grid: ExperimentGrid, tasks: Sequence[TaskDataset], repetition: int) -> CellResult:
    seed = grid.seed(repetition)
    cfg = cell.train_config(grid.base, seed)
    result = CellResult(cell, repetition, seed, cfg.config_hash())
    directions = tuple(grid.directions)
    stores = {}

    def make_hook(direction_filter):
        def hook(model, learned, t):
            for (policy, direction), store in stores.items():
                if direction not in direction_filter:
                    continue
                for task in learned:
                    store.index_task(model, task, splits=grid.database_splits)
                seen = [x for x in tasks if x.task_id in set(store.task_ids())]
                res = evaluate(model, store, seen, direction, grid.k_values, grid.query_split)
                for (scope, task_id, k), value in res.items():
                    if scope == "known":
                        result.history.append((policy, direction, k, t, task_id, value))
        return hook

    for direction in directions:
        for policy in cell.policies:
            stores[(policy, direction)] = IndexStore(cfg.embed_dim, policy)

    if cell.decoupled:
        def hook(direction, model, learned, t):
            make_hook((direction,))(model, learned, t)
        dec = run_decoupled(tasks, cfg, hook)
        final_models = {d: dec.for_direction(d) for d in directions}
    else:
        rec = run_sequence(tasks, cfg, make_hook(directions))
        final_models = {d: rec for d in directions}

    for (policy, direction), store in stores.items():
        record: RunRecord = final_models[direction]
        model = record.snapshots[-1].restore(cfg.keep_prob)
        result.eval_models[direction] = record.config.reg.scope
        res = evaluate(model, store, tasks, direction, grid.k_values, grid.query_split)
        for (scope, row, k), value in _rows_from_eval(res, tasks, grid.k_values).items():
            result.final[(policy, direction, scope, row, k)] = value
    return result


def _run_cell_safe(args):
    cell, grid, tasks, repetition = args
    try:
        return run_cell(cell, grid, tasks, repetition)
    except Exception as exc:  # recorded per cell; the grid carries on
        log.error("cell %s rep %d failed: %s", cell.key, repetition, exc)
        res = CellResult(cell, repetition, grid.seed(repetition),
                         cell.train_config(grid.base, grid.seed(repetition)).config_hash())
        res.error = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
        return res


@dataclass
class ResultRow:
    sharing: str
    policy: str
    variant: str
    label: str
    direction: str
    scope: str
    k: int
    row: str
    mean: float
    values: tuple
    status: str = "ok"


def _default_scope(row: str) -> str:
    return "unknown" if row == "total" else "known"


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def failures(self) -> list:
        return self.meta.get("failures", [])

    def find(self, variant, direction, row, k=10, policy=None, sharing="no-sharing", scope=None) -> ResultRow:
        scope = scope or _default_scope(row)
        for r in self.rows:
            if (r.variant, r.direction, r.row, r.k, r.sharing, r.scope) == (
                variant, direction, row, k, sharing, scope
            ) and (policy is None or r.policy == policy):
                return r
        raise KeyError((variant, direction, row, k, policy, sharing, scope))

    def value(self, *args, **kw) -> float:
        return self.find(*args, **kw).mean

    def values(self, *args, **kw) -> tuple:
        return self.find(*args, **kw).values

    def history_values(self, variant, direction, trained, task, k=10, policy="reindex", sharing="no-sharing"):
        """Per-repetition known-task recall of ``task`` measured right after ``trained``."""
        out = {}
        for h in self.history:
            if (h["variant"], h["direction"], h["trained"], h["task"], h["k"], h["policy"], h["sharing"]) == (
                variant, direction, trained, task, k, policy, sharing
            ):
                out[h["repetition"]] = h["recall"]
        return [out[r] for r in sorted(out)]

    def to_json(self) -> str:
        return json.dumps({
            "columns": list(RESULT_COLUMNS),
            "rows": [[getattr(r, c) if c != "values" else list(r.values) for c in RESULT_COLUMNS] for r in self.rows],
            "history": self.history,
            "meta": self.meta,
        }, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ResultTable":
        data = json.loads(text)
        cols = data["columns"]
        rows = []
        for raw in data["rows"]:
            d = dict(zip(cols, raw))
            d["values"] = tuple(d["values"])
            rows.append(ResultRow(**d))
        return cls(rows, data["history"], data["meta"])


def _row_order(row: str):
    if row.startswith("task"):
        return (0, int(row[4:]))
    return (1, 0) if row == "average" else (2, 0)


def run_experiment(grid: ExperimentGrid, tasks: Sequence[TaskDataset], workers: int = 1) -> ResultTable:
    jobs = [(cell, grid, list(tasks), rep) for cell in grid.cells for rep in range(grid.repetitions)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_safe, jobs))
    else:
        results = [_run_cell_safe(job) for job in jobs]

    table = ResultTable()
    table.meta = {
        "data_hash": tasks_hash(tasks),
        "grid_hash": grid_hash(grid),
        "base_config": grid.base.to_dict(),
        "repetitions": grid.repetitions,
        "seeds": [grid.seed(r) for r in range(grid.repetitions)],
        "k_values": list(grid.k_values),
        "query_split": grid.query_split,
        "database_splits": list(grid.database_splits),
        "epoch_selection": "best validation Recall@%d per task" % grid.base.val_k
        if grid.base.select_best_epoch else "last epoch",
        "cells": {},
        "failures": [],
    }
    by_cell: dict = {}
    for res in results:
        by_cell.setdefault(res.cell, []).append(res)
        entry = table.meta["cells"].setdefault(res.cell.key, {"config_hashes": {}, "eval_models": {}})
        entry["config_hashes"][str(res.seed)] = res.config_hash
        entry["eval_models"][str(res.seed)] = res.eval_models
        if res.error:
            table.meta["failures"].append({"cell": res.cell.key, "seed": res.seed, "error": res.error})
        for policy, direction, k, trained, task, value in res.history:
            table.history.append({
                "sharing": res.cell.sharing, "policy": policy, "variant": res.cell.variant,
                "direction": direction, "k": k, "repetition": res.repetition,
                "trained": trained, "task": task, "recall": value,
            })

    for cell in grid.cells:
        reps = sorted(by_cell.get(cell, []), key=lambda r: r.repetition)
        ok = [r for r in reps if r.error is None]
        status = "ok" if len(ok) == len(reps) else f"failed {len(reps) - len(ok)}/{len(reps)}"
        if not ok:
            for policy in cell.policies:
                for direction in grid.directions:
                    table.rows.append(ResultRow(cell.sharing, policy, cell.variant,
                                                column_label(cell.variant, direction), direction, "unknown",
                                                max(grid.k_values), "total", float("nan"), (), status))
            continue
        keys = sorted({key for r in ok for key in r.final},
                      key=lambda x: (x[0], x[1], x[2] != "known", _row_order(x[3]), x[4]))
        for key in keys:
            policy, direction, scope, row, k = key
            vals = tuple(r.final[key] for r in ok)
            table.rows.append(ResultRow(cell.sharing, policy, cell.variant,
                                        column_label(cell.variant, direction), direction, scope, k, row,
                                        float(np.mean(vals)), vals, status))
    return table


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def results_csv(table: ResultTable) -> str:
    return _csv(
        ([r.sharing, r.policy, r.variant, r.label, r.direction, r.scope, r.k, r.row, repr(r.mean),
          " ".join(repr(v) for v in r.values), r.status] for r in table.rows),
        RESULT_COLUMNS,
    )


def summary_csv(table: ResultTable, k: int = 10) -> str:
    """Pivot in percent: known-task rows plus the unknown-task ``total``, one
    column per direction / index policy / variant."""
    shown = [r for r in table.rows if r.k == k and (r.scope == "known" or r.row == "total")]
    cols = sorted({(r.direction, r.policy, r.label) for r in shown},
                  key=lambda c: (DIRECTIONS.index(c[0]), c[1] != "reindex", c[2]))
    grid = {(r.sharing, r.row, r.direction, r.policy, r.label): r.mean for r in shown}
    lines = sorted({(r.sharing, r.row) for r in shown}, key=lambda x: (x[0], _row_order(x[1])))
    header = ["sharing", "row"] + [f"{d}/{p}/{lbl}" for d, p, lbl in cols]
    body = []
    for sharing, row in lines:
        vals = [grid.get((sharing, row) + c) for c in cols]
        body.append([sharing, row] + ["" if v is None else f"{100 * v:.1f}" for v in vals])
    return _csv(body, header)


def history_csv(table: ResultTable) -> str:
    return _csv(([h[c] for c in HISTORY_COLUMNS] for h in table.history), HISTORY_COLUMNS)


def emit_results(table: ResultTable, out_dir, formats=("csv", "json")) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        for name, text in (("results.csv", results_csv(table)), ("summary.csv", summary_csv(table)),
                           ("history.csv", history_csv(table))):
            (out / name).write_text(text)
            written.append(out / name)
    if "json" in formats:
        (out / "results.json").write_text(table.to_json())
        written.append(out / "results.json")
    return written


def grid_hash(grid: ExperimentGrid) -> str:
    blob = json.dumps({
        "base": grid.base.to_dict(),
        "cells": [dataclasses.asdict(c) for c in grid.cells],
        "k": list(grid.k_values),
        "reps": grid.repetitions,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
