"""Command line entry point: ``xmcl <verb> ...``.

Verbs: gen, train, index, query, eval, grid, diagnose. Configuration comes
from ``--config`` (a JSON file of overrides); ``--seed`` wins over the file.
Exit status is 0 only when every requested unit of work succeeded.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import SyntheticSpec, dataset_hash, generate_synthetic, load_dataset, save_dataset
from .engine import RunRecord, TrainConfig, run_sequence
from .errors import XmclError
from .experiment import (
    VARIANTS,
    Cell,
    ExperimentGrid,
    emit_results,
    evaluate,
    harness_config,
    run_experiment,
)
from .index import DIRECTIONS, POLICIES, IndexStore, diagnose_drift, query, query_modality

log = logging.getLogger("xmcl")


def _read_config(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return data


def _emit(rows: list, fmt: str, out=None) -> None:
    out = out or sys.stdout
    if fmt == "json":
        json.dump(rows, out, indent=2, sort_keys=True)
        out.write("\n")
        return
    if not rows:
        return
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


# TrainConfig fields exposed as flags; nested loss/reg settings get their own
_SCALAR_FIELDS = [f for f in dataclasses.fields(TrainConfig) if f.name not in ("loss", "reg", "seed", "dump_dir")]
_NESTED_FLAGS = {"lambda3": ("reg", "lambda3", float), "reg_scope": ("reg", "scope", str),
                 "margin": ("loss", "margin", float)}


def _add_config_flags(sp) -> None:
    for f in _SCALAR_FIELDS:
        kind = {"int": int, "float": float, "bool": _parse_bool}.get(str(f.type), str)
        sp.add_argument("--" + f.name.replace("_", "-"), type=kind, dest=f"cfg_{f.name}", metavar=f.name.upper())
    for name, (_, _, kind) in _NESTED_FLAGS.items():
        sp.add_argument("--" + name.replace("_", "-"), type=kind, dest=f"cfg_{name}", metavar=name.upper())


def _parse_bool(text: str) -> bool:
    if text.lower() not in ("true", "false", "1", "0"):
        raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")
    return text.lower() in ("true", "1")


def _train_config(args, conf: dict) -> TrainConfig:
    base = harness_config().to_dict() if conf.pop("preset", "harness") == "harness" else TrainConfig().to_dict()
    for key in ("loss", "reg"):
        base[key].update(conf.pop(key, {}))
    base.update(conf)
    for f in _SCALAR_FIELDS:
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            base[f.name] = value
    for name, (group, key, _) in _NESTED_FLAGS.items():
        value = getattr(args, f"cfg_{name}", None)
        if value is not None:
            base[group][key] = value
    if args.seed is not None:
        base["seed"] = args.seed
    return TrainConfig.from_dict(base)


def _build_index(record: RunRecord, tasks, policy: str) -> IndexStore:
    """Replay indexing: task t is embedded with the snapshot taken after t."""
    store = IndexStore(record.config.embed_dim, policy)
    if record.config.mode != "continual":
        model = record.snapshots[-1].restore(record.config.keep_prob)
        for task in tasks:
            store.index_task(model, task)
        return store
    for snap, task in zip(record.snapshots, tasks):
        store.index_task(snap.restore(record.config.keep_prob), task)
    return store


def cmd_gen(args) -> int:
    conf = _read_config(args.config)
    if args.seed is not None:
        conf["seed"] = args.seed
    spec = SyntheticSpec(**conf)
    out = save_dataset(generate_synthetic(spec), args.out_dir, {"synthetic": spec.to_dict()})
    print(json.dumps({"out_dir": str(out), "data_hash": dataset_hash(out)}))
    return 0


def cmd_train(args) -> int:
    tasks = load_dataset(args.data)
    cfg = _train_config(args, _read_config(args.config))
    record = run_sequence(tasks, cfg)
    out = record.save(args.out_dir)
    _emit([
        {"phase": k, "tasks": " ".join(map(str, t.task_ids)), "best_epoch": t.best_epoch,
         "final_loss": t.epoch_losses[-1] if t.epoch_losses else float("nan"), "steps": t.steps}
        for k, t in enumerate(record.tasks, start=1)
    ], args.format)
    log.info("run written to %s", out)
    return 0


def cmd_index(args) -> int:
    tasks = load_dataset(args.data)
    record = RunRecord.load(args.run)
    store = _build_index(record, tasks, args.policy)
    path = None
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        path = store.save(Path(args.out_dir) / f"index_{args.policy}.xmix")
    _emit([{"policy": args.policy, "entries": len(store), "tasks": " ".join(map(str, store.task_ids())),
            "path": str(path or "")}], args.format)
    return 0


def cmd_query(args) -> int:
    tasks = load_dataset(args.data)
    record = RunRecord.load(args.run)
    store = IndexStore.load(args.index)
    model = record.snapshots[-1].restore(record.config.keep_prob)
    modality = query_modality(args.direction)
    for task in tasks:
        ids = task.image_ids if modality == "image" else task.text_ids
        if args.query_id in set(ids.tolist()):
            feats = task.images([args.query_id]) if modality == "image" else task.texts([args.query_id])
            break
    else:
        raise KeyError(f"{modality} item {args.query_id} not found in {args.data}")
    res = query(store, model, feats[0], args.direction, args.task, args.k, args.query_id)
    _emit([{"rank": r + 1, "item_id": int(i), "distance": float(d)}
           for r, (i, d) in enumerate(zip(res.ranking, res.distances))], args.format)
    return 0


def cmd_eval(args) -> int:
    tasks = load_dataset(args.data)
    record = RunRecord.load(args.run)
    model = record.snapshots[-1].restore(record.config.keep_prob)
    store = IndexStore.load(args.index) if args.index else _build_index(record, tasks, args.policy)
    for task in tasks:
        store.register_source(task)
    rows = []
    k_values = tuple(args.k)
    for direction in DIRECTIONS:
        res = evaluate(model, store, tasks, direction, k_values)
        order = sorted(res.items(), key=lambda x: (x[0][0], x[0][1] is None, x[0][1] or 0, x[0][2]))
        for (scope, task_id, k), value in order:
            rows.append({"direction": direction, "scope": scope,
                         "task": "total" if task_id is None else task_id, "k": k, "recall": value})
    _emit(rows, args.format)
    return 0


def _grid_from_config(args, conf: dict) -> ExperimentGrid:
    base = _train_config(args, dict(conf.get("train", {})))
    reps = int(conf.get("repetitions", 5))
    kw = {}
    if "k_values" in conf:
        kw["k_values"] = tuple(conf["k_values"])
    cells = conf.get("cells", "full")
    if cells == "full":
        return ExperimentGrid.full_grid(base, reps, **kw)
    parsed = []
    for c in cells:
        if c["variant"] not in VARIANTS:
            raise ValueError(f"unknown variant {c['variant']!r}")
        parsed.append(Cell(c["variant"], c.get("sharing", "no-sharing"),
                           tuple(c.get("policies", ("reindex", "no-reindex")))))
    return ExperimentGrid(base, parsed, repetitions=reps, **kw)


def cmd_grid(args) -> int:
    conf = _read_config(args.config)
    grid = _grid_from_config(args, conf)
    if args.data:
        tasks = load_dataset(args.data)
    else:
        spec = SyntheticSpec(**conf.get("synthetic", {}))
        tasks = generate_synthetic(spec)
    table = run_experiment(grid, tasks, workers=args.workers)
    written = emit_results(table, args.out_dir, formats=tuple(args.format.split(",")))
    for path in written:
        log.info("wrote %s", path)
    for fail in table.failures:
        print(f"cell {fail['cell']} seed {fail['seed']} failed: {fail['error'].splitlines()[0]}", file=sys.stderr)
    return 1 if table.failures else 0


def cmd_diagnose(args) -> int:
    tasks = load_dataset(args.data)
    record = RunRecord.load(args.run)
    store = IndexStore.load(args.index) if args.index else None
    report = diagnose_drift(record.snapshots, tasks[:len(record.snapshots)], store)
    rows = [{"task": t, **vals} for t, vals in report.as_dict().items()]
    _emit(rows, args.format)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmcl", description="Continual cross-modal retrieval toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def add(name, fn, help_text, data=True, run=False, out=False):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="JSON file of overrides")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--format", default="csv", help="csv or json (grid accepts csv,json)")
        if data:
            sp.add_argument("--data", required=name != "grid", help="dataset directory")
        if run:
            sp.add_argument("--run", required=True, help="run directory written by 'train'")
        if out:
            sp.add_argument("--out-dir", required=name != "index")
        return sp

    add("gen", cmd_gen, "generate a synthetic task sequence", data=False, out=True)
    sp = add("train", cmd_train, "train over a dataset", out=True)
    _add_config_flags(sp)
    sp = add("index", cmd_index, "index a dataset with a trained run", run=True, out=True)
    sp.add_argument("--policy", choices=POLICIES, default="no-reindex")
    sp = add("query", cmd_query, "rank database items for one query", run=True)
    sp.add_argument("--index", required=True)
    sp.add_argument("--direction", choices=DIRECTIONS, default="im2txt")
    sp.add_argument("--query-id", type=int, required=True)
    sp.add_argument("--task", type=int, help="restrict to one task (known-task query)")
    sp.add_argument("--k", type=int, default=10)
    sp = add("eval", cmd_eval, "Recall@K per task and scope", run=True)
    sp.add_argument("--index", help="index file; rebuilt from the run when omitted")
    sp.add_argument("--policy", choices=POLICIES, default="no-reindex")
    sp.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    sp = add("grid", cmd_grid, "run an experiment grid and emit result tables", out=True)
    sp.add_argument("--workers", type=int, default=1)
    _add_config_flags(sp)
    sp = add("diagnose", cmd_diagnose, "embedding drift and task overlap", run=True)
    sp.add_argument("--index")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "grid" and args.format == "csv":
        args.format = "csv,json"
    try:
        return args.fn(args)
    except (XmclError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
