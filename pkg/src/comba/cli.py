"""``comba`` command line: train | eval | verify-theorem | bench | gen-data | hops.

Machine-readable results go to stdout or files; diagnostics go to stderr.
Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .data import (DatasetBundle, SyntheticSpec, generate_synthetic, load_checkpoint,
                   load_dataset, save_checkpoint, save_dataset)
from .errors import CombaError
from .graph import hop_adjacency
from .theorem import verify_inequality
from .training import TrainConfig, bench_scaling, build_model, build_plan, evaluate, train

log = logging.getLogger("comba")


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return obj


def parse_run_config(obj: dict):
    """Split a run config into ``(TrainConfig, dataset source, metric override)``.

    The source is a directory path (``"data"``) or a :class:`SyntheticSpec`
    (``"synthetic"``); exactly one must be present.
    """
    obj = dict(obj)
    data = obj.pop("data", None)
    synthetic = obj.pop("synthetic", None)
    metric = obj.pop("metric", None)
    if (data is None) == (synthetic is None):
        raise UsageError("config needs exactly one of 'data' or 'synthetic'")
    cfg = TrainConfig.from_dict(obj)
    source = data if data is not None else SyntheticSpec.from_dict(synthetic)
    return cfg, source, metric


def _load_source(source, base: Path | None = None) -> DatasetBundle:
    if isinstance(source, SyntheticSpec):
        return generate_synthetic(source)
    path = Path(source)
    if base is not None and not path.is_absolute():
        path = base / path
    return load_dataset(path)


def cmd_train(args):
    cfg, source, metric = parse_run_config(_read_json(args.config))
    if args.seed is not None:
        log.info("seed overridden: %d -> %d", cfg.seed, args.seed)
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    bundle = _load_source(source, Path(args.config).parent)
    metric = metric or bundle.metric
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        def write(rec):
            fh.write(json.dumps(rec.to_json()) + "\n")
        result = train(bundle.graph, bundle.splits, cfg, metric, on_epoch=write)
    save_checkpoint(result.model, out / "checkpoint.json", {
        "train": cfg.to_dict(), "metric": metric,
        "feature_dim": bundle.graph.feature_dim, "num_classes": bundle.graph.num_classes})
    summary = {"dataset": bundle.name, "metric": metric, "best_epoch": result.best_epoch,
               "best_val": result.best_val, "best_test": result.best_test,
               "epochs": len(result.history), "seed": cfg.seed}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_eval(args):
    _, saved = load_checkpoint(args.checkpoint)
    if args.config:
        cfg, _, _ = parse_run_config(_read_json(args.config))
    else:
        cfg = TrainConfig.from_dict(saved.get("train", {}))
    bundle = load_dataset(args.data)
    g = bundle.graph
    model = build_model(g, cfg)
    load_checkpoint(args.checkpoint, model)
    split = getattr(bundle.splits, args.split)
    plan = build_plan(g, cfg)
    value = evaluate(model, g, plan, split, bundle.metric)
    print(json.dumps({"metric": bundle.metric, "split": args.split, "value": value}))
    return 0


def cmd_verify_theorem(args):
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    report = verify_inequality(args.trials, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for t in report.trials:
            fh.write(json.dumps(t.to_json()) + "\n")
        fh.write(json.dumps({"summary": report.summary()}) + "\n")
    print(json.dumps(report.summary()))
    if not report.passed:
        log.error("inequality violated in %d trial(s)",
                  sum(not t.holds for t in report.trials))
        return 1
    return 0


def cmd_bench(args):
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --sizes {args.sizes!r}") from None
    if len(sizes) < 2:
        raise UsageError("--sizes needs at least two entries")
    obj = _read_json(args.config) if args.config else {}
    obj.pop("data", None)
    obj.pop("synthetic", None)
    obj.pop("metric", None)
    cfg = TrainConfig.from_dict(obj)
    result = bench_scaling(sizes, cfg, epochs=args.epochs, seed=args.seed)
    for row in result["rows"]:
        print(json.dumps(row))
    print(json.dumps({"slope": round(result["slope"], 3)}))
    return 0


def cmd_gen_data(args):
    fields = {"kind": args.kind, "seed": args.seed}
    if args.n is not None:
        fields["n"] = args.n
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        fields[key] = json.loads(value)
    try:
        spec = SyntheticSpec.from_dict(fields)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    bundle = generate_synthetic(spec)
    save_dataset(bundle, args.out)
    g = bundle.graph
    print(json.dumps({"name": bundle.name, "nodes": g.n, "edges": g.num_edges,
                      "features": g.feature_dim, "classes": g.num_classes,
                      "metric": bundle.metric}))
    return 0


def cmd_hops(args):
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    g = load_dataset(args.data).graph
    hops = hop_adjacency(g, args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = []
    for k, mat in enumerate(hops.mats, 1):
        coo = mat.tocoo()
        keep = coo.row < coo.col
        pairs = sorted(zip(coo.row[keep].tolist(), coo.col[keep].tolist()))
        with open(out / f"hop_{k}.txt", "w") as fh:
            fh.writelines(f"{u} {v}\n" for u, v in pairs)
        counts.append(len(pairs))
    print(json.dumps({"k": args.k, "pairs": counts}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--config", help="run config to build the model from")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-theorem", help="randomized cross-batch error check")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="theorem_report.jsonl")
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("bench", help="runtime per epoch versus graph size")
    p.add_argument("--sizes", required=True, help="comma-separated nodes+edges targets")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--kind", choices=("er", "sbm", "grid"), default="sbm")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="any other synthetic field, value parsed as JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("hops", help="dump hop-k adjacency as edge lists")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    # seed-override notes are always shown
    log.setLevel(logging.INFO)
    threads = os.environ.get("COMBA_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"comba: error: {exc}", file=sys.stderr)
        return 2
    except CombaError as exc:
        print(f"comba: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
