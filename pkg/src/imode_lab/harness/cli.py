"""``imode-lab`` command line: generate, train, eval, eval-cf, traces, ingest.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..episodes import DatasetSplit, read_episodes
from ..simulators import KINDS, config_from_dict, generate_dataset, generate_pairs, read_pairs, write_pairs
from .ingest import IngestSchema, ingest_to_file
from .training import (
    DESK_COUNTS,
    FULL_COUNTS,
    MODEL_KINDS,
    RunConfig,
    TrainingError,
    export_trace,
    full_scale,
    per_episode_mse,
    per_pair_cf_mse,
    read_checkpoint,
    train,
)


class UsageError(Exception):
    pass


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON ({err})") from err


def _summary(values: np.ndarray) -> dict:
    return {"n": len(values), "mean": float(np.mean(values)), "std": float(np.std(values)), "per_item": values.tolist()}


# ------------------------------------------------------------------ commands


def _sim_config(kind: str, path):
    try:
        return config_from_dict(kind, _load_json(path))
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad simulator config: {err}") from err


def cmd_generate(args) -> int:
    sim_config = _sim_config(args.kind, args.config) if args.config else None
    split = generate_dataset(args.kind, args.n_train, args.n_val, args.n_test, args.seed, sim_config)
    out = Path(args.out)
    paths = split.write(out)
    if args.pairs:
        # pair seeds come from a separate stream so they never repeat dataset episodes
        pairs = generate_pairs(args.kind, args.pairs, args.seed + 1_000_003, sim_config)
        paths["pairs"] = out / "pairs.jsonl"
        write_pairs(paths["pairs"], pairs)
    _emit({"kind": args.kind, "seed": args.seed, "files": {k: str(v) for k, v in paths.items()}})
    return 0


def _run_config(args) -> RunConfig:
    payload = _load_json(args.config) if args.config else {}
    if args.kind:
        payload["generator"] = {"kind": args.kind, "seed": args.data_seed}
        payload.pop("dataset", None)
    gen = payload.get("generator")
    kind = gen.get("kind") if gen else None
    if args.paper_scale:
        payload.update(full_scale(kind))
        if gen:
            payload["generator"] = {**gen, **FULL_COUNTS}
    elif gen:
        payload["generator"] = {**DESK_COUNTS, **gen}
    overrides = {
        "model": args.model,
        "dataset": args.dataset,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "dt": args.dt,
        "folds": args.folds,
        "seed": args.seed,
        "workers": args.workers,
    }
    payload.update({k: v for k, v in overrides.items() if v is not None})
    if args.dataset:
        payload.pop("generator", None)
    try:
        return RunConfig.from_dict(payload)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from err


def cmd_train(args) -> int:
    config = _run_config(args)
    pairs = read_pairs(args.pairs) if args.pairs else None
    metrics, _ = train(config, run_dir=args.out, pairs=pairs)
    _emit({"config": asdict(config), "run_dir": str(args.out), "metrics": metrics.to_dict()})
    return 0


def _episodes(path, split: str):
    path = Path(path)
    if path.is_dir():
        return getattr(DatasetSplit.read(path), split)
    return read_episodes(path)


def _protocol(args, protocol: dict) -> tuple[int, float]:
    k_obs = getattr(args, "k_obs", None)
    k_obs = k_obs if k_obs is not None else protocol.get("k_obs", 10)
    dt = args.dt if args.dt is not None else protocol.get("dt")
    if dt is None:
        raise UsageError("checkpoint records no dt; pass --dt")
    return k_obs, dt


def cmd_eval(args) -> int:
    model, protocol = read_checkpoint(args.checkpoint)
    k_obs, dt = _protocol(args, protocol)
    episodes = _episodes(args.dataset, args.split)
    if episodes and episodes[0].n_x != model.dims.n_x:
        raise UsageError(f"checkpoint expects n_x={model.dims.n_x}, dataset has {episodes[0].n_x}")
    per = per_episode_mse(model, episodes, k_obs, dt)
    _emit({"model": model.kind, "k_obs": k_obs, "dt": dt, "mse": _summary(per)})
    return 0


def cmd_eval_cf(args) -> int:
    model, protocol = read_checkpoint(args.checkpoint)
    _, dt = _protocol(args, protocol)
    pairs = read_pairs(args.pairs)
    per = per_pair_cf_mse(model, pairs, dt)
    _emit({"model": model.kind, "dt": dt, "cf_mse": _summary(per)})
    return 0


def cmd_traces(args) -> int:
    model, protocol = read_checkpoint(args.checkpoint)
    k_obs, dt = _protocol(args, protocol)
    episodes = _episodes(args.dataset, args.split)
    if not 0 <= args.index < len(episodes):
        raise UsageError(f"episode index {args.index} out of range (0..{len(episodes) - 1})")
    trace = export_trace(model, episodes[args.index], args.out, k_obs, dt)
    _emit({"model": model.kind, "out": str(args.out), "points": len(trace.t), "events": trace.event_times})
    return 0


def cmd_ingest(args) -> int:
    try:
        schema = IngestSchema.from_dict(_load_json(args.schema))
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad schema: {err}") from err
    n = ingest_to_file(args.csv, schema, args.out)
    _emit({"episodes": n, "out": str(args.out)})
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imode-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a dataset split as JSON-lines")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=0, help="also write this many counterfactual pairs")
    p.add_argument("--config", help="simulator config JSON")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train with repeated seeded runs and write a run directory")
    p.add_argument("--config", help="run config JSON; flags override it")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--dataset", help="directory with train/val/test.jsonl")
    p.add_argument("--kind", choices=KINDS, help="generate the data in memory instead")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--pairs", help="counterfactual pairs file scored for every fold")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--paper-scale", action="store_true", help="full-size protocol (slow)")
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "rollout MSE of a checkpoint on a dataset"),
        ("traces", cmd_traces, "export the latent-norm trace of one episode as CSV"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True, help="dataset directory or .jsonl file")
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--k-obs", type=int)
        p.add_argument("--dt", type=float)
        if name == "traces":
            p.add_argument("--index", type=int, default=0)
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("eval-cf", help="counterfactual MSE over both branches of each pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--dt", type=float)
    p.set_defaults(func=cmd_eval_cf)

    p = sub.add_parser("ingest", help="convert a CSV time series into JSON-lines episodes")
    p.add_argument("csv")
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"imode-lab: error: {err}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, ValueError, KeyError, FloatingPointError) as err:
        print(f"imode-lab: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
