"""Command-line interface: ``srlab <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Each subcommand takes
``--config FILE`` (JSON object of flag defaults; explicit flags win), ``--seed``
and ``--json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import gamma_control as gc
from .dual_model import DualModel
from .errors import SrlabError
from .io import read_matrix, sidecar_path, write_plan
from .ot_core import (
    SolverConfig,
    bilevel_baseline,
    imbalanced_scores,
    semi_relaxed_ot,
    sinkhorn_balanced,
    srot_objective,
)
from .pipeline import (
    UNKNOWN,
    TrainConfig,
    estimate_novel_count,
    evaluate_model,
    generate_synthetic,
    read_dataset,
    train,
    write_dataset,
)


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------- subcommands


def cmd_solve_ot(args) -> dict:
    p = read_matrix(args.input)
    cfg = SolverConfig(epsilon=args.epsilon, gamma=args.gamma, tol=args.tol, max_iter=args.max_iter)
    if args.mode == "balanced":
        plan = sinkhorn_balanced(p, cfg)
    elif args.mode == "semi-relaxed":
        plan = semi_relaxed_ot(p, cfg)
    else:
        plan = bilevel_baseline(p, cfg, w_step=args.w_step, outer_iters=args.outer_iters)
    write_plan(plan, args.out)
    return {
        "out": str(args.out),
        "sidecar": str(sidecar_path(args.out)),
        "objective": srot_objective(plan, p, args.gamma, args.epsilon),
        **plan.sidecar(),
    }


def cmd_gen_data(args) -> dict:
    ratios = args.ratios if args.ratios else [1.0 / args.classes] * args.classes
    if len(ratios) != args.classes:
        raise UsageError(f"--classes {args.classes} but {len(ratios)} ratios given")
    scenes = generate_synthetic(
        ratios, n_known=args.known, n_scenes=args.scenes, points_per_scene=args.points, seed=args.seed
    )
    write_dataset(scenes, args.out)
    return {"out": str(args.out), "scenes": len(scenes), "points_per_scene": args.points}


TRAIN_FLAGS = {
    "n_known": int, "n_novel": int, "epochs": int, "batch_size": int, "lr": float, "lr_min": float,
    "weight_decay": float, "alpha": float, "beta": float, "epsilon": float, "solver_tol": float,
    "solver_max_iter": int, "gamma_mode": str, "gamma0": float, "gamma_min": float, "lam": float,
    "rho": float, "T": int, "dbscan_eps": float, "dbscan_min_samples": int, "tau": float,
    "input_scale": float,
}


def _train_config(args) -> TrainConfig:
    values = {name: getattr(args, name) for name in TRAIN_FLAGS if getattr(args, name) is not None}
    values["region_level"] = not args.no_region
    values["seed"] = args.seed
    if args.widths is not None:
        values["widths"] = args.widths
    missing = [k for k in ("n_known", "n_novel") if k not in values]
    if missing:
        raise UsageError("missing required flags: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> dict:
    cfg = _train_config(args)
    dataset = read_dataset(args.data)
    model, history = train(dataset, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    history.to_csv(out / "history.csv")
    summary = history.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "config.json").write_text(cfg.to_json())
    return {"out_dir": str(out), **summary}


def cmd_estimate_k(args) -> dict:
    dataset = read_dataset(args.data)
    model = DualModel.load(args.checkpoint)
    with torch.no_grad():
        feats = torch.cat([model.encode(s.points) for s in dataset]).double().numpy()
    labels = np.concatenate([np.where(s.known_mask, s.labels, UNKNOWN) for s in dataset])
    k = estimate_novel_count(feats, labels, args.max_classes, seed=args.seed)
    return {"novel_count": int(k)}


def cmd_eval(args) -> dict:
    dataset = read_dataset(args.data)
    model = DualModel.load(args.checkpoint)
    report = evaluate_model(model, dataset)
    Path(args.out).write_text(report.to_json())
    return {"out": str(args.out), "novel_mean": report.novel_mean, "known_mean": report.known_mean,
            "all_mean": report.all_mean, "table": report.table()}


def cmd_bench_ot(args) -> dict:
    p = imbalanced_scores(args.M, args.N, args.seed)
    cfg = SolverConfig(epsilon=args.epsilon, gamma=args.gamma, tol=args.tol)
    rows = []
    start = time.perf_counter()
    plan = semi_relaxed_ot(p, cfg)
    rows.append(("semi-relaxed", time.perf_counter() - start, srot_objective(plan, p, args.gamma, args.epsilon)))
    target = rows[0][2]
    start = time.perf_counter()
    plan = bilevel_baseline(p, cfg, w_step=args.w_step, outer_iters=args.outer_iters,
                            target_objective=target, objective_tol=args.objective_tol)
    rows.append(("bilevel", time.perf_counter() - start, srot_objective(plan, p, args.gamma, args.epsilon)))
    with Path(args.out).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "M", "N", "wall_clock", "objective"])
        for mode, wall, obj in rows:
            writer.writerow([mode, args.M, args.N, f"{wall:.6f}", repr(obj)])
    return {"out": str(args.out), "rows": [dict(mode=m, wall_clock=w, objective=o) for m, w, o in rows]}


def _read_kl_file(path) -> list[float]:
    values = []
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                values.append(float(row[-1]))
            except ValueError:
                if values:  # only a leading header line may be non-numeric
                    raise
    return values


def cmd_schedule_sim(args) -> dict:
    kls = _read_kl_file(args.kl_file)
    state = gc.GammaState(gamma=args.gamma0, lam=args.lam, rho=args.rho, T=args.T)
    state, gammas = gc.replay(state, kls)
    if args.out:
        with Path(args.out).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "gamma"])
            for i, g in enumerate(gammas, start=1):
                writer.writerow([i, repr(g)])
    return {"observations": len(kls), "final_gamma": state.gamma, "decays": len(state.history)}


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, seed_default: int = 0) -> None:
    p.add_argument("--config", type=Path, help="JSON file of flag defaults (flags given explicitly win)")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--json", action="store_true", help="print machine-readable JSON on stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srlab", description="Semi-relaxed OT self-labelling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-ot", help="solve an OT problem on a probability matrix")
    _common(p)
    p.add_argument("--mode", choices=["balanced", "semi-relaxed", "bilevel"], default="semi-relaxed")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--w-step", type=float, default=0.01)
    p.add_argument("--outer-iters", type=int, default=100)
    p.set_defaults(func=cmd_solve_ot)

    p = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--ratios", type=_floats)
    p.add_argument("--known", type=int, default=0, help="classes 0..known-1 are labelled")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--points", type=int, default=2000, help="points per scene")
    p.add_argument("--out", type=Path, default=Path("dataset.jsonl"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a JSONL dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, default=Path("run"))
    for name, typ in TRAIN_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        if name == "gamma_mode":
            p.add_argument(flag, choices=["adaptive", "fixed", "step", "cosine"])
        else:
            p.add_argument(flag, type=typ)
    p.add_argument("--widths", type=_ints)
    p.add_argument("--no-region", action="store_true", help="disable the region-level branch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate-k", help="estimate the number of novel classes")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--max-classes", type=int, required=True)
    p.set_defaults(func=cmd_estimate_k)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics report")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("report.json"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-ot", help="time the scaling solver against the bilevel baseline")
    _common(p)
    p.add_argument("--M", type=int, default=10_000)
    p.add_argument("--N", type=int, default=10)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--w-step", type=float, default=0.01)
    p.add_argument("--outer-iters", type=int, default=2000)
    p.add_argument("--objective-tol", type=float, default=1e-3)
    p.add_argument("--out", type=Path, default=Path("bench.csv"))
    p.set_defaults(func=cmd_bench_ot)

    p = sub.add_parser("schedule-sim", help="replay the adaptive gamma rule over a KL trace")
    _common(p)
    p.add_argument("--kl-file", type=Path, required=True, help="one KL value per line (last CSV column)")
    p.add_argument("--gamma0", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=0.005)
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_schedule_sim)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    sub = _subparser(parser, args.command)
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if isinstance(overrides.get("widths"), list):
        overrides["widths"] = tuple(overrides["widths"])
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def _resolved(args) -> dict:
    skip = {"func", "json", "config"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"srlab: error: {exc}", file=sys.stderr)
        return 2

    threads = os.environ.get("SRLAB_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"srlab: error: SRLAB_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 2

    config = _resolved(args)
    if not args.json:
        print(f"config: {json.dumps(config, sort_keys=True, default=str)}")
        print(f"seed: {args.seed}")
    np.random.seed(args.seed)
    torch.manual_seed(args.seed)
    try:
        result = args.func(args)
    except UsageError as exc:
        print(f"srlab: error: {exc}", file=sys.stderr)
        return 2
    except (SrlabError, OSError, ValueError, KeyError) as exc:
        print(f"srlab: {args.command} failed: {exc}", file=sys.stderr)
        return 1

    if args.json:
        print(json.dumps({"command": args.command, "config": config, "seed": args.seed, "result": result},
                         default=str))
    else:
        table = result.pop("table", None)
        for key, value in result.items():
            if key != "epoch_metrics":
                print(f"{key}: {value}")
        if table:
            print(table)
    return 0


if __name__ == "__main__":
    sys.exit(main())
