"""Command-line entry points.

gen-data   generate and store one dataset pool
train      train the single cell described by a config file
eval       inference error of a stored checkpoint on a stored dataset
study      run a study preset (I: training-set size, II: model size,
           III: Jacobian regularization)
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as dt
from . import experiments as ex
from . import models as md
from . import nets, physics
from .integrators import StepperConfig


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="phnn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a dataset pool")
    g.add_argument("--system", required=True, choices=sorted(physics.OSCILLATOR_FACTORIES))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n-train", type=int, default=400, help="train trajectories in the pool")
    g.add_argument("--n-eval", type=int, default=None)
    g.add_argument("--n-infer", type=int, default=None)

    t = sub.add_parser("train", help="train one configuration cell")
    t.add_argument("--config", required=True, help="JSON experiment config with one cell")
    t.add_argument("--out", default="runs", help="output directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset file or a directory holding one")
    e.add_argument("--zero-control", action="store_true",
                   help="roll out with u = 0 instead of the stored inputs")

    s = sub.add_parser("study", help="run a study preset")
    s.add_argument("--preset", required=True, choices=["I", "II", "III"])
    s.add_argument("--full", action="store_true", help="complete grid (long-running)")
    s.add_argument("--out", default=None, help="output directory (default study-<preset>)")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seeds", type=int, default=None, help="number of seeds (0..n-1)")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--master-seed", type=int, default=None)
    s.add_argument("--config", default=None, help="JSON config overriding the preset entirely")

    args = parser.parse_args(argv)
    return {"gen-data": _gen_data, "train": _train, "eval": _eval, "study": _study}[args.command](args)


def _gen_data(args) -> int:
    cfg_kwargs = {}
    if args.n_eval is not None:
        cfg_kwargs["n_eval"] = args.n_eval
    if args.n_infer is not None:
        cfg_kwargs["n_infer"] = args.n_infer
    cfg = dt.DataConfig(**cfg_kwargs)
    spec = physics.OSCILLATOR_FACTORIES[args.system]()
    bundle = dt.build_bundle(spec, cfg, args.n_train, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"dataset-{args.system}-seed{args.seed}.csv"
    dt.save_dataset(bundle, path)
    print(f"wrote {path} ({len(bundle.train)} train / {len(bundle.eval)} eval / "
          f"{len(bundle.infer)} inference trajectories)")
    return 0


def _train(args) -> int:
    cfg = ex.ExperimentConfig.from_json(Path(args.config).read_text())
    cells = [
        (system, label, size, n, reg, seed)
        for system in cfg.systems for label in cfg.models for size in cfg.sizes
        for n in cfg.n_train for reg in cfg.regularizers for seed in cfg.seeds
    ]
    if len(cells) != 1:
        print(f"config describes {len(cells)} cells; use 'phnn study' for grids", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    system = cells[0][0]
    ds_path = ex.ensure_dataset(cfg, system, out)
    row = ex.run_cell(cfg, *cells[0], ds_path, out)
    print(f"trained {row.model} on {row.system}: l_traj = {row.l_traj:.6g} "
          f"({row.n_failed_rollouts} failed rollouts)")
    return 0


def _resolve_dataset(path_arg) -> Path:
    p = Path(path_arg)
    if p.is_dir():
        candidates = sorted(p.glob("dataset-*.csv"))
        if len(candidates) != 1:
            raise SystemExit(f"{p}: expected exactly one dataset-*.csv, found {len(candidates)}")
        return candidates[0]
    return p


def _eval(args) -> int:
    params, meta = nets.load_params(args.checkpoint)
    spec = physics.OSCILLATOR_FACTORIES[meta["system"]]()
    kind = meta["kind"]
    model = md.DynamicsModel(kind, meta["size"], params, md.head_specs(kind, meta["size"]),
                             spec.S.copy() if kind == md.PHNN_S
                             else spec.J.copy() if kind == md.PHNN_JR else None,
                             meta["system"])
    stepper = StepperConfig(meta["scheme"], meta["h"], meta["dg_tol"], meta["dg_max_iters"])
    bundle = dt.load_dataset(_resolve_dataset(args.data))
    l_traj, n_failed = ex.inference_error(model, bundle.infer, stepper,
                                          bundle.config.stride, args.zero_control)
    print(json.dumps({"l_traj": l_traj, "n_failed_rollouts": n_failed,
                      "n_trajectories": len(bundle.infer)}))
    return 0


def _study(args) -> int:
    if args.config:
        cfg = ex.ExperimentConfig.from_json(Path(args.config).read_text())
    else:
        overrides = {}
        if args.steps is not None:
            overrides["steps"] = args.steps
        if args.seeds is not None:
            overrides["seeds"] = tuple(range(args.seeds))
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.master_seed is not None:
            overrides["master_seed"] = args.master_seed
        cfg = ex.study_preset(args.preset, full=args.full, **overrides)
    out = args.out or f"study-{args.preset}"
    paths = ex.run_study(cfg, out)
    print(f"study {args.preset} done: {paths['results']}")
    for g in _read_summary(paths["summary"]):
        print("  " + g)
    return 0


def _read_summary(path) -> list[str]:
    lines = Path(path).read_text().strip().splitlines()
    return lines[1:]


if __name__ == "__main__":
    sys.exit(main())
