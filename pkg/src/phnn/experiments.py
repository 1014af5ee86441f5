"""Study driver: trains the configured model grid, measures the autoregressive
inference error, and aggregates medians and interquartile ranges per cell.

A study is the cartesian product (system, model combo, size, training-set
size, regularizer, seed).  Cells run in a process pool; every cell derives
its own seeds from the master seed and the cell coordinates, so reruns with
the same configuration produce byte-identical result files regardless of
scheduling.  Outputs per study directory:

* ``dataset-<system>-seed<S>.csv``: the generated pool (shared by all cells),
* ``results.csv``: one row per trained cell,
* ``summary.csv``: median and IQR (75th - 25th percentile, linear
  interpolation between closest ranks) per cell group,
* ``metrics-<tag>.csv`` and ``checkpoint-<tag>.bin`` per cell,
* ``errors.csv``: cells that failed outright.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as dt
from . import models as md
from . import nets, physics, training
from .integrators import DGConvergenceError, StepperConfig
from .autodiff import NumericFailure

__all__ = [
    "MODEL_COMBOS",
    "REG_LABELS",
    "ExperimentConfig",
    "ResultRow",
    "inference_error",
    "aggregate",
    "run_study",
    "study_preset",
]

MODEL_COMBOS = {
    "NODE-RK2": (md.NODE, "rk2"),
    "PHNN-S-RK2": (md.PHNN_S, "rk2"),
    "PHNN-S-DG": (md.PHNN_S, "dg"),
    "PHNN-JR-RK2": (md.PHNN_JR, "rk2"),
    "PHNN-JR-DG": (md.PHNN_JR, "dg"),
}

REG_LABELS = {"BL": "none", "CN": "cn", "SN": "sn", "SR": "sr"}

SYSTEMS = ("harmonic", "duffing", "selfsustained")
SIZES = ("small", "medium", "large")


@dataclass(frozen=True)
class ExperimentConfig:
    systems: tuple = ("harmonic",)
    models: tuple = ("NODE-RK2", "PHNN-S-DG")
    sizes: tuple = ("small",)
    n_train: tuple = (25,)
    regularizers: tuple = ("BL",)
    seeds: tuple = (0, 1, 2)
    steps: int = 50_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    master_seed: int = 0
    eval_every: int | None = 50
    metrics_every: int = 50
    dg_tol: float = 1e-12
    dg_max_iters: int = 100
    workers: int | None = None
    zero_control_inference: bool = False
    data: dt.DataConfig = field(default_factory=dt.DataConfig)

    def __post_init__(self):
        for key in ("systems", "models", "sizes", "n_train", "regularizers", "seeds"):
            if not isinstance(getattr(self, key), (tuple, list)) or not getattr(self, key):
                raise ValueError(f"'{key}' must be a non-empty sequence")
        for s in self.systems:
            if s not in SYSTEMS:
                raise ValueError(f"unknown system '{s}'")
        for m in self.models:
            if m not in MODEL_COMBOS:
                raise ValueError(f"unknown model combo '{m}'")
        for s in self.sizes:
            if s not in SIZES:
                raise ValueError(f"unknown size '{s}'")
        for r in self.regularizers:
            if r not in REG_LABELS:
                raise ValueError(f"unknown regularizer label '{r}'")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        d = json.loads(text)
        if "data" in d and isinstance(d["data"], dict):
            d["data"] = dt.DataConfig(**d["data"])
        for key in ("systems", "models", "sizes", "n_train", "regularizers", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def train_stepper(self, scheme: str) -> StepperConfig:
        return StepperConfig(scheme, self.data.h_train, self.dg_tol, self.dg_max_iters)


@dataclass
class ResultRow:
    system: str
    model: str
    scheme: str
    size: str
    n_train: int
    regularizer: str
    seed: int
    l_traj: float
    n_failed_rollouts: int = 0

    def key(self):
        return (self.system, self.model, self.size, self.n_train, self.regularizer, self.seed)


def inference_error(model: md.DynamicsModel, infer: dt.InferSplit,
                    stepper: StepperConfig, stride: int,
                    zero_control: bool = False) -> tuple[float, int]:
    """Mean squared trajectory error over the inference split.

    Rolls the model out autoregressively from each reference initial state
    under that trajectory's constant input (or zero input when requested) and
    sums squared deviations over all states and both components, normalized
    by (number of kept trajectories) * (steps per trajectory).  Trajectories
    whose rollout fails numerically are excluded and counted.
    """
    ref = infer.reference(stride)
    n, total_states = ref.shape[0], ref.shape[1]
    n_steps = total_states - 1
    u = np.zeros_like(infer.u) if zero_control else infer.u
    sys = md.stepper_system(model)
    kept = np.ones(n, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            states, _ = _rollout_states(sys, ref[:, 0], u, stepper, n_steps)
            pred = np.swapaxes(states, 0, 1)
            sq = np.sum((ref - pred) ** 2, axis=(1, 2))
        except (DGConvergenceError, NumericFailure):
            sq = np.zeros(n)
            for i in range(n):
                try:
                    states, _ = _rollout_states(sys, ref[i, 0], u[i], stepper, n_steps)
                    sq[i] = np.sum((ref[i] - states) ** 2)
                except (DGConvergenceError, NumericFailure):
                    kept[i] = False
    if not np.any(kept):
        return math.inf, int(n)
    bad = ~np.isfinite(sq)
    kept &= ~bad
    return float(np.sum(sq[kept]) / (kept.sum() * n_steps)), int(n - kept.sum())


def _rollout_states(sys, x0, u, stepper, n_steps):
    from . import integrators
    return integrators.rollout(sys, x0, u, stepper, n_steps)


def aggregate(rows: list[ResultRow]) -> list[dict]:
    """Median and IQR of l_traj per (system, model, size, n_train, regularizer).

    Percentiles use linear interpolation between closest ranks; with a single
    row the median is the value and the IQR is zero.
    """
    groups: dict[tuple, list[float]] = {}
    meta: dict[tuple, ResultRow] = {}
    for r in rows:
        k = r.key()[:5]
        groups.setdefault(k, []).append(r.l_traj)
        meta[k] = r
    out = []
    for k in sorted(groups):
        vals = np.asarray(groups[k])
        if vals.size == 0:
            raise ValueError(f"empty result group {k}")
        with np.errstate(invalid="ignore"):  # groups holding inf rows yield nan IQR
            q25, q50, q75 = np.percentile(vals, [25.0, 50.0, 75.0], method="linear")
        out.append({
            "system": k[0], "model": k[1], "scheme": MODEL_COMBOS[k[1]][1],
            "size": k[2], "n_train": k[3], "regularizer": k[4],
            "n_runs": int(vals.size), "median_l_traj": float(q50),
            "iqr_l_traj": float(q75 - q25),
        })
    return out


def _cell_tag(system, label, size, n_train, reg, seed) -> str:
    return f"{system}-{label}-{size}-n{n_train}-{reg}-s{seed}".lower()


def _cell_seeds(cfg: ExperimentConfig, system, label, size, n_train, reg, seed):
    coords = (
        cfg.master_seed,
        SYSTEMS.index(system),
        tuple(MODEL_COMBOS).index(label),
        SIZES.index(size),
        n_train,
        tuple(REG_LABELS).index(reg),
        seed,
    )
    init_ss, batch_ss = np.random.SeedSequence(coords).spawn(2)
    return dt._seed_of(init_ss), dt._seed_of(batch_ss)


def dataset_path(out_dir: Path, system: str, master_seed: int) -> Path:
    return Path(out_dir) / f"dataset-{system}-seed{master_seed}.csv"


def ensure_dataset(cfg: ExperimentConfig, system: str, out_dir) -> Path:
    """Generate (or reuse) the pool file shared by every cell of one system."""
    path = dataset_path(Path(out_dir), system, cfg.master_seed)
    if not path.exists():
        spec = physics.OSCILLATOR_FACTORIES[system]()
        data_seed = dt._seed_of(np.random.SeedSequence((cfg.master_seed, SYSTEMS.index(system))))
        bundle = dt.build_bundle(spec, cfg.data, max(cfg.n_train), data_seed)
        save_tmp = path.with_suffix(".tmp")
        dt.save_dataset(bundle, save_tmp)
        os.replace(save_tmp, path)
    return path


def run_cell(cfg: ExperimentConfig, system: str, label: str, size: str,
             n_train: int, reg_label: str, seed: int, ds_path, out_dir) -> ResultRow:
    """Train one cell, write its metrics and checkpoint, return its row."""
    kind, scheme = MODEL_COMBOS[label]
    spec = physics.OSCILLATOR_FACTORIES[system]()
    bundle = dt.subset_bundle(dt.load_dataset(ds_path), n_train)
    init_seed, batch_seed = _cell_seeds(cfg, system, label, size, n_train, reg_label, seed)
    model = md.build_model(kind, size, spec, init_seed)
    stepper = cfg.train_stepper(scheme)
    tcfg = training.TrainConfig(
        stepper=stepper, steps=cfg.steps, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        regularizer=md.Regularizer.named(REG_LABELS[reg_label]),
        seed=batch_seed, eval_every=cfg.eval_every, metrics_every=cfg.metrics_every,
    )
    trained, log = training.train_run(model, bundle, tcfg)
    tag = _cell_tag(system, label, size, n_train, reg_label, seed)
    out_dir = Path(out_dir)
    log.to_csv(out_dir / f"metrics-{tag}.csv")
    nets.save_params(out_dir / f"checkpoint-{tag}.bin", trained.params, meta={
        "kind": kind, "size": size, "system": system, "scheme": scheme,
        "h": stepper.h, "dg_tol": stepper.dg_tol, "dg_max_iters": stepper.dg_max_iters,
        "seed": seed, "step": log.best_step,
        "eval_loss": log.best_eval if math.isfinite(log.best_eval) else None,
        "aborted_at": log.aborted_at,
        "heads": {name: [s.input_dim, s.output_dim, s.hidden_units, s.hidden_layers]
                  for name, s in model.specs.items()},
    })
    l_traj, n_failed = inference_error(trained, bundle.infer, stepper,
                                       bundle.config.stride, cfg.zero_control_inference)
    return ResultRow(system, label, scheme, size, n_train, reg_label, seed, l_traj, n_failed)


def _run_cell_payload(args):
    cfg_json, cell, ds_path, out_dir = args
    cfg = ExperimentConfig.from_json(cfg_json)
    try:
        return ("ok", cell, run_cell(cfg, *cell, ds_path, out_dir))
    except Exception as e:  # cell failures must not sink the study
        return ("error", cell, f"{type(e).__name__}: {e}")


def run_study(cfg: ExperimentConfig, out_dir) -> dict[str, Path]:
    """Run every cell of the configured grid and write the result files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    ds_paths = {s: ensure_dataset(cfg, s, out) for s in cfg.systems}
    cells = [
        (system, label, size, n, reg, seed)
        for system in cfg.systems
        for label in cfg.models
        for size in cfg.sizes
        for n in cfg.n_train
        for reg in cfg.regularizers
        for seed in cfg.seeds
    ]
    # implicit-scheme cells dominate runtime; schedule them first
    cells.sort(key=lambda c: MODEL_COMBOS[c[1]][1] != "dg")
    payloads = [(cfg.to_json(), c, str(ds_paths[c[0]]), str(out)) for c in cells]
    workers = cfg.workers or os.cpu_count() or 1
    results: list[ResultRow] = []
    errors: list[tuple] = []
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell_payload, payloads))
    else:
        outcomes = [_run_cell_payload(p) for p in payloads]
    for status, cell, value in outcomes:
        if status == "ok":
            results.append(value)
        else:
            errors.append((cell, value))
    results.sort(key=lambda r: r.key())
    paths = {
        "results": out / "results.csv",
        "summary": out / "summary.csv",
        "errors": out / "errors.csv",
    }
    with open(paths["results"], "w") as f:
        f.write("system,model,scheme,size,n_train,regularizer,seed,l_traj,n_failed_rollouts\n")
        for r in results:
            f.write(f"{r.system},{r.model},{r.scheme},{r.size},{r.n_train},"
                    f"{r.regularizer},{r.seed},{r.l_traj:.17g},{r.n_failed_rollouts}\n")
    with open(paths["summary"], "w") as f:
        f.write("system,model,scheme,size,n_train,regularizer,n_runs,median_l_traj,iqr_l_traj\n")
        for g in aggregate(results):
            f.write(f"{g['system']},{g['model']},{g['scheme']},{g['size']},{g['n_train']},"
                    f"{g['regularizer']},{g['n_runs']},{g['median_l_traj']:.17g},"
                    f"{g['iqr_l_traj']:.17g}\n")
    with open(paths["errors"], "w") as f:
        f.write("system,model,size,n_train,regularizer,seed,error\n")
        for cell, msg in errors:
            f.write(",".join(str(c) for c in cell) + "," + msg.replace(",", ";") + "\n")
    return paths


def study_preset(name: str, full: bool = False, **overrides) -> ExperimentConfig:
    """Named study configurations.

    The scaled defaults keep one system and three seeds per cell so a study
    finishes on a workstation; ``full=True`` restores the complete grid
    (all systems, five model combos, ten seeds), which is a long-running
    reproduction mode.
    """
    name = name.upper()
    seeds_full = tuple(range(10))
    if name == "I":
        base = dict(systems=("harmonic",), models=("NODE-RK2", "PHNN-S-DG"),
                    sizes=("small",), n_train=(25,), regularizers=("BL",))
        if full:
            base.update(systems=SYSTEMS, models=tuple(MODEL_COMBOS),
                        n_train=(25, 100, 400), seeds=seeds_full)
    elif name == "II":
        base = dict(systems=("harmonic",), models=("NODE-RK2", "PHNN-S-DG"),
                    sizes=("small", "medium", "large"), n_train=(25,),
                    regularizers=("BL",))
        if full:
            base.update(systems=SYSTEMS, models=tuple(MODEL_COMBOS), seeds=seeds_full)
    elif name == "III":
        base = dict(systems=("harmonic",), models=("PHNN-S-DG",), sizes=("small",),
                    n_train=(25,), regularizers=("BL", "CN", "SN", "SR"))
        if full:
            base.update(systems=SYSTEMS, models=tuple(MODEL_COMBOS), seeds=seeds_full)
    else:
        raise ValueError(f"unknown study preset '{name}'")
    base.update(overrides)
    return ExperimentConfig(**base)
