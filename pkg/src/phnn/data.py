"""Synthetic dataset factory and persistence.

Trajectories are generated at a high rate with the discrete-gradient stepper,
then subsampled to the training rate.  One supervision pair per trajectory is
picked uniformly from the initial window, so training sees isolated points
while inference must reproduce full horizons from unseen trajectories.

The on-disk format is a single JSON header line (system, seed, generation
hyperparameters, split bookkeeping) followed by a CSV body with columns
t, q, p, u, traj_id.  Stored rows sit on the generation grid, so every
consecutive pair of rows of one trajectory is a single generated transition;
floats are printed with 17 significant digits and round-trip bit-exactly.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import integrators, physics
from .integrators import StepperConfig
from .physics import OscillatorSpec

__all__ = [
    "DataConfig",
    "Trajectory",
    "TrainPoint",
    "SplitPoints",
    "InferSplit",
    "DatasetBundle",
    "generate_pool",
    "build_train_points",
    "build_inference_set",
    "build_bundle",
    "subset_bundle",
    "save_dataset",
    "load_dataset",
    "discrete_power_residuals",
]


@dataclass(frozen=True)
class DataConfig:
    """Generation and sampling hyperparameters (defaults: the study setup)."""

    f0: float = 1.0                # nominal natural frequency [Hz]
    sr_gen: float = 400.0          # generation sampling rate [Hz]
    sr_train: float = 100.0        # training/inference sampling rate [Hz]
    duration_alpha: float = 0.31   # training window, in periods
    duration_beta: float = 5.0     # full horizon, in periods
    e0_min: float = 0.1
    e0_max: float = 1.0
    eeq_min: float = 0.1
    eeq_max: float = 1.0
    n_eval: int = 2500
    n_infer: int = 100
    dg_tol: float = 1e-12
    dg_max_iters: int = 100

    def __post_init__(self):
        if self.sr_gen % self.sr_train != 0.0:
            raise ValueError("generation rate must be an integer multiple of the training rate")

    @property
    def period(self) -> float:
        return 1.0 / self.f0

    @property
    def stride(self) -> int:
        return int(round(self.sr_gen / self.sr_train))

    @property
    def h_gen(self) -> float:
        return 1.0 / self.sr_gen

    @property
    def h_train(self) -> float:
        return 1.0 / self.sr_train

    @property
    def n_gen_steps(self) -> int:
        return int(math.floor(self.duration_beta * self.period * self.sr_gen))

    @property
    def n_candidates(self) -> int:
        """Usable pick indices on the training grid inside the window."""
        return int(math.floor(self.duration_alpha * self.period * self.sr_train))

    @property
    def window_rows(self) -> int:
        """Generation-grid rows kept for the point splits (pairs included)."""
        return self.n_candidates * self.stride + 1

    def stepper(self) -> StepperConfig:
        return StepperConfig("dg", self.h_gen, self.dg_tol, self.dg_max_iters)


@dataclass
class Trajectory:
    """A stored state sequence under one constant input."""

    states: np.ndarray          # (n, 2)
    u: float
    t0: float
    sample_rate: float
    system_tag: str
    traj_id: int


@dataclass
class TrainPoint:
    x: np.ndarray
    u: float
    x_next: np.ndarray
    source_traj: int
    step_index: int             # pick index on the training grid


@dataclass
class SplitPoints:
    """One supervision pair per source trajectory, plus the stored windows."""

    x: np.ndarray               # (n, 2)
    u: np.ndarray               # (n, 1)
    x_next: np.ndarray          # (n, 2)
    traj_ids: np.ndarray        # (n,)
    picks: np.ndarray           # (n,)
    windows: np.ndarray         # (n, window_rows, 2) on the generation grid

    def __len__(self):
        return self.x.shape[0]

    def points(self) -> Iterator[TrainPoint]:
        for i in range(len(self)):
            yield TrainPoint(self.x[i], float(self.u[i, 0]), self.x_next[i],
                             int(self.traj_ids[i]), int(self.picks[i]))


@dataclass
class InferSplit:
    """Full-horizon reference trajectories on the generation grid."""

    traj_ids: np.ndarray        # (n,)
    u: np.ndarray               # (n, 1)
    states_gen: np.ndarray      # (n, rows, 2)

    def __len__(self):
        return self.traj_ids.shape[0]

    def reference(self, stride: int) -> np.ndarray:
        """(n, rows/stride + 1, 2) states at the inference rate."""
        return self.states_gen[:, ::stride]

    def trajectories(self, sample_rate: float, system_tag: str) -> list[Trajectory]:
        return [
            Trajectory(self.states_gen[i], float(self.u[i, 0]), 0.0, sample_rate,
                       system_tag, int(self.traj_ids[i]))
            for i in range(len(self))
        ]


@dataclass
class DatasetBundle:
    system_tag: str
    seed: int
    n_train: int
    config: DataConfig
    train: SplitPoints
    eval: SplitPoints
    infer: InferSplit


def generate_pool(spec: OscillatorSpec, config: DataConfig, n_traj: int,
                  seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked pool (states (n, rows, 2), u (n, 1)) on the generation grid.

    Each trajectory's initial condition and constant input come from its own
    substream of ``seed``; the whole pool is stepped as one batch.
    """
    children = np.random.SeedSequence(seed).spawn(n_traj)
    x0 = np.empty((n_traj, 2))
    u = np.empty((n_traj, 1))
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        x0[i] = physics.sample_initial_condition(spec, rng, config.e0_min, config.e0_max)
        u[i, 0] = physics.design_control(spec, rng, config.eeq_min, config.eeq_max)
    sys = physics.AnalyticSForm(spec)
    states, _ = integrators.rollout(sys, x0, u, config.stepper(), config.n_gen_steps)
    return np.swapaxes(states, 0, 1).copy(), u


def build_train_points(states: np.ndarray, u: np.ndarray, traj_ids: np.ndarray,
                       config: DataConfig, rng: np.random.Generator) -> SplitPoints:
    """One uniformly picked pair per trajectory, both states inside the
    training window and exactly one training-rate step apart."""
    n = states.shape[0]
    if config.n_candidates < 1:
        raise ValueError("training window shorter than one training-rate step")
    picks = rng.integers(0, config.n_candidates, size=n)
    stride = config.stride
    rows = np.arange(n)
    x = states[rows, picks * stride]
    x_next = states[rows, (picks + 1) * stride]
    windows = states[:, :config.window_rows].copy()
    return SplitPoints(x, u.copy(), x_next, traj_ids.copy(), picks, windows)


def build_inference_set(states: np.ndarray, u: np.ndarray, traj_ids: np.ndarray) -> InferSplit:
    return InferSplit(traj_ids.copy(), u.copy(), states.copy())


def build_bundle(spec: OscillatorSpec, config: DataConfig, n_train: int,
                 seed: int) -> DatasetBundle:
    """Generate a pool and split it into disjoint train/eval/infer parts."""
    n_pool = n_train + config.n_eval + config.n_infer
    root = np.random.SeedSequence(seed)
    ss_pool, ss_train, ss_eval = root.spawn(3)
    states, u = generate_pool(spec, config, n_pool, _seed_of(ss_pool))
    ids = np.arange(n_pool)
    a, b = n_train, n_train + config.n_eval
    train = build_train_points(states[:a], u[:a], ids[:a], config,
                               np.random.default_rng(ss_train))
    evl = build_train_points(states[a:b], u[a:b], ids[a:b], config,
                             np.random.default_rng(ss_eval))
    infer = build_inference_set(states[b:], u[b:], ids[b:])
    return DatasetBundle(spec.kind, seed, n_train, config, train, evl, infer)


def _seed_of(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def subset_bundle(bundle: DatasetBundle, n_train: int) -> DatasetBundle:
    """View with the train split cut to its first ``n_train`` trajectories;
    eval and infer stay identical, so cells with different training sizes
    share the rest of the pool."""
    if n_train > len(bundle.train):
        raise ValueError(f"bundle holds {len(bundle.train)} train trajectories, need {n_train}")
    t = bundle.train
    cut = SplitPoints(t.x[:n_train], t.u[:n_train], t.x_next[:n_train],
                      t.traj_ids[:n_train], t.picks[:n_train], t.windows[:n_train])
    return DatasetBundle(bundle.system_tag, bundle.seed, n_train, bundle.config,
                         cut, bundle.eval, bundle.infer)


def discrete_power_residuals(spec: OscillatorSpec, states: np.ndarray,
                             u: np.ndarray, h: float) -> np.ndarray:
    """|H(x') - H(x) + h z(w).w + h u.y| for every stored transition.

    The flows are reconstructed from the increments through the discrete
    gradient, so this audits files without needing stored ports.
    """
    x, x_next = states[:, :-1], states[:, 1:]
    dx = x_next - x
    dgrad = integrators.gonzalez_dg(
        lambda xx: physics.true_hamiltonian(spec, xx),
        lambda xx: physics.true_grad_hamiltonian(spec, xx),
        x, dx,
    )
    s = spec.S
    uu = u[:, None, :]
    w = (dgrad @ s[2, :2])[..., None] + s[2, 3] * uu
    z = physics.true_z(spec, w)
    efforts = np.concatenate([dgrad, z, np.broadcast_to(uu, w.shape)], axis=-1)
    y = efforts @ s[3]
    dh = physics.true_hamiltonian(spec, x_next) - physics.true_hamiltonian(spec, x)
    return np.abs(dh + h * (z[..., 0] * w[..., 0]) + h * (uu[..., 0] * y))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(bundle: DatasetBundle, path) -> None:
    header = {
        "format": "phnn-dataset-v1",
        "system": bundle.system_tag,
        "seed": bundle.seed,
        "n_train": bundle.n_train,
        "config": asdict(bundle.config),
        "splits": {
            "train": _split_header(bundle.train),
            "eval": _split_header(bundle.eval),
            "infer": {
                "traj_ids": bundle.infer.traj_ids.tolist(),
                "u": [f"{v:.17g}" for v in bundle.infer.u[:, 0]],
            },
        },
    }
    buf = io.StringIO()
    buf.write(json.dumps(header))
    buf.write("\n")
    buf.write("t,q,p,u,traj_id\n")
    h_gen = bundle.config.h_gen
    for split in (bundle.train, bundle.eval):
        for i in range(len(split)):
            _write_rows(buf, split.windows[i], split.u[i, 0], int(split.traj_ids[i]), h_gen)
    for i in range(len(bundle.infer)):
        _write_rows(buf, bundle.infer.states_gen[i], bundle.infer.u[i, 0],
                    int(bundle.infer.traj_ids[i]), h_gen)
    with open(path, "w") as f:
        f.write(buf.getvalue())


def _split_header(split: SplitPoints) -> dict:
    return {
        "traj_ids": split.traj_ids.tolist(),
        "picks": split.picks.tolist(),
        "u": [f"{v:.17g}" for v in split.u[:, 0]],
    }


def _write_rows(buf, states: np.ndarray, u: float, traj_id: int, h: float) -> None:
    us = f"{u:.17g}"
    for j in range(states.shape[0]):
        buf.write(f"{j * h:.17g},{states[j, 0]:.17g},{states[j, 1]:.17g},{us},{traj_id}\n")


def load_dataset(path) -> DatasetBundle:
    with open(path) as f:
        text = f.read()
    nl = text.index("\n")
    try:
        header = json.loads(text[:nl])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: bad header line: {e}") from None
    if header.get("format") != "phnn-dataset-v1":
        raise ValueError(f"{path}: not a dataset file")
    body = text[nl + 1:]
    nl2 = body.index("\n")
    if body[:nl2] != "t,q,p,u,traj_id":
        raise ValueError(f"{path}: unexpected CSV columns '{body[:nl2]}'")
    flat = np.fromstring(body[nl2 + 1:].replace("\n", ","), sep=",")  # noqa: NPY201
    if flat.size % 5 != 0:
        raise ValueError(f"{path}: ragged CSV body ({flat.size} fields)")
    rows = flat.reshape(-1, 5)
    config = DataConfig(**header["config"])
    sp = header["splits"]
    n_train = len(sp["train"]["traj_ids"])
    n_eval = len(sp["eval"]["traj_ids"])
    n_infer = len(sp["infer"]["traj_ids"])
    w = config.window_rows
    rows_gen = config.n_gen_steps + 1
    expect = (n_train + n_eval) * w + n_infer * rows_gen
    if rows.shape[0] != expect:
        raise ValueError(f"{path}: row count {rows.shape[0]} does not match header ({expect})")
    off = 0

    def take(n, length):
        nonlocal off
        block = rows[off:off + n * length, 1:3].reshape(n, length, 2)
        off += n * length
        return block

    train = _split_from_header(sp["train"], take(n_train, w), config)
    evl = _split_from_header(sp["eval"], take(n_eval, w), config)
    infer = InferSplit(
        np.asarray(sp["infer"]["traj_ids"], dtype=int),
        np.array([[float(v)] for v in sp["infer"]["u"]]),
        take(n_infer, rows_gen),
    )
    return DatasetBundle(header["system"], header["seed"], header["n_train"],
                         config, train, evl, infer)


def _split_from_header(h: dict, windows: np.ndarray, config: DataConfig) -> SplitPoints:
    picks = np.asarray(h["picks"], dtype=int)
    stride = config.stride
    rows = np.arange(windows.shape[0])
    return SplitPoints(
        windows[rows, picks * stride],
        np.array([[float(v)] for v in h["u"]]),
        windows[rows, (picks + 1) * stride],
        np.asarray(h["traj_ids"], dtype=int),
        picks,
        windows,
    )
