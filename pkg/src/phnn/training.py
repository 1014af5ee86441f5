"""Loss functions and the optimization loop.

The discrete loss drives a one-step prediction through the differentiable
stepper; the regularized variants add a weighted Jacobian penalty evaluated
at the batch inputs.  Runs are deterministic given (seed, config, data):
batches are drawn with replacement from a seeded generator and the best
checkpoint is selected by evaluation loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import models as md
from .autodiff import AdamState, NumericFailure, ParamVector, adam_step, value_and_grad
from .data import DatasetBundle, SplitPoints
from .integrators import DGConvergenceError, StepperConfig
from .models import DynamicsModel, Regularizer

__all__ = [
    "TrainConfig",
    "MetricLog",
    "loss_discrete",
    "loss_continuous",
    "loss_regularized",
    "batch_jacobian_stats",
    "train_run",
]


@dataclass
class TrainConfig:
    stepper: StepperConfig
    steps: int = 50_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    regularizer: Regularizer = field(default_factory=Regularizer.none)
    seed: int = 0
    eval_every: int | None = None   # None: once per epoch, ceil(n_train/batch)
    metrics_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("need steps >= 0 and batch_size >= 1")


@dataclass
class MetricLog:
    """Per-logged-step training records with strictly increasing step index."""

    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    eval_loss: list = field(default_factory=list)
    mean_cond: list = field(default_factory=list)
    mean_specnorm: list = field(default_factory=list)
    mean_stiffness: list = field(default_factory=list)
    aborted_at: int | None = None
    best_step: int = 0
    best_eval: float = math.inf

    def append(self, step, train_loss, eval_loss, cond, spec, stiff):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("log steps must increase")
        self.steps.append(step)
        self.train_loss.append(train_loss)
        self.eval_loss.append(eval_loss)
        self.mean_cond.append(cond)
        self.mean_specnorm.append(spec)
        self.mean_stiffness.append(stiff)

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("step,train_loss,eval_loss,mean_cond,mean_specnorm,mean_stiffness\n")
            for row in zip(self.steps, self.train_loss, self.eval_loss,
                           self.mean_cond, self.mean_specnorm, self.mean_stiffness):
                f.write(f"{row[0]:d}," + ",".join(f"{v:.17g}" for v in row[1:]) + "\n")


def loss_discrete(model: DynamicsModel, batch, stepper: StepperConfig,
                  params: Mapping | None = None):
    """Mean 1-norm of the scaled one-step residual (x_next - g(x, u)) / h."""
    x, u, x_next = batch
    pred = md.eval_g(model, x, u, stepper, params)
    resid = ad.div(ad.sub(x_next, pred), stepper.h)
    return ad.mean_all(ad.sum_last(ad.absolute(resid)))


def loss_continuous(model: DynamicsModel, x, u, xdot_ref,
                    params: Mapping | None = None):
    """Mean squared 2-norm residual against reference state derivatives."""
    f = md.eval_f(model, x, u, params)[0]
    d = ad.sub(xdot_ref, f)
    return ad.mean_all(ad.sum_last(ad.mul(d, d)))


def loss_regularized(model: DynamicsModel, batch, stepper: StepperConfig,
                     reg: Regularizer, params: Mapping | None = None):
    """Discrete loss plus the weighted batch-mean Jacobian penalty."""
    base = loss_discrete(model, batch, stepper, params)
    if reg.kind == "none" or reg.lam == 0.0:
        return base
    x, u, _ = batch
    jac = md.state_jacobian(model, x, u, params)
    return ad.add(base, ad.mul(reg.lam, ad.mean_all(md.jacobian_penalty(jac, reg))))


def batch_jacobian_stats(model: DynamicsModel, x, u,
                         params: Mapping | None = None) -> tuple[float, float, float]:
    """Batch means of (condition number, spectral norm, stiffness ratio) of
    the model Jacobian, unguarded, for logging."""
    jac = np.asarray(ad.value_of(md.state_jacobian(model, x, u, params)))
    sv = np.linalg.svd(jac, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = sv[..., 0] / sv[..., 1]
        ev = np.linalg.eigvals(jac)
        re = np.abs(ev.real)
        stiff = re.max(axis=-1) / re.min(axis=-1)
    return float(np.mean(cond)), float(np.mean(sv[..., 0])), float(np.mean(stiff))


def _eval_loss(model, split: SplitPoints, stepper, params_arrays) -> float:
    val = loss_discrete(model, (split.x, split.u, split.x_next), stepper, params_arrays)
    return float(ad.value_of(val))


def train_run(model: DynamicsModel, bundle: DatasetBundle,
              cfg: TrainConfig) -> tuple[DynamicsModel, MetricLog]:
    """Adam on minibatches sampled with replacement from the train split.

    Returns the best-evaluation-loss checkpoint.  A numeric failure (including
    a non-converging implicit solve) stops training early; the best checkpoint
    so far is returned and the log records the aborting step.
    """
    train, eval_split = bundle.train, bundle.eval
    n = len(train)
    eval_every = cfg.eval_every if cfg.eval_every is not None \
        else max(1, math.ceil(n / cfg.batch_size))
    rng = np.random.default_rng(cfg.seed)
    params = model.params.copy()
    adam = AdamState.fresh(params.size, cfg.learning_rate)
    log = MetricLog()

    def arrays_of(p: ParamVector):
        return {name: p.array(name) for name in p.names()}

    try:
        ev0 = _eval_loss(model, eval_split, cfg.stepper, arrays_of(params))
        c0, s0, r0 = batch_jacobian_stats(model, train.x, train.u, arrays_of(params))
    except (NumericFailure, DGConvergenceError):
        log.aborted_at = 0
        return model.with_params(params), log
    log.append(0, math.nan, ev0, c0, s0, r0)
    best_loss, best_params, best_step = ev0, params.copy(), 0

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = (train.x[idx], train.u[idx], train.x_next[idx])
        try:
            val, grad = value_and_grad(
                lambda leaves: loss_regularized(model, batch, cfg.stepper,
                                                cfg.regularizer, leaves),
                params,
            )
            params, adam = adam_step(params, grad, adam)
        except (NumericFailure, DGConvergenceError):
            log.aborted_at = step
            break
        want_eval = step % eval_every == 0 or step == cfg.steps
        want_metrics = step % cfg.metrics_every == 0 or step == cfg.steps
        if not (want_eval or want_metrics):
            continue
        arrays = arrays_of(params)
        ev = math.nan
        if want_eval:
            try:
                ev = _eval_loss(model, eval_split, cfg.stepper, arrays)
            except (NumericFailure, DGConvergenceError):
                log.aborted_at = step
                break
            if ev < best_loss:
                best_loss, best_params, best_step = ev, params.copy(), step
        cond, spec, stiff = batch_jacobian_stats(model, batch[0], batch[1], arrays) \
            if want_metrics else (math.nan,) * 3
        log.append(step, float(val), ev, cond, spec, stiff)
    log.best_step, log.best_eval = best_step, best_loss
    return model.with_params(best_params), log
