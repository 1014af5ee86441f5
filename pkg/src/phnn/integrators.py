"""Time steppers: explicit midpoint and an energy-consistent implicit step.

The implicit step replaces the energy gradient with a two-point discrete
gradient satisfying the exact chord identity
``<dgrad, dx> = H(x + dx) - H(x)``, so the discrete power balance of the
port structure holds to solver tolerance at every accepted step.  The
implicit system is solved by damped fixed-point iteration on the state
increment, seeded with one explicit-midpoint predictor step.

Everything here is written against the autodiff primitives, so the same code
steps plain numpy states (data generation, inference) and taped states
(training losses differentiated through the unrolled, converged iterations).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericFailure

__all__ = [
    "StepperConfig",
    "StepResult",
    "DGConvergenceError",
    "rk2_step",
    "gonzalez_dg",
    "dg_step_s_form",
    "dg_step_jr_form",
    "step_system",
    "rollout",
]

DG_ZERO_GUARD = 1e-12  # below this increment norm the chord formula yields to gradH(x)
DG_MIN_DAMPING = 0.125
CHORD_NOISE_FACTOR = 10.0  # numerator magnitudes below this many ulps are rounding noise


@dataclass(frozen=True)
class StepperConfig:
    """Scheme choice and step size; the dg_* fields control the implicit solve."""

    scheme: str  # "rk2" | "dg"
    h: float
    dg_tol: float = 1e-12
    dg_max_iters: int = 100

    def __post_init__(self):
        if self.scheme not in ("rk2", "dg"):
            raise ValueError(f"unknown scheme '{self.scheme}'")
        if self.h <= 0 or self.dg_tol <= 0 or self.dg_max_iters < 1:
            raise ValueError("need h > 0, dg_tol > 0, dg_max_iters >= 1")


@dataclass
class StepResult:
    x_next: object
    w: object
    y: object
    iters: int
    residual: float


class DGConvergenceError(RuntimeError):
    """The implicit solve did not reach tolerance; carries the residual history."""

    def __init__(self, history, step: int | None = None):
        self.history = list(history)
        self.step = step
        at = f" at rollout step {step}" if step is not None else ""
        super().__init__(
            f"discrete-gradient solve did not converge{at}; residuals {self.history[-3:]}"
        )


def rk2_step(f: Callable, x, u, h: float):
    """Explicit midpoint step x + h f(x + (h/2) f(x, u), u), u frozen over the step."""
    k1 = f(x, u)
    k2 = f(ad.add(x, ad.mul(0.5 * h, k1)), u)
    x_next = ad.add(x, ad.mul(h, k2))
    if not np.all(np.isfinite(ad.value_of(x_next))):
        raise NumericFailure("non-finite state after explicit midpoint step")
    return x_next


def gonzalez_dg(hamiltonian: Callable, grad_hamiltonian: Callable, x, dx,
                guard: float = DG_ZERO_GUARD):
    """Midpoint-corrected discrete gradient of ``hamiltonian`` between x and x+dx.

    Satisfies ``<result, dx> = H(x+dx) - H(x)`` exactly by construction and
    returns ``grad_hamiltonian(x)`` where ``|dx|`` is below ``guard``.
    """
    return _chord(hamiltonian, grad_hamiltonian, x, dx, hamiltonian(x), guard)


def _chord(hamiltonian, grad_hamiltonian, x, dx, h_at_x, guard):
    mid = ad.add(x, ad.mul(0.5, dx))
    g_mid = grad_hamiltonian(mid)
    h_fwd = hamiltonian(ad.add(x, dx))
    s = ad.sum_last(ad.mul(g_mid, dx))
    num = ad.sub(ad.sub(h_fwd, h_at_x), s)
    qq = ad.sum_last(ad.mul(dx, dx))
    # The numerator is a triple cancellation; where it is at rounding-noise
    # level the true correction is far smaller still, and dividing the noise
    # by |dx|^2 would poison the implicit solve.  Drop it there.
    nv, sv = np.asarray(ad.value_of(num)), np.abs(np.asarray(ad.value_of(s)))
    scale = np.maximum(np.abs(np.asarray(ad.value_of(h_fwd))),
                       np.maximum(np.abs(np.asarray(ad.value_of(h_at_x))), sv))
    noise = np.abs(nv) <= CHORD_NOISE_FACTOR * np.finfo(np.float64).eps * scale
    qv = np.asarray(ad.value_of(qq))
    dead = noise | (np.sqrt(qv) < guard)
    if np.all(dead):
        chord_dx = None
    else:
        denom = ad.where(dead, 1.0, qq) if np.any(dead) else qq
        chord = ad.div(num, denom)
        if np.any(dead):
            chord = ad.where(dead, 0.0, chord)
        chord_dx = ad.mul(ad.expand_last(chord), dx)
    full = g_mid if chord_dx is None else ad.add(g_mid, chord_dx)
    small = np.sqrt(qv) < guard
    if not np.any(small):
        return full
    return ad.where(small[..., None], grad_hamiltonian(x), full)


def dg_step_s_form(sys, x, u, cfg: StepperConfig) -> StepResult:
    """Discrete-gradient step of a semi-explicit port system (gradH, z, S).

    Solves [dx/h; w; y] = S [dgrad(x, dx); z(w); u] for dx; w is an explicit
    function of the efforts because the w row of S has no self coupling.
    """
    S = np.asarray(sys.S)
    wx = S[:2].T.copy()              # efforts -> state flow
    wy = S[3].reshape(4, 1).copy()   # efforts -> output
    ww = S[2, [0, 1, 3]].reshape(3, 1).copy()  # (gradH, u) -> w
    h = cfg.h
    h_at_x = sys.hamiltonian(x)

    def body(dx):
        dgrad = _chord(sys.hamiltonian, sys.grad_hamiltonian, x, dx, h_at_x, DG_ZERO_GUARD)
        w = ad.dot(ad.concat_last([dgrad, u]), ww)
        efforts = ad.concat_last([dgrad, sys.z(w), u])
        return ad.mul(h, ad.dot(efforts, wx)), w, efforts

    def outputs(efforts):
        return ad.dot(efforts, wy)

    return _fixed_point(body, outputs, sys, x, u, cfg)


def dg_step_jr_form(sys, x, u, cfg: StepperConfig) -> StepResult:
    """Discrete-gradient step of an input-state-output system (gradH, R, J).

    Solves [dx/h; y] = (J - R(x + dx/2, u)) [dgrad(x, dx); u]; the dissipation
    matrix is evaluated at the midpoint state.
    """
    J = np.asarray(sys.J)
    h = cfg.h
    h_at_x = sys.hamiltonian(x)

    def body(dx):
        dgrad = _chord(sys.hamiltonian, sys.grad_hamiltonian, x, dx, h_at_x, DG_ZERO_GUARD)
        mid = ad.add(x, ad.mul(0.5, dx))
        a = ad.sub(J, sys.R(mid, u))
        flows = ad.matvec(a, ad.concat_last([dgrad, u]))
        return ad.mul(h, ad.slice_last(flows, 0, 2)), None, flows

    def outputs(flows):
        return ad.slice_last(flows, 2, 3)

    return _fixed_point(body, outputs, sys, x, u, cfg)


def _fixed_point(body, outputs, sys, x, u, cfg) -> StepResult:
    dx = ad.sub(rk2_step(sys.f, x, u, cfg.h), x)
    gamma = 1.0
    prev = np.inf
    history: list[float] = []
    for it in range(1, cfg.dg_max_iters + 1):
        dnew, w, aux = body(dx)
        res = float(np.max(np.abs(ad.value_of(dnew) - ad.value_of(dx)), initial=0.0))
        history.append(res)
        if not np.isfinite(res):
            raise DGConvergenceError(history)
        if res <= cfg.dg_tol:
            # accept the full image so the flows satisfy the structure exactly
            return StepResult(ad.add(x, dnew), w, outputs(aux), it, res)
        if res > prev and gamma > DG_MIN_DAMPING:
            gamma *= 0.5
        prev = res
        dx = dnew if gamma == 1.0 else ad.add(dx, ad.mul(gamma, ad.sub(dnew, dx)))
    raise DGConvergenceError(history)


def step_system(sys, x, u, cfg: StepperConfig):
    """One step of either scheme; returns the next state only."""
    if cfg.scheme == "rk2":
        return rk2_step(sys.f, x, u, cfg.h)
    form = getattr(sys, "form", None)
    if form == "s":
        return dg_step_s_form(sys, x, u, cfg).x_next
    if form == "jr":
        return dg_step_jr_form(sys, x, u, cfg).x_next
    raise ValueError("discrete-gradient stepping needs a port-structured system")


@dataclass
class RolloutInfo:
    total_iters: int
    max_residual: float


def rollout(sys, x0, u, cfg: StepperConfig, n_steps: int):
    """Autoregressive trajectory of ``n_steps`` transitions from ``x0``.

    Returns ``(states, info)`` with states of shape (n_steps+1, ..., 2);
    ``u`` is held constant throughout.  Step failures are re-raised with the
    failing step index attached.
    """
    x = np.asarray(x0, dtype=np.float64)
    states = [x]
    total_iters = 0
    max_res = 0.0
    for i in range(n_steps):
        try:
            if cfg.scheme == "rk2":
                x = rk2_step(sys.f, x, u, cfg.h)
            else:
                form = getattr(sys, "form", None)
                if form == "s":
                    r = dg_step_s_form(sys, x, u, cfg)
                elif form == "jr":
                    r = dg_step_jr_form(sys, x, u, cfg)
                else:
                    raise ValueError("discrete-gradient stepping needs a port-structured system")
                x = r.x_next
                total_iters += r.iters
                max_res = max(max_res, r.residual)
        except DGConvergenceError as e:
            raise DGConvergenceError(e.history, step=i) from None
        except NumericFailure as e:
            raise NumericFailure(f"{e} (rollout step {i})") from None
        x = ad.value_of(x)
        states.append(x)
    return np.stack(states, axis=0), RolloutInfo(total_iters, max_res)
