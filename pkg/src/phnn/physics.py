"""Analytic controlled oscillators: energies, dissipation laws, interconnection
matrices, closed-form Jacobian diagnostics, initial-condition sampling and
constant-control design.

Three systems share the state x = (q, p) with one scalar input u:

* harmonic: quadratic energy, linear dissipation z(w) = c w,
* duffing: adds a quartic stiffness term to the energy,
* selfsustained: quadratic energy with a cubic dissipation law whose
  negative-slope region destabilizes the equilibrium and yields a limit
  cycle under a suitable constant input.

All state functions broadcast over leading axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "LinearDamping",
    "CubicDamping",
    "OscillatorSpec",
    "harmonic",
    "duffing",
    "self_sustained",
    "OSCILLATOR_FACTORIES",
    "true_hamiltonian",
    "true_grad_hamiltonian",
    "true_z",
    "true_z_prime",
    "true_dynamics",
    "true_state_jacobian",
    "JacobianDiagnostics",
    "closed_form_diagnostics",
    "sample_initial_condition",
    "design_control",
    "duffing_elongation",
    "active_interval",
    "natural_frequency",
    "AnalyticSForm",
]


@dataclass(frozen=True)
class LinearDamping:
    c: float


@dataclass(frozen=True)
class CubicDamping:
    a: float
    b: float
    c: float


Damping = Union[LinearDamping, CubicDamping]

# Interconnection matrices; effort order (dH/dq, dH/dp, z, u), flow order
# (qdot, pdot, w, y).  The w row never touches z, so w is explicit.
_S_SPRING = np.array([
    [0.0, 1.0, 0.0, 0.0],
    [-1.0, 0.0, -1.0, -1.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
])
_J_SPRING = np.array([
    [0.0, 1.0, 0.0],
    [-1.0, 0.0, -1.0],
    [0.0, 1.0, 0.0],
])
_S_SELF = np.array([
    [0.0, -1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0, -1.0],
    [0.0, 0.0, 1.0, 0.0],
])
_J_SELF = np.array([
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 0.0],
])


@dataclass(frozen=True)
class OscillatorSpec:
    """One ground-truth oscillator with its structure matrices."""

    kind: str
    m: float
    k1: float
    k3: float
    damping: Damping
    S: np.ndarray
    J: np.ndarray

    def __post_init__(self):
        if self.m <= 0 or self.k1 <= 0:
            raise ValueError("mass and stiffness must be positive")
        if self.kind == "duffing" and self.k3 <= 0:
            raise ValueError("duffing stiffness k3 must be positive")
        if np.any(self.S + self.S.T != 0.0) or np.any(self.J + self.J.T != 0.0):
            raise ValueError("interconnection matrices must be skew-symmetric")
        if self.S[2, 2] != 0.0:
            raise ValueError("the dissipation flow must not feed back on itself")


def harmonic(m: float = 0.16, k: float = 6.25, c: float = 0.9) -> OscillatorSpec:
    return OscillatorSpec("harmonic", m, k, 0.0, LinearDamping(c), _S_SPRING, _J_SPRING)


def duffing(m: float = 0.16, k1: float = 6.25, k3: float | None = None,
            c: float = 0.9) -> OscillatorSpec:
    if k3 is None:
        k3 = 100.0 * k1
    return OscillatorSpec("duffing", m, k1, k3, LinearDamping(c), _S_SPRING, _J_SPRING)


def self_sustained(m: float = 0.16, k: float = 6.25, a: float = 1.3,
                   b: float = -4.0, c: float = 3.0) -> OscillatorSpec:
    return OscillatorSpec("selfsustained", m, k, 0.0, CubicDamping(a, b, c), _S_SELF, _J_SELF)


OSCILLATOR_FACTORIES = {
    "harmonic": harmonic,
    "duffing": duffing,
    "selfsustained": self_sustained,
}


def true_hamiltonian(spec: OscillatorSpec, x) -> np.ndarray:
    """Stored energy in joules; exact and nonnegative."""
    x = np.asarray(x, dtype=np.float64)
    q, p = x[..., 0], x[..., 1]
    return p * p / (2.0 * spec.m) + 0.5 * spec.k1 * q * q + 0.25 * spec.k3 * q ** 4


def true_grad_hamiltonian(spec: OscillatorSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    q, p = x[..., 0], x[..., 1]
    return np.stack([spec.k1 * q + spec.k3 * q ** 3, p / spec.m], axis=-1)


def true_z(spec: OscillatorSpec, w):
    w = np.asarray(w, dtype=np.float64)
    d = spec.damping
    if isinstance(d, LinearDamping):
        return d.c * w
    return d.a * w ** 3 + d.b * w * w + d.c * w


def true_z_prime(spec: OscillatorSpec, w):
    w = np.asarray(w, dtype=np.float64)
    d = spec.damping
    if isinstance(d, LinearDamping):
        return np.full_like(w, d.c)
    return 3.0 * d.a * w * w + 2.0 * d.b * w + d.c


def _port(u, lead_shape) -> np.ndarray:
    """Coerce a scalar or (..., 1) input to a (..., 1) float64 array."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 0:
        return np.broadcast_to(u, lead_shape + (1,)) if lead_shape else u.reshape(1)
    if u.shape[-1] != 1:
        raise ValueError(f"input port must have width 1, got shape {u.shape}")
    return u


def true_dynamics(spec: OscillatorSpec, x, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flows of the semi-explicit port structure: (xdot, w, y).

    The instantaneous power balance gradH.xdot + z(w).w + u.y = 0 holds by
    skew-symmetry of the interconnection.
    """
    x = np.asarray(x, dtype=np.float64)
    u = _port(u, x.shape[:-1])
    e = true_grad_hamiltonian(spec, x)
    S = spec.S
    w = (e @ S[2, :2])[..., None] + S[2, 3] * u
    z = true_z(spec, w)
    efforts = np.concatenate([e, z, u], axis=-1)
    flows = efforts @ S.T
    return flows[..., :2], w, flows[..., 3:4]


def true_state_jacobian(spec: OscillatorSpec, x, u=0.0) -> np.ndarray:
    """Analytic 2x2 Jacobian of the drift (q, p) |-> (qdot, pdot), u held fixed."""
    x = np.asarray(x, dtype=np.float64)
    q = x[..., 0]
    lead = q.shape
    out = np.zeros(lead + (2, 2))
    if spec.kind in ("harmonic", "duffing"):
        c = spec.damping.c
        out[..., 0, 1] = 1.0 / spec.m
        out[..., 1, 0] = -(spec.k1 + 3.0 * spec.k3 * q * q)
        out[..., 1, 1] = -c / spec.m
    else:
        u = _port(u, lead)
        w = -spec.k1 * q - u[..., 0]
        theta = true_z_prime(spec, w)
        out[..., 0, 0] = -theta * spec.k1
        out[..., 0, 1] = -1.0 / spec.m
        out[..., 1, 0] = spec.k1
    return out


@dataclass
class JacobianDiagnostics:
    """Spectral norm, condition number and stiffness ratio of the drift Jacobian.

    ``stiffness_ratio`` is NaN where an eigenvalue real part vanishes;
    ``stiffness_defined`` marks where it is meaningful.
    """

    spectral_norm: np.ndarray
    condition_number: np.ndarray
    stiffness_ratio: np.ndarray
    stiffness_defined: np.ndarray


def closed_form_diagnostics(spec: OscillatorSpec, x, u=0.0) -> JacobianDiagnostics:
    """Diagnostics from the per-system radical formulas (no numeric linear algebra).

    Differences that cancel catastrophically are rewritten through the
    determinant: sigma_max*sigma_min = |det J| and lambda_+*lambda_- = det J,
    which keeps the condition number and stiffness ratio accurate when they
    are large.
    """
    x = np.asarray(x, dtype=np.float64)
    q = x[..., 0]
    m = spec.m
    if spec.kind in ("harmonic", "duffing"):
        c = spec.damping.c
        keff = spec.k1 + 3.0 * spec.k3 * q * q
        det = keff / m
        big = keff * keff + (1.0 + c * c) / m ** 2
        inner = np.sqrt((keff ** 2 - (1.0 + c * c) / m ** 2) ** 2 + 4.0 * keff ** 2 * c * c / m ** 2)
        trace = np.broadcast_to(np.float64(-c / m), q.shape)
        disc = c * c / m ** 2 - 4.0 * keff / m
    else:
        u = _port(u, q.shape)
        w = -spec.k1 * q - u[..., 0]
        theta = true_z_prime(spec, w)
        k = spec.k1
        det = np.broadcast_to(np.float64(k / m), q.shape)
        big = k * k * theta * theta + k * k + 1.0 / m ** 2
        inner = np.sqrt((k * k * theta * theta + k * k - 1.0 / m ** 2) ** 2
                        + 4.0 * k * k * theta * theta / m ** 2)
        trace = -theta * k
        disc = theta * theta * k * k - 4.0 * k / m
    # sigma_max^2 = (big + inner)/2, sigma_max*sigma_min = det
    spectral = np.sqrt(0.5 * (big + inner))
    cond = 0.5 * (big + inner) / det
    underdamped = disc < 0.0
    root = np.sqrt(np.maximum(disc, 0.0))
    lam_big = 0.5 * (trace - np.sign(trace) * root)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_small = np.where(lam_big != 0.0, det / np.where(lam_big != 0.0, lam_big, 1.0), 0.0)
    re_half_tr = 0.5 * trace
    re_max = np.where(underdamped, np.abs(re_half_tr), np.maximum(np.abs(lam_big), np.abs(lam_small)))
    re_min = np.where(underdamped, np.abs(re_half_tr), np.minimum(np.abs(lam_big), np.abs(lam_small)))
    defined = re_min > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(defined, re_max / np.where(defined, re_min, 1.0), np.nan)
    return JacobianDiagnostics(spectral, cond, rho, defined)


def duffing_elongation(k1: float, k3: float, energy: float) -> float:
    """Positive q with H(q, 0) = energy, for quadratic or quartic potentials."""
    if energy < 0:
        raise ValueError("energy must be nonnegative")
    if k3 == 0.0:
        return math.sqrt(2.0 * energy / k1)
    s = (-k1 / 2.0 + math.sqrt(k1 * k1 / 4.0 + k3 * energy)) / (k3 / 2.0)
    return math.sqrt(s)


def active_interval(d: CubicDamping) -> tuple[float, float]:
    """Open interval where the cubic dissipation has negative slope."""
    disc = d.b * d.b - 3.0 * d.a * d.c
    if d.a <= 0.0 or disc <= 0.0:
        raise ValueError("dissipation law has no negative-slope region")
    root = math.sqrt(disc)
    return (-d.b - root) / (3.0 * d.a), (-d.b + root) / (3.0 * d.a)


def sample_initial_condition(spec: OscillatorSpec, rng: np.random.Generator,
                             e_min: float, e_max: float) -> np.ndarray:
    """Draw x0 inside the configured energy band.

    Quadratic energies sample the exact constant-energy ellipse at
    E0 = sqrt(r), r uniform in [e_min, e_max] (so realized energies sit in
    [sqrt(e_min), sqrt(e_max)]).  The quartic energy falls back to rejection
    sampling in the tightest box containing the band.
    """
    if not (0.0 < e_min <= e_max):
        raise ValueError("need 0 < e_min <= e_max")
    if spec.kind != "duffing":
        theta = rng.uniform(0.0, 2.0 * math.pi)
        r = rng.uniform(e_min, e_max)
        e0 = math.sqrt(r)
        q = math.sqrt(2.0 * e0 / spec.k1) * math.sin(theta)
        p = math.sqrt(2.0 * spec.m * e0) * math.cos(theta)
        return np.array([q, p])
    q_max = duffing_elongation(spec.k1, spec.k3, e_max)
    p_max = math.sqrt(2.0 * spec.m * e_max)
    chunk, budget = 512, 1_000_000
    for _ in range(budget // chunk + 1):
        cand = rng.uniform([-q_max, -p_max], [q_max, p_max], size=(chunk, 2))
        h0 = true_hamiltonian(spec, cand)
        hit = np.flatnonzero((e_min <= h0) & (h0 <= e_max))
        if hit.size:
            return cand[hit[0]]
    raise RuntimeError("rejection sampling exceeded 1e6 draws; energy band too thin for the box")


def design_control(spec: OscillatorSpec, rng: np.random.Generator,
                   eeq_min: float, eeq_max: float) -> float:
    """Constant input: energy shaping for the spring systems, an operating
    point inside the negative-slope region for the self-sustained one (the
    energy band is ignored there)."""
    if spec.kind in ("harmonic", "duffing"):
        e_eq = rng.uniform(eeq_min, eeq_max)
        q_star = duffing_elongation(spec.k1, spec.k3, e_eq)
        return -(spec.k1 * q_star + spec.k3 * q_star ** 3)
    lo, hi = active_interval(spec.damping)
    return -rng.uniform(lo, hi)


def natural_frequency(spec: OscillatorSpec) -> float:
    """Undamped small-oscillation frequency in Hz."""
    return math.sqrt(spec.k1 / spec.m) / (2.0 * math.pi)


class AnalyticSForm:
    """Adapter exposing a ground-truth oscillator to the steppers."""

    form = "s"

    def __init__(self, spec: OscillatorSpec):
        self.spec = spec
        self.S = spec.S

    def hamiltonian(self, x):
        return true_hamiltonian(self.spec, x)

    def grad_hamiltonian(self, x):
        return true_grad_hamiltonian(self.spec, x)

    def z(self, w):
        return true_z(self.spec, w)

    def f(self, x, u):
        return true_dynamics(self.spec, x, u)[0]
