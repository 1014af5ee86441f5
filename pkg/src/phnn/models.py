"""The three learnable dynamics families and their differentiable diagnostics.

* NODE: a black-box MLP from (x, u) to xdot; integrated explicitly only.
* PHNN-S: learned energy gradient and resistive law routed through a fixed
  skew-symmetric 4x4 interconnection (semi-explicit port form).
* PHNN-JR: learned energy gradient and a learned symmetric PSD dissipation
  matrix in the input-state-output form (J - R)[gradH; u].

The structured families satisfy their power identities for any parameter
values, trained or not.  ``state_jacobian`` and ``jacobian_penalty`` provide
the regularization diagnostics as differentiable expressions.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import integrators, nets
from .autodiff import ParamVector
from .integrators import StepperConfig
from .physics import OscillatorSpec

__all__ = [
    "NODE",
    "PHNN_S",
    "PHNN_JR",
    "MODEL_KINDS",
    "SIZE_TABLE",
    "Regularizer",
    "DynamicsModel",
    "build_model",
    "head_specs",
    "eval_f",
    "eval_g",
    "state_jacobian",
    "jacobian_penalty",
    "LearnedSForm",
    "LearnedJRForm",
    "FieldSystem",
]

NODE = "node"
PHNN_S = "phnn_s"
PHNN_JR = "phnn_jr"
MODEL_KINDS = (NODE, PHNN_S, PHNN_JR)

N_X, N_W, N_U = 2, 1, 1
_PACK_X = N_X * (N_X + 1) // 2          # packed energy factor width
_PACK_XU = (N_X + N_U) * (N_X + N_U + 1) // 2  # packed dissipation factor width

# (hidden units, hidden layers) per head and size; the NODE gets its own row.
SIZE_TABLE = {
    "small": {"node": (24, 2), "LH": (16, 2), "LR": (16, 2), "Lz": (20, 2), "Kz": (20, 2)},
    "medium": {"node": (60, 2), "LH": (42, 2), "LR": (42, 2), "Lz": (42, 2), "Kz": (42, 2)},
    "large": {"node": (100, 3), "LH": (100, 2), "LR": (100, 2), "Lz": (100, 2), "Kz": (100, 2)},
}

PENALTY_EPS = 1e-6  # added to denominators of the ratio penalties


@dataclass(frozen=True)
class Regularizer:
    """Jacobian penalty selector with its weight."""

    kind: str  # "none" | "sn" | "cn" | "sr"
    lam: float

    _DEFAULT_LAMBDA = {"none": 0.0, "sn": 1e-6, "cn": 1e-6, "sr": 1e-4}

    @classmethod
    def named(cls, kind: str, lam: float | None = None) -> "Regularizer":
        kind = kind.lower()
        if kind not in cls._DEFAULT_LAMBDA:
            raise ValueError(f"unknown regularizer '{kind}'")
        return cls(kind, cls._DEFAULT_LAMBDA[kind] if lam is None else lam)

    @classmethod
    def none(cls) -> "Regularizer":
        return cls("none", 0.0)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")


def head_specs(kind: str, size: str) -> dict[str, nets.MLPSpec]:
    t = SIZE_TABLE[size]
    if kind == NODE:
        h, l = t["node"]
        return {"f": nets.MLPSpec(N_X + N_U, N_X, h, l)}
    if kind == PHNN_S:
        return {
            "LH": nets.MLPSpec(N_X, _PACK_X, *t["LH"]),
            "Lz": nets.MLPSpec(N_W, N_W * (N_W + 1) // 2, *t["Lz"]),
            "Kz": nets.MLPSpec(N_W, N_W * (N_W - 1) // 2, *t["Kz"]),
        }
    if kind == PHNN_JR:
        return {
            "LH": nets.MLPSpec(N_X, _PACK_X, *t["LH"]),
            "LR": nets.MLPSpec(N_X + N_U, _PACK_XU, *t["LR"]),
        }
    raise ValueError(f"unknown model kind '{kind}'")


@dataclass
class DynamicsModel:
    """A learnable dynamics family with its fixed interconnection."""

    kind: str
    size: str
    params: ParamVector
    specs: dict[str, nets.MLPSpec]
    interconnection: np.ndarray | None
    system_tag: str = ""

    def param_map(self) -> dict[str, np.ndarray]:
        return {name: self.params.array(name) for name in self.params.names()}

    def with_params(self, params: ParamVector) -> "DynamicsModel":
        return replace(self, params=params)


def build_model(kind: str, size: str, system: OscillatorSpec, seed: int) -> DynamicsModel:
    """Fresh model for one oscillator; the interconnection is taken from the
    system and never trained."""
    specs = head_specs(kind, size)
    params = nets.build_params(specs, seed)
    if kind == PHNN_S:
        inter = system.S.copy()
        if inter[2, 2] != 0.0:
            raise ValueError("the dissipation flow must be explicit in the port structure")
    elif kind == PHNN_JR:
        inter = system.J.copy()
    else:
        inter = None
    return DynamicsModel(kind, size, params, specs, inter, system.kind)


def eval_f(model: DynamicsModel, x, u, params: Mapping | None = None):
    """Continuous dynamics (xdot, w, y); w and y are None where the family
    has no such port (NODE has neither, PHNN-JR has no internal flow)."""
    p = params if params is not None else model.param_map()
    if model.kind == NODE:
        xdot = nets.mlp_forward(model.specs["f"], p, ad.concat_last([x, u]), "f.")
        return xdot, None, None
    if model.kind == PHNN_S:
        s = model.interconnection
        _, grad_h = nets.hamiltonian_head(model.specs["LH"], p, x)
        w = ad.dot(ad.concat_last([grad_h, u]), s[2, [0, 1, 3]].reshape(3, 1))
        z = nets.z_head(model.specs["Lz"], model.specs["Kz"], p, w)
        efforts = ad.concat_last([grad_h, z, u])
        xdot = ad.dot(efforts, s[:2].T.copy())
        y = ad.dot(efforts, s[3].reshape(4, 1))
        return xdot, w, y
    if model.kind == PHNN_JR:
        j = model.interconnection
        _, grad_h = nets.hamiltonian_head(model.specs["LH"], p, x)
        r = nets.r_head(model.specs["LR"], p, x, u)
        flows = ad.matvec(ad.sub(j, r), ad.concat_last([grad_h, u]))
        return ad.slice_last(flows, 0, 2), None, ad.slice_last(flows, 2, 3)
    raise ValueError(f"unknown model kind '{model.kind}'")


class FieldSystem:
    """Stepper adapter for a model exposing only a vector field."""

    form = "field"

    def __init__(self, model: DynamicsModel, params: Mapping | None = None):
        self.model = model
        self.params = params

    def f(self, x, u):
        return eval_f(self.model, x, u, self.params)[0]


class LearnedSForm:
    """Stepper adapter for the semi-explicit port family."""

    form = "s"

    def __init__(self, model: DynamicsModel, params: Mapping | None = None):
        p = params if params is not None else model.param_map()
        self.model = model
        self.params = p
        self.S = model.interconnection
        self._energy = nets.energy_closure(model.specs["LH"], p, N_X)

    def hamiltonian(self, x):
        return self._energy(x)

    def grad_hamiltonian(self, x):
        return ad.grad_last(self._energy, x, N_X)

    def z(self, w):
        return nets.z_head(self.model.specs["Lz"], self.model.specs["Kz"], self.params, w)

    def f(self, x, u):
        return eval_f(self.model, x, u, self.params)[0]


class LearnedJRForm:
    """Stepper adapter for the input-state-output family."""

    form = "jr"

    def __init__(self, model: DynamicsModel, params: Mapping | None = None):
        p = params if params is not None else model.param_map()
        self.model = model
        self.params = p
        self.J = model.interconnection
        self._energy = nets.energy_closure(model.specs["LH"], p, N_X)

    def hamiltonian(self, x):
        return self._energy(x)

    def grad_hamiltonian(self, x):
        return ad.grad_last(self._energy, x, N_X)

    def R(self, x, u):
        return nets.r_head(self.model.specs["LR"], self.params, x, u)

    def f(self, x, u):
        return eval_f(self.model, x, u, self.params)[0]


def stepper_system(model: DynamicsModel, params: Mapping | None = None):
    if model.kind == PHNN_S:
        return LearnedSForm(model, params)
    if model.kind == PHNN_JR:
        return LearnedJRForm(model, params)
    return FieldSystem(model, params)


def eval_g(model: DynamicsModel, x, u, cfg: StepperConfig, params: Mapping | None = None):
    """One discrete step of the model under the configured scheme."""
    sys = stepper_system(model, params)
    if cfg.scheme == "rk2":
        return integrators.rk2_step(sys.f, x, u, cfg.h)
    if model.kind == NODE:
        raise ValueError("the black-box field has no energy head for discrete-gradient stepping")
    if model.kind == PHNN_S:
        return integrators.dg_step_s_form(sys, x, u, cfg).x_next
    return integrators.dg_step_jr_form(sys, x, u, cfg).x_next


def state_jacobian(model: DynamicsModel, x, u, params: Mapping | None = None):
    """Jacobian of xdot with respect to x (u held fixed), shape (..., 2, 2).

    Entries are engine values, so penalties built from them remain
    differentiable with respect to the parameters.
    """
    p = params if params is not None else model.param_map()

    def field(xx):
        return eval_f(model, xx, u, p)[0]

    eye = np.eye(N_X)
    cols = [ad.directional_derivative(field, x, eye[j]) for j in range(N_X)]
    return ad.stack_last(cols)


def jacobian_penalty(jmat, reg: Regularizer | str):
    """Per-sample penalty of a (..., 2, 2) Jacobian stack.

    sn: largest singular value; cn: squared ratio of extreme singular values;
    sr: squared excess of the eigenvalue real-part spread over 1.  Ratio
    denominators carry a 1e-6 guard.
    """
    kind = reg if isinstance(reg, str) else reg.kind
    col0, col1 = ad.index_last(jmat, 0), ad.index_last(jmat, 1)
    a, c = ad.index_last(col0, 0), ad.index_last(col0, 1)
    b, d = ad.index_last(col1, 0), ad.index_last(col1, 1)
    det = ad.sub(ad.mul(a, d), ad.mul(b, c))
    if kind in ("sn", "cn"):
        t = ad.add(ad.add(ad.mul(a, a), ad.mul(b, b)), ad.add(ad.mul(c, c), ad.mul(d, d)))
        inner = ad.sqrt(ad.maximum(ad.sub(ad.mul(t, t), ad.mul(4.0, ad.mul(det, det))), 0.0))
        smax = ad.sqrt(ad.mul(0.5, ad.add(t, inner)))
        if kind == "sn":
            return smax
        # stable sigma_min through the determinant, with a zero-matrix branch
        safe = np.asarray(ad.value_of(smax)) > 1e-150
        smin = ad.where(safe, ad.div(ad.absolute(det), ad.where(safe, smax, 1.0)), 0.0)
        ratio = ad.div(smax, ad.add(smin, PENALTY_EPS))
        return ad.mul(ratio, ratio)
    if kind == "sr":
        tr = ad.add(a, d)
        disc = ad.sub(ad.mul(tr, tr), ad.mul(4.0, det))
        complex_pair = np.asarray(ad.value_of(disc)) < 0.0
        # the complex branch never consumes the root; keep its input positive
        # so no infinite sqrt derivative is created there
        root = ad.sqrt(ad.where(complex_pair, 1.0, disc))
        lam1 = ad.mul(0.5, ad.add(tr, root))
        lam2 = ad.mul(0.5, ad.sub(tr, root))
        half_tr = ad.absolute(ad.mul(0.5, tr))
        re_max = ad.where(complex_pair, half_tr, ad.maximum(ad.absolute(lam1), ad.absolute(lam2)))
        re_min = ad.where(complex_pair, half_tr, ad.minimum(ad.absolute(lam1), ad.absolute(lam2)))
        excess = ad.sub(ad.div(re_max, ad.add(re_min, PENALTY_EPS)), 1.0)
        return ad.mul(excess, excess)
    if kind == "none":
        return ad.mul(0.0, ad.index_last(ad.index_last(jmat, 0), 0))
    raise ValueError(f"unknown penalty kind '{kind}'")
