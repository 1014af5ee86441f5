"""MLPs and the constrained heads used by the structured dynamics models.

The energy head squares a learned triangular factor so the stored energy is
nonnegative with a zero at the origin; the dissipation heads square factors
likewise so the resulting laws are passive by construction, for any value of
the parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector

__all__ = [
    "MLPSpec",
    "mlp_forward",
    "assemble_lower_triangular",
    "energy_closure",
    "hamiltonian_head",
    "z_head",
    "r_head",
    "init_head_segments",
    "build_params",
    "save_params",
    "load_params",
]

HAMILTONIAN_EPS = 1e-8  # shift on Q = L^T L so the energy is definite off the origin


@dataclass(frozen=True)
class MLPSpec:
    """Shape of one fully connected tanh network.

    ``output_dim == 0`` is legal and denotes an empty network with no
    parameters and no contribution.
    """

    input_dim: int
    output_dim: int
    hidden_units: int
    hidden_layers: int
    activation: str = "tanh"

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_units) < 0:
            raise ValueError("network dimensions must be nonnegative")
        if self.hidden_layers < 1:
            raise ValueError("need at least one hidden layer")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation '{self.activation}'")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_dim]

    @property
    def n_params(self) -> int:
        if self.output_dim == 0:
            return 0
        dims = self.layer_dims
        return sum((a + 1) * b for a, b in zip(dims[:-1], dims[1:]))


def init_head_segments(spec: MLPSpec, rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
    """Initial weights for one head: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), zero biases."""
    if spec.output_dim == 0:
        return {}
    segments: dict[str, np.ndarray] = {}
    dims = spec.layer_dims
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
        segments[f"{prefix}W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        segments[f"{prefix}b{i}"] = np.zeros(fan_out)
    return segments


def build_params(heads: Mapping[str, MLPSpec], seed: int) -> ParamVector:
    """One ParamVector for several heads, each drawn from its own substream."""
    children = np.random.SeedSequence(seed).spawn(len(heads))
    segments: dict[str, np.ndarray] = {}
    for (name, spec), ss in zip(heads.items(), children):
        segments.update(init_head_segments(spec, np.random.default_rng(ss), f"{name}."))
    return ParamVector.build(segments)


def mlp_forward(spec: MLPSpec, params: Mapping, x, prefix: str = ""):
    """Forward pass; ``x`` has the feature axis last, leading axes broadcast."""
    if np.shape(ad.value_of(x))[-1] != spec.input_dim:
        raise ValueError(
            f"input has {np.shape(ad.value_of(x))[-1]} features, spec wants {spec.input_dim}"
        )
    if spec.output_dim == 0:
        return np.zeros(np.shape(ad.value_of(x))[:-1] + (0,))
    h = x
    for i in range(spec.hidden_layers):
        h = ad.dense_tanh(h, params[f"{prefix}W{i}"], params[f"{prefix}b{i}"])
    i = spec.hidden_layers
    return ad.affine(h, params[f"{prefix}W{i}"], params[f"{prefix}b{i}"])


def assemble_lower_triangular(v, n: int, strict: bool = False):
    """Row-major packed entries to an (n, n) (strictly) lower triangular matrix."""
    return ad.tril_from_packed(v, n, strict)


def energy_closure(spec: MLPSpec, params: Mapping, n: int, prefix: str = "LH.",
                   eps: float = HAMILTONIAN_EPS):
    """The learned energy 0.5 x^T (L(x)^T L(x) + eps I) x as a scalar function."""

    def energy(xx):
        packed = mlp_forward(spec, params, xx, prefix)
        lower = assemble_lower_triangular(packed, n)
        lx = ad.matvec(lower, xx)
        return ad.mul(0.5, ad.add(ad.sum_last(ad.mul(lx, lx)),
                                  ad.mul(eps, ad.sum_last(ad.mul(xx, xx)))))

    return energy


def hamiltonian_head(spec: MLPSpec, params: Mapping, x, prefix: str = "LH.",
                     eps: float = HAMILTONIAN_EPS):
    """Learned energy and its exact state gradient.

    Returns ``(H, gradH)`` with H of shape (...,) and gradH shaped like ``x``.
    The gradient is produced by forward differentiation of the implemented
    energy, so it stays differentiable with respect to the parameters.
    """
    n = np.shape(ad.value_of(x))[-1]
    return ad.value_and_grad_last(energy_closure(spec, params, n, prefix, eps), x, n)


def z_head(l_spec: MLPSpec, k_spec: MLPSpec, params: Mapping, w,
           l_prefix: str = "Lz.", k_prefix: str = "Kz."):
    """Resistive law z(w) = (L(w)^T L(w) + K(w) - K(w)^T) w; z^T w >= 0 always."""
    n = np.shape(ad.value_of(w))[-1]
    packed_l = mlp_forward(l_spec, params, w, l_prefix)
    gamma = ad.matmat(ad.transpose2(assemble_lower_triangular(packed_l, n)),
                      assemble_lower_triangular(packed_l, n))
    if k_spec.output_dim > 0:
        k = assemble_lower_triangular(mlp_forward(k_spec, params, w, k_prefix), n, strict=True)
        gamma = ad.add(gamma, ad.sub(k, ad.transpose2(k)))
    return ad.matvec(gamma, w)


def r_head(spec: MLPSpec, params: Mapping, x, u, prefix: str = "LR."):
    """Symmetric PSD dissipation matrix R(x, u) = L^T L over the joint (x, u) port."""
    xu = ad.concat_last([x, u])
    n = np.shape(ad.value_of(xu))[-1]
    lower = assemble_lower_triangular(mlp_forward(spec, params, xu, prefix), n)
    return ad.matmat(ad.transpose2(lower), lower)


# ---------------------------------------------------------------------------
# parameter checkpoints: one JSON header line, then raw little-endian float64
# ---------------------------------------------------------------------------

def save_params(path, p: ParamVector, meta: dict | None = None) -> None:
    header = {
        "format": "phnn-params-v1",
        "segments": [[name, off, list(shape)] for name, (off, shape) in p.layout.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def load_params(path) -> tuple[ParamVector, dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        raw = f.read()
    if header.get("format") != "phnn-params-v1":
        raise ValueError(f"{path}: not a parameter checkpoint")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    layout = {name: (off, tuple(shape)) for name, off, shape in header["segments"]}
    return ParamVector(values, layout), header["meta"]
