"""Minimal automatic differentiation engine on float64 numpy arrays.

Two mechanisms, freely nestable:

* reverse mode: a flat tape of ``Node`` objects recorded while a scalar
  objective is evaluated; :func:`value_and_grad` replays it backwards to get
  parameter gradients.
* forward mode: ``Dual`` carriers (primal, tangent) pushed through the same
  primitives; :func:`directional_derivative` seeds one tangent direction.

Tangent components are ordinary values of the engine, so they may themselves
be ``Node`` objects.  This is what lets a loss contain state gradients and
Jacobian entries of a learned vector field and still be differentiated with
respect to the parameters by a single reverse pass.  Nested forward
derivatives are disambiguated by an integer level tag on each ``Dual``.

All primitives accept any mix of ``Dual``, ``Node``, numpy arrays and python
scalars, and broadcast like numpy.  Arithmetic is float64 throughout; the
engine performs no graph rewriting and targets small dense workloads.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "NumericFailure",
    "Node",
    "Dual",
    "value_of",
    "value_and_grad",
    "directional_derivative",
    "value_and_directional",
    "grad_last",
    "value_and_grad_last",
    "ParamVector",
    "AdamState",
    "adam_step",
    "PRIMITIVES",
]


class NumericFailure(RuntimeError):
    """A computation produced a non-finite value."""


# Active reverse tape (None outside value_and_grad) and forward-level counter.
_TAPE: list | None = None
_CHECK_FINITE = False
_LEVEL = 0


class Node:
    """One recorded value of the reverse graph.

    ``links`` is a tuple of ``(parent, vjp)`` pairs; a leaf has no links.
    """

    __slots__ = ("value", "links", "grad")

    def __init__(self, value, links=()):
        if _TAPE is None:
            raise RuntimeError("Node created outside a value_and_grad tape")
        self.value = value
        self.links = links
        self.grad = None
        _TAPE.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        return f"Node(shape={np.shape(self.value)})"

    # numpy must defer to our reflected operators
    __array_ufunc__ = None

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)


class Dual:
    """Forward-mode carrier: a primal with a directional derivative.

    ``tangent is None`` encodes a structurally zero tangent.  ``level``
    identifies which enclosing :func:`directional_derivative` call seeded it.
    """

    __slots__ = ("primal", "tangent", "level")

    def __init__(self, primal, tangent, level):
        self.primal = primal
        self.tangent = tangent
        self.level = level

    @property
    def shape(self):
        return np.shape(value_of(self.primal))

    def __repr__(self):
        return f"Dual(level={self.level}, shape={self.shape})"

    __array_ufunc__ = None

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)


def value_of(x):
    """Plain numpy value underneath any stack of Dual/Node wrappers."""
    while True:
        t = type(x)
        if t is Dual:
            x = x.primal
        elif t is Node:
            x = x.value
        else:
            return x


def _node(name, value, links):
    if _CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NumericFailure(f"non-finite result in primitive '{name}'")
    return Node(value, tuple(links))


def _raw(name, value):
    if _CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NumericFailure(f"non-finite result in primitive '{name}'")
    return value


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    gshape = np.shape(g)
    if gshape == shape:
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g if shape else np.float64(g)


def _parts2(a, b):
    """Split two operands at the highest active forward level."""
    la = a.level if type(a) is Dual else 0
    lb = b.level if type(b) is Dual else 0
    lvl = la if la >= lb else lb
    if la == lvl:
        ap, at = a.primal, a.tangent
    else:
        ap, at = a, None
    if lb == lvl:
        bp, bt = b.primal, b.tangent
    else:
        bp, bt = b, None
    return lvl, ap, at, bp, bt


def _parts1(a):
    return a.level, a.primal, a.tangent


def _parts3(a, b, c):
    la = a.level if type(a) is Dual else 0
    lb = b.level if type(b) is Dual else 0
    lc = c.level if type(c) is Dual else 0
    lvl = max(la, lb, lc)
    ap, at = (a.primal, a.tangent) if la == lvl else (a, None)
    bp, bt = (b.primal, b.tangent) if lb == lvl else (b, None)
    cp, ct = (c.primal, c.tangent) if lc == lvl else (c, None)
    return lvl, ap, at, bp, bt, cp, ct


def _tadd(x, y):
    if x is None:
        return y
    if y is None:
        return x
    return add(x, y)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    if type(a) is Dual or type(b) is Dual:
        lvl, ap, at, bp, bt = _parts2(a, b)
        return Dual(add(ap, bp), _tadd(at, bt), lvl)
    an, bn = type(a) is Node, type(b) is Node
    if an or bn:
        av = a.value if an else a
        bv = b.value if bn else b
        links = []
        if an:
            sa = np.shape(av)
            links.append((a, lambda g: _unbroadcast(g, sa)))
        if bn:
            sb = np.shape(bv)
            links.append((b, lambda g: _unbroadcast(g, sb)))
        return _node("add", av + bv, links)
    return _raw("add", a + b)


def sub(a, b):
    if type(a) is Dual or type(b) is Dual:
        lvl, ap, at, bp, bt = _parts2(a, b)
        if at is None:
            t = None if bt is None else neg(bt)
        elif bt is None:
            t = at
        else:
            t = sub(at, bt)
        return Dual(sub(ap, bp), t, lvl)
    an, bn = type(a) is Node, type(b) is Node
    if an or bn:
        av = a.value if an else a
        bv = b.value if bn else b
        links = []
        if an:
            sa = np.shape(av)
            links.append((a, lambda g: _unbroadcast(g, sa)))
        if bn:
            sb = np.shape(bv)
            links.append((b, lambda g: _unbroadcast(-g, sb)))
        return _node("sub", av - bv, links)
    return _raw("sub", a - b)


def neg(a):
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        return Dual(neg(ap), None if at is None else neg(at), lvl)
    if type(a) is Node:
        return _node("neg", -a.value, ((a, lambda g: -g),))
    return _raw("neg", -a)


def mul(a, b):
    if type(a) is Dual or type(b) is Dual:
        lvl, ap, at, bp, bt = _parts2(a, b)
        t1 = None if at is None else mul(at, bp)
        t2 = None if bt is None else mul(ap, bt)
        return Dual(mul(ap, bp), _tadd(t1, t2), lvl)
    an, bn = type(a) is Node, type(b) is Node
    if an or bn:
        av = a.value if an else a
        bv = b.value if bn else b
        links = []
        if an:
            sa = np.shape(av)
            links.append((a, lambda g: _unbroadcast(g * bv, sa)))
        if bn:
            sb = np.shape(bv)
            links.append((b, lambda g: _unbroadcast(g * av, sb)))
        return _node("mul", av * bv, links)
    return _raw("mul", a * b)


def div(a, b):
    if type(a) is Dual or type(b) is Dual:
        lvl, ap, at, bp, bt = _parts2(a, b)
        q = div(ap, bp)
        t1 = None if at is None else div(at, bp)
        t2 = None if bt is None else neg(div(mul(q, bt), bp))
        return Dual(q, _tadd(t1, t2), lvl)
    an, bn = type(a) is Node, type(b) is Node
    if an or bn:
        av = a.value if an else a
        bv = b.value if bn else b
        inv = 1.0 / bv
        out = av * inv
        links = []
        if an:
            sa = np.shape(av)
            links.append((a, lambda g: _unbroadcast(g * inv, sa)))
        if bn:
            sb = np.shape(bv)
            links.append((b, lambda g: _unbroadcast(-g * out * inv, sb)))
        return _node("div", out, links)
    return _raw("div", a / b)


def tanh(a):
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        y = tanh(ap)
        t = None if at is None else mul(sub(1.0, mul(y, y)), at)
        return Dual(y, t, lvl)
    if type(a) is Node:
        y = np.tanh(a.value)
        return _node("tanh", y, ((a, lambda g: g * (1.0 - y * y)),))
    return _raw("tanh", np.tanh(a))


def sqrt(a):
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        y = sqrt(ap)
        t = None if at is None else div(at, mul(2.0, y))
        return Dual(y, t, lvl)
    if type(a) is Node:
        y = np.sqrt(a.value)
        return _node("sqrt", y, ((a, lambda g: g * (0.5 / y)),))
    return _raw("sqrt", np.sqrt(a))


def absolute(a):
    # derivative at 0 taken as 0 (subgradient choice used by the L1 loss)
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        s = np.sign(value_of(ap))
        t = None if at is None else mul(s, at)
        return Dual(absolute(ap), t, lvl)
    if type(a) is Node:
        s = np.sign(a.value)
        return _node("abs", np.abs(a.value), ((a, lambda g: g * s),))
    return _raw("abs", np.abs(a))


def dot(x, w):
    """Contract the last axis of ``x`` with the second-to-last of ``w``.

    ``w`` is either a shared (n, m) matrix or a stack (..., n, m) matching
    the leading axes of ``x``.
    """
    if type(x) is Dual or type(w) is Dual:
        lvl, xp, xt, wp, wt = _parts2(x, w)
        t1 = None if xt is None else dot(xt, wp)
        t2 = None if wt is None else dot(xp, wt)
        return Dual(dot(xp, wp), _tadd(t1, t2), lvl)
    xn, wn = type(x) is Node, type(w) is Node
    if xn or wn:
        xv = x.value if xn else x
        wv = w.value if wn else w
        out = _dot_raw(xv, wv)
        links = []
        if xn:
            sx = np.shape(xv)
            if wv.ndim == 2:
                wt_ = wv.T
                links.append((x, lambda g: _unbroadcast(g @ wt_, sx)))
            else:
                wt_ = np.swapaxes(wv, -1, -2)
                links.append(
                    (x, lambda g: _unbroadcast((g[..., None, :] @ wt_)[..., 0, :], sx))
                )
        if wn:
            sw = np.shape(wv)
            if wv.ndim == 2:
                if xv.ndim == 2:
                    links.append((w, lambda g: xv.T @ g))
                else:
                    ax = tuple(range(xv.ndim - 1))
                    links.append((w, lambda g: np.tensordot(xv, g, axes=(ax, ax))))
            else:
                links.append(
                    (w, lambda g: _unbroadcast(xv[..., :, None] @ g[..., None, :], sw))
                )
        return _node("dot", out, links)
    return _raw("dot", _dot_raw(np.asarray(x), np.asarray(w)))


def _dot_raw(xv, wv):
    if wv.ndim == 2:
        return xv @ wv
    return (xv[..., None, :] @ wv)[..., 0, :]


def matvec(a, x):
    """(..., n, m) @ (..., m) -> (..., n)."""
    if type(a) is Dual or type(x) is Dual:
        lvl, ap, at, xp, xt = _parts2(a, x)
        t1 = None if at is None else matvec(at, xp)
        t2 = None if xt is None else matvec(ap, xt)
        return Dual(matvec(ap, xp), _tadd(t1, t2), lvl)
    an, xn = type(a) is Node, type(x) is Node
    if an or xn:
        av = a.value if an else np.asarray(a)
        xv = x.value if xn else np.asarray(x)
        out = (av @ xv[..., None])[..., 0]
        links = []
        if an:
            sa = np.shape(av)
            links.append(
                (a, lambda g: _unbroadcast(g[..., :, None] * xv[..., None, :], sa))
            )
        if xn:
            sx = np.shape(xv)
            at_ = np.swapaxes(av, -1, -2)
            links.append(
                (x, lambda g: _unbroadcast((at_ @ g[..., None])[..., 0], sx))
            )
        return _node("matvec", out, links)
    return _raw("matvec", (np.asarray(a) @ np.asarray(x)[..., None])[..., 0])


def matmat(a, b):
    """Matrix product over the last two axes, broadcasting the rest."""
    if type(a) is Dual or type(b) is Dual:
        lvl, ap, at, bp, bt = _parts2(a, b)
        t1 = None if at is None else matmat(at, bp)
        t2 = None if bt is None else matmat(ap, bt)
        return Dual(matmat(ap, bp), _tadd(t1, t2), lvl)
    an, bn = type(a) is Node, type(b) is Node
    if an or bn:
        av = a.value if an else np.asarray(a)
        bv = b.value if bn else np.asarray(b)
        links = []
        if an:
            sa = np.shape(av)
            bt_ = np.swapaxes(bv, -1, -2)
            links.append((a, lambda g: _unbroadcast(g @ bt_, sa)))
        if bn:
            sb = np.shape(bv)
            at_ = np.swapaxes(av, -1, -2)
            links.append((b, lambda g: _unbroadcast(at_ @ g, sb)))
        return _node("matmat", av @ bv, links)
    return _raw("matmat", np.asarray(a) @ np.asarray(b))


def transpose2(a):
    """Swap the last two axes."""
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        return Dual(transpose2(ap), None if at is None else transpose2(at), lvl)
    if type(a) is Node:
        return _node(
            "transpose2",
            np.swapaxes(a.value, -1, -2),
            ((a, lambda g: np.swapaxes(g, -1, -2)),),
        )
    return _raw("transpose2", np.swapaxes(a, -1, -2))


def sum_last(a):
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        return Dual(sum_last(ap), None if at is None else sum_last(at), lvl)
    if type(a) is Node:
        sa = np.shape(a.value)
        return _node(
            "sum_last",
            a.value.sum(axis=-1),
            ((a, lambda g: np.broadcast_to(np.asarray(g)[..., None], sa)),),
        )
    return _raw("sum_last", np.asarray(a).sum(axis=-1))


def mean_all(a):
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        return Dual(mean_all(ap), None if at is None else mean_all(at), lvl)
    if type(a) is Node:
        sa = np.shape(a.value)
        n = a.value.size
        return _node(
            "mean_all",
            a.value.mean(),
            ((a, lambda g: np.full(sa, g / n)),),
        )
    return _raw("mean_all", np.mean(a))


def concat_last(parts):
    parts = list(parts)
    if any(type(p) is Dual for p in parts):
        lvl = max(p.level for p in parts if type(p) is Dual)
        prim, tang, seen = [], [], False
        for p in parts:
            if type(p) is Dual and p.level == lvl:
                prim.append(p.primal)
                tang.append(p.tangent)
                seen = seen or p.tangent is not None
            else:
                prim.append(p)
                tang.append(None)
        if seen:
            filled = [
                t if t is not None else np.zeros(np.shape(value_of(p)))
                for t, p in zip(tang, prim)
            ]
            t = concat_last(filled)
        else:
            t = None
        return Dual(concat_last(prim), t, lvl)
    if any(type(p) is Node for p in parts):
        vals = [p.value if type(p) is Node else np.asarray(p) for p in parts]
        vals = _widen(vals)
        out = np.concatenate(vals, axis=-1)
        links = []
        off = 0
        for p, v in zip(parts, vals):
            w = v.shape[-1]
            if type(p) is Node:
                sp = np.shape(p.value)
                lo = off
                links.append(
                    (p, lambda g, lo=lo, w=w, sp=sp: _unbroadcast(g[..., lo:lo + w], sp))
                )
            off += w
        return _node("concat_last", out, links)
    return _raw("concat_last", np.concatenate(_widen([np.asarray(p) for p in parts]), axis=-1))


def _widen(vals):
    """Broadcast leading axes of a list of arrays against each other."""
    lead = np.broadcast_shapes(*[v.shape[:-1] for v in vals])
    return [
        np.broadcast_to(v, lead + v.shape[-1:]) if v.shape[:-1] != lead else v
        for v in vals
    ]


def stack_last(parts):
    """Stack equal-shaped tensors along a new final axis."""
    parts = list(parts)
    if any(type(p) is Dual for p in parts):
        lvl = max(p.level for p in parts if type(p) is Dual)
        prim, tang, seen = [], [], False
        for p in parts:
            if type(p) is Dual and p.level == lvl:
                prim.append(p.primal)
                tang.append(p.tangent)
                seen = seen or p.tangent is not None
            else:
                prim.append(p)
                tang.append(None)
        if seen:
            filled = [
                t if t is not None else np.zeros(np.shape(value_of(p)))
                for t, p in zip(tang, prim)
            ]
            t = stack_last(filled)
        else:
            t = None
        return Dual(stack_last(prim), t, lvl)
    if any(type(p) is Node for p in parts):
        vals = [p.value if type(p) is Node else np.asarray(p) for p in parts]
        lead = np.broadcast_shapes(*[v.shape for v in vals])
        vals = [np.broadcast_to(v, lead) for v in vals]
        out = np.stack(vals, axis=-1)
        links = []
        for i, p in enumerate(parts):
            if type(p) is Node:
                sp = np.shape(p.value)
                links.append((p, lambda g, i=i, sp=sp: _unbroadcast(g[..., i], sp)))
        return _node("stack_last", out, links)
    vals = [np.asarray(p) for p in parts]
    lead = np.broadcast_shapes(*[v.shape for v in vals])
    return _raw("stack_last", np.stack([np.broadcast_to(v, lead) for v in vals], axis=-1))


def expand_last(a):
    """Append a trailing axis of size 1."""
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        return Dual(expand_last(ap), None if at is None else expand_last(at), lvl)
    if type(a) is Node:
        return _node("expand_last", a.value[..., None], ((a, lambda g: g[..., 0]),))
    return _raw("expand_last", np.asarray(a)[..., None])


def index_last(a, i):
    """Select index ``i`` of the last axis, dropping it."""
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        return Dual(index_last(ap, i), None if at is None else index_last(at, i), lvl)
    if type(a) is Node:
        sa = np.shape(a.value)

        def vjp(g):
            out = np.zeros(sa)
            out[..., i] = g
            return out

        return _node("index_last", a.value[..., i], ((a, vjp),))
    return _raw("index_last", np.asarray(a)[..., i])


def slice_last(a, lo, hi):
    if type(a) is Dual:
        lvl, ap, at = _parts1(a)
        return Dual(slice_last(ap, lo, hi), None if at is None else slice_last(at, lo, hi), lvl)
    if type(a) is Node:
        sa = np.shape(a.value)

        def vjp(g):
            out = np.zeros(sa)
            out[..., lo:hi] = g
            return out

        return _node("slice_last", a.value[..., lo:hi], ((a, vjp),))
    return _raw("slice_last", np.asarray(a)[..., lo:hi])


_TRIL_CACHE: dict[tuple[int, bool], tuple[np.ndarray, np.ndarray]] = {}


def _tril_idx(n, strict):
    key = (n, strict)
    idx = _TRIL_CACHE.get(key)
    if idx is None:
        idx = _TRIL_CACHE[key] = np.tril_indices(n, -1 if strict else 0)
    return idx


def tril_from_packed(v, n, strict=False):
    """Scatter a packed row-major (strictly) lower triangle into (..., n, n)."""
    rows, cols = _tril_idx(n, strict)
    m = len(rows)
    if type(v) is Dual:
        lvl, vp, vt = _parts1(v)
        t = None if vt is None else tril_from_packed(vt, n, strict)
        return Dual(tril_from_packed(vp, n, strict), t, lvl)
    if type(v) is Node:
        vv = v.value
        if vv.shape[-1] != m:
            raise ValueError(f"packed length {vv.shape[-1]} != {m} for n={n}, strict={strict}")
        out = np.zeros(vv.shape[:-1] + (n, n))
        out[..., rows, cols] = vv
        return _node("tril_from_packed", out, ((v, lambda g: g[..., rows, cols]),))
    vv = np.asarray(v, dtype=np.float64)
    if vv.shape[-1] != m:
        raise ValueError(f"packed length {vv.shape[-1]} != {m} for n={n}, strict={strict}")
    out = np.zeros(vv.shape[:-1] + (n, n))
    out[..., rows, cols] = vv
    return _raw("tril_from_packed", out)


def where(cond, a, b):
    """Select by a plain boolean array; no derivative flows through ``cond``."""
    cond = np.asarray(value_of(cond))
    if type(a) is Dual or type(b) is Dual:
        lvl, ap, at, bp, bt = _parts2(a, b)
        if at is None and bt is None:
            t = None
        else:
            za = at if at is not None else np.zeros(np.shape(value_of(ap)))
            zb = bt if bt is not None else np.zeros(np.shape(value_of(bp)))
            t = where(cond, za, zb)
        return Dual(where(cond, ap, bp), t, lvl)
    an, bn = type(a) is Node, type(b) is Node
    if an or bn:
        av = a.value if an else a
        bv = b.value if bn else b
        links = []
        if an:
            sa = np.shape(av)
            links.append((a, lambda g: _unbroadcast(np.where(cond, g, 0.0), sa)))
        if bn:
            sb = np.shape(bv)
            links.append((b, lambda g: _unbroadcast(np.where(cond, 0.0, g), sb)))
        return _node("where", np.where(cond, av, bv), links)
    return _raw("where", np.where(cond, a, b))


def maximum(a, b):
    """Elementwise max; ties route the derivative to the first argument."""
    mask = value_of(a) >= value_of(b)
    return where(mask, a, b)


def minimum(a, b):
    """Elementwise min; ties route the derivative to the first argument."""
    mask = value_of(a) <= value_of(b)
    return where(mask, a, b)


def affine(x, w, b):
    """Fused dot(x, w) + b."""
    if type(x) is Dual or type(w) is Dual or type(b) is Dual:
        return add(dot(x, w), b)
    xn, wn, bn = type(x) is Node, type(w) is Node, type(b) is Node
    if xn or wn or bn:
        xv = x.value if xn else np.asarray(x)
        wv = w.value if wn else np.asarray(w)
        bv = b.value if bn else np.asarray(b)
        out = _dot_raw(xv, wv) + bv
        links = _affine_links(x, w, b, xv, wv, bv, None)
        return _node("affine", out, links)
    return _raw("affine", _dot_raw(np.asarray(x), np.asarray(w)) + np.asarray(b))


def dense_tanh(x, w, b):
    """Fused tanh(dot(x, w) + b) layer."""
    if type(x) is Dual or type(w) is Dual or type(b) is Dual:
        lvl, xp, xt, wp, wt, bp, bt = _parts3(x, w, b)
        y = dense_tanh(xp, wp, bp)
        terms = None
        if xt is not None:
            terms = _tadd(terms, dot(xt, wp))
        if wt is not None:
            terms = _tadd(terms, dot(xp, wt))
        if bt is not None:
            terms = _tadd(terms, bt)
        t = None if terms is None else mul(sub(1.0, mul(y, y)), terms)
        return Dual(y, t, lvl)
    xn, wn, bn = type(x) is Node, type(w) is Node, type(b) is Node
    if xn or wn or bn:
        xv = x.value if xn else np.asarray(x)
        wv = w.value if wn else np.asarray(w)
        bv = b.value if bn else np.asarray(b)
        y = np.tanh(_dot_raw(xv, wv) + bv)
        links = _affine_links(x, w, b, xv, wv, bv, y)
        return _node("dense_tanh", y, links)
    return _raw("dense_tanh", np.tanh(_dot_raw(np.asarray(x), np.asarray(w)) + np.asarray(b)))


def _affine_links(x, w, b, xv, wv, bv, y):
    """VJP links shared by affine and dense_tanh (y=None for the linear case).

    The upstream gradient is pre-scaled by tanh' once and shared by all three
    inputs through a mutable cell.
    """
    cell = {}

    def upstream(g):
        u = cell.get("u")
        if u is None:
            u = g if y is None else g * (1.0 - y * y)
            cell["u"] = u
        return u

    links = []
    if type(x) is Node:
        sx = np.shape(xv)
        if wv.ndim == 2:
            wt_ = wv.T
            links.append((x, lambda g: _unbroadcast(upstream(g) @ wt_, sx)))
        else:
            wt_ = np.swapaxes(wv, -1, -2)
            links.append(
                (x, lambda g: _unbroadcast((upstream(g)[..., None, :] @ wt_)[..., 0, :], sx))
            )
    if type(w) is Node:
        sw = np.shape(wv)
        if wv.ndim == 2:
            if xv.ndim == 2:
                links.append((w, lambda g: xv.T @ upstream(g)))
            else:
                ax = tuple(range(xv.ndim - 1))
                links.append((w, lambda g: np.tensordot(xv, upstream(g), axes=(ax, ax))))
        else:
            links.append(
                (w, lambda g: _unbroadcast(xv[..., :, None] @ upstream(g)[..., None, :], sw))
            )
    if type(b) is Node:
        sb = np.shape(bv)
        links.append((b, lambda g: _unbroadcast(upstream(g), sb)))
    return links


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "mul": mul,
    "div": div,
    "tanh": tanh,
    "sqrt": sqrt,
    "abs": absolute,
    "dot": dot,
    "matvec": matvec,
    "matmat": matmat,
    "transpose2": transpose2,
    "sum_last": sum_last,
    "mean_all": mean_all,
    "concat_last": concat_last,
    "stack_last": stack_last,
    "expand_last": expand_last,
    "index_last": index_last,
    "slice_last": slice_last,
    "tril_from_packed": tril_from_packed,
    "where": where,
    "maximum": maximum,
    "minimum": minimum,
    "affine": affine,
    "dense_tanh": dense_tanh,
}


# ---------------------------------------------------------------------------
# forward mode entry points
# ---------------------------------------------------------------------------

def directional_derivative(f, x, v):
    """Derivative of ``f`` at ``x`` along ``v``: (d/de) f(x + e*v) at e=0.

    ``v`` must broadcast to the shape of ``x``.  The result is built from
    engine primitives, so it stays differentiable with respect to any
    parameters captured inside ``f``.
    """
    xs = np.shape(value_of(x))
    vs = np.shape(value_of(v))
    try:
        if np.broadcast_shapes(vs, xs) != xs:
            raise ValueError
    except ValueError:
        raise ValueError(f"tangent shape {vs} does not broadcast to state shape {xs}") from None
    global _LEVEL
    _LEVEL += 1
    lvl = _LEVEL
    try:
        out = f(Dual(x, v, lvl))
    finally:
        _LEVEL -= 1
    if type(out) is Dual and out.level == lvl:
        if out.tangent is None:
            return np.zeros(np.shape(value_of(out.primal)))
        return out.tangent
    return np.zeros(np.shape(value_of(out)))


def value_and_directional(f, x, v):
    """Primal value and directional derivative from a single forward pass."""
    xs = np.shape(value_of(x))
    vs = np.shape(value_of(v))
    if np.broadcast_shapes(vs, xs) != xs:
        raise ValueError(f"tangent shape {vs} does not broadcast to state shape {xs}")
    global _LEVEL
    _LEVEL += 1
    lvl = _LEVEL
    try:
        out = f(Dual(x, v, lvl))
    finally:
        _LEVEL -= 1
    if type(out) is Dual and out.level == lvl:
        t = out.tangent
        if t is None:
            t = np.zeros(np.shape(value_of(out.primal)))
        return out.primal, t
    return out, np.zeros(np.shape(value_of(out)))


def grad_last(f, x, n):
    """Stack the ``n`` partial derivatives of ``f`` along the last axis of ``x``.

    ``f`` maps (..., n) to (...); the result has the shape of ``x``.
    """
    eye = np.eye(n)
    cols = [directional_derivative(f, x, eye[j]) for j in range(n)]
    return stack_last(cols)


def value_and_grad_last(f, x, n):
    """Like :func:`grad_last` but also returns the primal, saving one pass."""
    eye = np.eye(n)
    val, c0 = value_and_directional(f, x, eye[0])
    cols = [c0] + [directional_derivative(f, x, eye[j]) for j in range(1, n)]
    return val, stack_last(cols)


# ---------------------------------------------------------------------------
# parameters, reverse mode and Adam
# ---------------------------------------------------------------------------

class ParamVector:
    """Flat float64 parameter storage with a named-segment layout.

    ``layout`` maps a segment name to ``(offset, shape)``; segments are
    contiguous, disjoint and cover the whole flat array.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: dict[str, tuple[int, tuple[int, ...]]]):
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must be finite")
        covered = 0
        last = 0
        for name, (off, shape) in layout.items():
            if off != last:
                raise ValueError(f"segment '{name}' is not contiguous at offset {off}")
            n = int(np.prod(shape, dtype=int))
            covered += n
            last = off + n
        if covered != values.size:
            raise ValueError("segments do not cover the parameter vector")
        self.values = values
        self.layout = layout

    @classmethod
    def build(cls, segments: Mapping[str, np.ndarray]) -> "ParamVector":
        layout = {}
        chunks = []
        off = 0
        for name, arr in segments.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout[name] = (off, arr.shape)
            chunks.append(arr.ravel())
            off += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    def names(self):
        return self.layout.keys()

    @property
    def size(self) -> int:
        return self.values.size

    def array(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        n = int(np.prod(shape, dtype=int))
        return self.values[off:off + n].reshape(shape)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def segment_of(self, flat_index: int) -> str:
        for name, (off, shape) in self.layout.items():
            if off <= flat_index < off + int(np.prod(shape, dtype=int)):
                return name
        raise IndexError(flat_index)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def value_and_grad(f, p: ParamVector):
    """Evaluate ``f(leaves)`` and its gradient with respect to ``p``.

    ``f`` receives a mapping from segment name to a leaf tensor shaped like
    that segment, and must return a scalar.  The returned gradient is a flat
    float64 array matching ``p.values``.  Non-finite intermediates raise
    :class:`NumericFailure` naming the offending primitive (found by a
    checked re-run, so the fast path stays unchecked).
    """
    global _TAPE
    if _TAPE is not None:
        raise RuntimeError("value_and_grad does not nest")
    tape: list[Node] = []
    _TAPE = tape
    try:
        leaves = {name: Node(p.array(name)) for name in p.names()}
        out = f(leaves)
        if type(out) is Dual:
            raise TypeError("objective returned a forward-mode Dual, expected a scalar")
        if type(out) is not Node:
            # objective did not touch the parameters
            val = float(out)
            _check_scalar_finite(f, p, val)
            return val, np.zeros(p.size)
        val = float(out.value)
        if np.ndim(out.value) != 0:
            raise TypeError("objective must be scalar")
        if not np.isfinite(val):
            _recheck(f, p)
            raise NumericFailure("non-finite objective value")
        _backward(out, tape)
        segs = []
        for name in p.names():
            g = leaves[name].grad
            if g is None:
                g = np.zeros(p.layout[name][1])
            segs.append(np.asarray(g, dtype=np.float64).ravel())
        grad = np.concatenate(segs) if segs else np.zeros(0)
        if not np.all(np.isfinite(grad)):
            _recheck(f, p)
            raise NumericFailure("non-finite gradient in backward pass")
        return val, grad
    finally:
        _TAPE = None


def _check_scalar_finite(f, p, val):
    if not np.isfinite(val):
        raise NumericFailure("non-finite objective value")


def _recheck(f, p):
    """Re-run the forward pass with per-primitive finiteness checks."""
    global _TAPE, _CHECK_FINITE
    _TAPE = []
    _CHECK_FINITE = True
    try:
        leaves = {name: Node(p.array(name)) for name in p.names()}
        f(leaves)
    finally:
        _CHECK_FINITE = False
        _TAPE = None


def _backward(out: Node, tape: list[Node]):
    out.grad = np.float64(1.0)
    for node in reversed(tape):
        g = node.grad
        if g is None or not node.links:
            continue
        for parent, vjp in node.links:
            pg = vjp(g)
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
        node.grad = None


@dataclass
class AdamState:
    """Adam moment estimates for one flat parameter vector."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def fresh(cls, n: int, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps, learning_rate)


def adam_step(p: ParamVector, g: np.ndarray, s: AdamState) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update; returns the new parameters and state."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != p.values.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {p.values.shape}")
    if s.first_moment.shape != p.values.shape:
        raise ValueError("optimizer state does not match parameter vector")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NumericFailure(f"non-finite gradient in segment '{p.segment_of(bad)}'")
    t = s.step_count + 1
    m = s.beta1 * s.first_moment + (1.0 - s.beta1) * g
    v = s.beta2 * s.second_moment + (1.0 - s.beta2) * (g * g)
    m_hat = m / (1.0 - s.beta1 ** t)
    v_hat = v / (1.0 - s.beta2 ** t)
    new_values = p.values - s.learning_rate * m_hat / (np.sqrt(v_hat) + s.eps)
    return p.with_values(new_values), replace(s, first_moment=m, second_moment=v, step_count=t)
