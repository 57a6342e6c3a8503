"""Sound interval arithmetic and a branch-and-bound decision engine.

Two layers live here:

* Low-level kernels operating on parallel ``(lo, hi)`` float64 arrays.
  Every kernel returns an enclosure of the exact real-arithmetic image
  and compensates for floating-point rounding by nudging results
  outward with ``np.nextafter`` (one ulp for correctly-rounded ops,
  a few ulps for libm transcendentals) plus an accumulated-error bound
  for dot products.  Arrays let the branch-and-bound loop evaluate
  whole chunks of boxes at once, which is what makes the verifier fast
  enough in pure Python.

* A public API: `Interval`, `Box`, natural interval extension of
  expression trees, interval propagation through tanh networks
  (values and input gradients), and `bnb_verify`, a depth-first
  splitter that decides universally quantified implications over a box
  up to a width threshold ``delta`` (the counterpart of a delta-sat
  query to an SMT solver).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import expr as ex

__all__ = [
    "Interval", "Box", "Condition", "ScalarFn", "ExprFn",
    "Certified", "Falsified", "Unknown", "VerifyOutcome",
    "BudgetExhausted", "UnsupportedPrimitive",
    "eval_expr_interval", "eval_net_interval", "eval_net_grad_interval",
    "bnb_verify",
]

_EPS = np.finfo(np.float64).eps  # 2^-52
# nextafter steps: 1 covers correctly-rounded +-*/sqrt; libm tanh/exp/log
# are not correctly rounded, 4 ulps is a comfortable cover for glibc/musl.
_ULPS_ARITH = 1
_ULPS_LIBM = 4


class UnsupportedPrimitive(TypeError):
    """A condition component has no symbolic form for export."""


# ---------------------------------------------------------------------------
# Array kernels.  All take/return (lo, hi) pairs of equal-shape arrays.
# ---------------------------------------------------------------------------

def _down(a: np.ndarray, ulps: int) -> np.ndarray:
    for _ in range(ulps):
        a = np.nextafter(a, -np.inf)
    return a


def _up(a: np.ndarray, ulps: int) -> np.ndarray:
    for _ in range(ulps):
        a = np.nextafter(a, np.inf)
    return a


def _widen(lo, hi, ulps=_ULPS_ARITH):
    return _down(lo, ulps), _up(hi, ulps)


def kadd(alo, ahi, blo, bhi):
    return _widen(alo + blo, ahi + bhi)


def ksub(alo, ahi, blo, bhi):
    return _widen(alo - bhi, ahi - blo)


def kneg(alo, ahi):
    return -ahi, -alo


def kmul(alo, ahi, blo, bhi):
    p1, p2, p3, p4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    return _widen(lo, hi)


def kscale(c: float, alo, ahi):
    """Multiply by a point scalar."""
    if c >= 0:
        return _widen(c * alo, c * ahi)
    return _widen(c * ahi, c * alo)


def kdiv(alo, ahi, blo, bhi):
    if np.any((blo <= 0.0) & (bhi >= 0.0)):
        raise ex.DomainError("division by an interval containing zero")
    q1, q2, q3, q4 = alo / blo, alo / bhi, ahi / blo, ahi / bhi
    lo = np.minimum(np.minimum(q1, q2), np.minimum(q3, q4))
    hi = np.maximum(np.maximum(q1, q2), np.maximum(q3, q4))
    return _widen(lo, hi)


def kpow(alo, ahi, n: int):
    if n == 0:
        return np.ones_like(alo), np.ones_like(ahi)
    if n == 1:
        return alo.copy(), ahi.copy()
    pl, ph = alo ** n, ahi ** n
    if n % 2 == 1:
        return _widen(pl, ph, _ULPS_LIBM)
    lo = np.where((alo <= 0.0) & (ahi >= 0.0), 0.0, np.minimum(pl, ph))
    hi = np.maximum(pl, ph)
    lo2, hi2 = _widen(lo, hi, _ULPS_LIBM)
    return np.maximum(lo2, 0.0), hi2


def ktanh(alo, ahi):
    lo, hi = _widen(np.tanh(alo), np.tanh(ahi), _ULPS_LIBM)
    return np.maximum(lo, -1.0), np.minimum(hi, 1.0)


def kexp(alo, ahi):
    lo, hi = _widen(np.exp(alo), np.exp(ahi), _ULPS_LIBM)
    return np.maximum(lo, 0.0), hi


def kln(alo, ahi):
    if np.any(alo <= 0.0):
        raise ex.DomainError("ln over an interval reaching <= 0")
    return _widen(np.log(alo), np.log(ahi), _ULPS_LIBM)


def ksqrt(alo, ahi):
    lo = np.sqrt(np.maximum(alo, 0.0))
    hi = np.sqrt(np.maximum(ahi, 0.0))
    lo, hi = _widen(lo, hi)
    return np.maximum(lo, 0.0), hi


def kabs(alo, ahi):
    lo = np.where((alo <= 0.0) & (ahi >= 0.0), 0.0, np.minimum(np.abs(alo), np.abs(ahi)))
    hi = np.maximum(np.abs(alo), np.abs(ahi))
    return lo, hi


def _dot_err(absmax_sum: np.ndarray, k_terms: int) -> np.ndarray:
    # forward-error bound for k rounded products plus their rounded sum
    return (2 * k_terms + 4) * _EPS * absmax_sum + 1e-300


def kaffine(W: np.ndarray, b: Optional[np.ndarray], alo, ahi):
    """Interval image of x -> W x + b for a point matrix W (out, in).

    ``alo, ahi``: (..., in) -> returns (..., out).
    """
    Wp = np.maximum(W, 0.0)
    Wn = np.minimum(W, 0.0)
    lo = alo @ Wp.T + ahi @ Wn.T
    hi = ahi @ Wp.T + alo @ Wn.T
    if b is not None:
        lo = lo + b
        hi = hi + b
    absmax = np.maximum(np.abs(alo), np.abs(ahi))
    err = _dot_err(absmax @ np.abs(W).T + (np.abs(b) if b is not None else 0.0), W.shape[1])
    return lo - err, hi + err


def kmatmul_interval(W: np.ndarray, jlo, jhi):
    """Point matrix W (out, mid) times interval matrix (K, mid, n)."""
    Wp = np.maximum(W, 0.0)
    Wn = np.minimum(W, 0.0)
    lo = np.einsum("om,kmn->kon", Wp, jlo) + np.einsum("om,kmn->kon", Wn, jhi)
    hi = np.einsum("om,kmn->kon", Wp, jhi) + np.einsum("om,kmn->kon", Wn, jlo)
    absmax = np.maximum(np.abs(jlo), np.abs(jhi))
    err = _dot_err(np.einsum("om,kmn->kon", np.abs(W), absmax), W.shape[1])
    return lo - err, hi + err


def ksum(alo, ahi, axis: int):
    lo = np.sum(alo, axis=axis)
    hi = np.sum(ahi, axis=axis)
    absmax_sum = np.sum(np.maximum(np.abs(alo), np.abs(ahi)), axis=axis)
    err = _dot_err(absmax_sum, alo.shape[axis])
    return lo - err, hi + err


# ---------------------------------------------------------------------------
# Public value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError(f"interval bounds must be finite: [{self.lo}, {self.hi}]")
        if self.lo > self.hi:
            raise ValueError(f"empty interval: [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


class Box:
    """An axis-aligned box: per-axis closed intervals, immutable."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        lo = np.asarray(lo, dtype=float).copy()
        hi = np.asarray(hi, dtype=float).copy()
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size == 0:
            raise ValueError("Box needs matching non-empty 1-d bounds")
        if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("Box bounds must be finite with lo <= hi")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_bounds(cls, bounds: Sequence[Sequence[float]]) -> "Box":
        arr = np.asarray(bounds, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def interval(self, i: int) -> Interval:
        return Interval(float(self.lo[i]), float(self.hi[i]))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def corners(self) -> np.ndarray:
        n = self.dim
        idx = np.indices((2,) * n).reshape(n, -1).T
        return np.where(idx == 0, self.lo, self.hi)

    def __repr__(self):
        parts = ", ".join(f"[{l:g}, {h:g}]" for l, h in zip(self.lo, self.hi))
        return f"Box({parts})"

    def __eq__(self, other):
        return isinstance(other, Box) and np.array_equal(self.lo, other.lo) \
            and np.array_equal(self.hi, other.hi)


# ---------------------------------------------------------------------------
# Natural interval extension of expressions
# ---------------------------------------------------------------------------

def expr_interval_many(e: ex.Expr, lo: np.ndarray, hi: np.ndarray):
    """Enclosure of e over each of K boxes given as (K, n) bound arrays."""
    if isinstance(e, ex.Constant):
        v = np.full(lo.shape[0], e.value)
        return v, v.copy()
    if isinstance(e, ex.Var):
        return lo[:, e.index].copy(), hi[:, e.index].copy()
    if isinstance(e, ex.Add):
        return kadd(*expr_interval_many(e.left, lo, hi), *expr_interval_many(e.right, lo, hi))
    if isinstance(e, ex.Sub):
        return ksub(*expr_interval_many(e.left, lo, hi), *expr_interval_many(e.right, lo, hi))
    if isinstance(e, ex.Mul):
        return kmul(*expr_interval_many(e.left, lo, hi), *expr_interval_many(e.right, lo, hi))
    if isinstance(e, ex.Div):
        return kdiv(*expr_interval_many(e.left, lo, hi), *expr_interval_many(e.right, lo, hi))
    if isinstance(e, ex.Neg):
        return kneg(*expr_interval_many(e.arg, lo, hi))
    if isinstance(e, ex.IntPow):
        return kpow(*expr_interval_many(e.base, lo, hi), e.exponent)
    if isinstance(e, ex.Tanh):
        return ktanh(*expr_interval_many(e.arg, lo, hi))
    if isinstance(e, ex.Exp):
        return kexp(*expr_interval_many(e.arg, lo, hi))
    if isinstance(e, ex.Ln):
        return kln(*expr_interval_many(e.arg, lo, hi))
    raise TypeError(f"not an Expr node: {e!r}")


def eval_expr_interval(e: ex.Expr, box: Box) -> Interval:
    """Natural interval extension with outward rounding over one box."""
    lo, hi = expr_interval_many(e, box.lo[None, :], box.hi[None, :])
    return Interval(float(lo[0]), float(hi[0]))


# ---------------------------------------------------------------------------
# Interval propagation through tanh MLPs (duck-typed: needs .weights,
# .biases as lists of (out, in) / (out,) float arrays, tanh hidden layers,
# identity output).
# ---------------------------------------------------------------------------

def _net_value_interval(net, alo: np.ndarray, ahi: np.ndarray):
    """Natural layerwise value enclosure only (no jacobian)."""
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        alo, ahi = kaffine(W, b, alo, ahi)
        if i < last:
            alo, ahi = ktanh(alo, ahi)
    return alo[:, 0], ahi[:, 0]


def net_interval_many(net, lo: np.ndarray, hi: np.ndarray, want_grad: bool = False,
                      mean_value: bool = True):
    """Interval enclosures of a tanh network over K boxes.

    Returns ``(vlo, vhi)`` of shape (K,), and when ``want_grad`` also
    ``(glo, ghi)`` of shape (K, n) enclosing the input gradient.

    The value enclosure is the layerwise natural propagation, optionally
    intersected with the mean-value form  W(c) + grad(B) . (B - c),
    which is much tighter on small boxes.  The center value W(c) is
    itself enclosed by a degenerate-box pass so the mean-value bound
    stays sound under floating point.
    """
    n_in = lo.shape[1]
    alo, ahi = lo, hi
    need_j = want_grad or mean_value
    if need_j:
        eye = np.broadcast_to(np.eye(n_in), (lo.shape[0], n_in, n_in)).copy()
        jlo, jhi = eye, eye.copy()
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        zlo, zhi = kaffine(W, b, alo, ahi)
        if i < last:
            alo, ahi = ktanh(zlo, zhi)
            if need_j:
                mlo, mhi = kmatmul_interval(W, jlo, jhi)
                # tanh'(z) = 1 - tanh(z)^2, enclosed from the tanh enclosure
                s2lo, s2hi = kpow(alo, ahi, 2)
                dlo = np.clip(_down(1.0 - s2hi, _ULPS_ARITH), 0.0, 1.0)
                dhi = np.clip(_up(1.0 - s2lo, _ULPS_ARITH), 0.0, 1.0)
                jlo, jhi = kmul(dlo[:, :, None], dhi[:, :, None], mlo, mhi)
        else:
            alo, ahi = zlo, zhi
            if need_j:
                jlo, jhi = kmatmul_interval(W, jlo, jhi)
    vlo, vhi = alo[:, 0], ahi[:, 0]
    glo, ghi = (jlo[:, 0, :], jhi[:, 0, :]) if need_j else (None, None)
    if mean_value:
        c = 0.5 * (lo + hi)
        fc_lo, fc_hi = _net_value_interval(net, c, c.copy())
        rad = _up(np.maximum(hi - c, c - lo), _ULPS_ARITH)
        mag = np.maximum(np.abs(glo), np.abs(ghi))
        spread = (mag * rad).sum(axis=1)
        spread = spread + _dot_err(spread, n_in)
        vlo = np.maximum(vlo, fc_lo - spread)
        vhi = np.minimum(vhi, fc_hi + spread)
        # both enclosures are sound so the intersection is non-empty up
        # to float ties; guard the order anyway
        bad = vlo > vhi
        if np.any(bad):
            mid = 0.5 * (vlo[bad] + vhi[bad])
            vlo[bad] = mid
            vhi[bad] = mid
    return (vlo, vhi, glo, ghi) if want_grad else (vlo, vhi)


def eval_net_interval(net, box: Box) -> Interval:
    vlo, vhi = net_interval_many(net, box.lo[None, :], box.hi[None, :])
    return Interval(float(vlo[0]), float(vhi[0]))


def eval_net_grad_interval(net, box: Box) -> list:
    _, _, glo, ghi = net_interval_many(net, box.lo[None, :], box.hi[None, :], want_grad=True)
    return [Interval(float(l), float(h)) for l, h in zip(glo[0], ghi[0])]


# ---------------------------------------------------------------------------
# HC4-revise: contract boxes against a constraint  rlo <= e(x) <= rhi.
# One forward sweep stores every node's enclosure; one backward sweep pushes
# the restricted output range down through inverse operations.  All backward
# computations round outward, so the contracted box is always a superset of
# the true feasible region; an empty intersection proves infeasibility.
# ---------------------------------------------------------------------------

_INF = np.inf


def _hc4_fwd(e: ex.Expr, lo, hi):
    if isinstance(e, ex.Constant):
        v = np.full(lo.shape[0], e.value)
        return (v, v.copy())
    if isinstance(e, ex.Var):
        return (lo[:, e.index].copy(), hi[:, e.index].copy())
    if isinstance(e, (ex.Add, ex.Sub, ex.Mul, ex.Div)):
        a = _hc4_fwd(e.left, lo, hi)
        b = _hc4_fwd(e.right, lo, hi)
        op = {ex.Add: kadd, ex.Sub: ksub, ex.Mul: kmul, ex.Div: kdiv}[type(e)]
        return op(a[0], a[1], b[0], b[1]) + (a, b)
    a = _hc4_fwd(e.arg if not isinstance(e, ex.IntPow) else e.base, lo, hi)
    if isinstance(e, ex.Neg):
        return kneg(a[0], a[1]) + (a,)
    if isinstance(e, ex.IntPow):
        return kpow(a[0], a[1], e.exponent) + (a,)
    if isinstance(e, ex.Tanh):
        return ktanh(a[0], a[1]) + (a,)
    if isinstance(e, ex.Exp):
        return kexp(a[0], a[1]) + (a,)
    if isinstance(e, ex.Ln):
        return kln(a[0], a[1]) + (a,)
    raise TypeError(f"not an Expr node: {e!r}")


def _meet(st, rlo, rhi, empty):
    """Intersect a node's enclosure with a backward range, flag empty rows."""
    nlo = np.maximum(st[0], rlo)
    nhi = np.minimum(st[1], rhi)
    bad = ~(nlo <= nhi)  # catches inverted and NaN rows alike
    empty |= bad
    nlo = np.where(bad, 0.0, nlo)
    nhi = np.where(bad, 0.0, nhi)
    return nlo, nhi


def _kdiv_loose(alo, ahi, blo, bhi):
    """Division that degrades to the whole line where the divisor spans 0."""
    spans = (blo <= 0.0) & (bhi >= 0.0)
    safe_blo = np.where(spans, 1.0, blo)
    safe_bhi = np.where(spans, 1.0, bhi)
    qlo, qhi = kdiv(alo, ahi, safe_blo, safe_bhi)
    return np.where(spans, -_INF, qlo), np.where(spans, _INF, qhi)


def _nthroot_up(v, n):
    with np.errstate(invalid="ignore"):
        r = np.sign(v) * np.abs(v) ** (1.0 / n)
    return _up(r, _ULPS_LIBM)


def _nthroot_down(v, n):
    with np.errstate(invalid="ignore"):
        r = np.sign(v) * np.abs(v) ** (1.0 / n)
    return _down(r, _ULPS_LIBM)


def _hc4_bwd(e: ex.Expr, st, rlo, rhi, boxlo, boxhi, empty):
    vlo, vhi = _meet(st, rlo, rhi, empty)
    if isinstance(e, ex.Constant):
        return
    if isinstance(e, ex.Var):
        boxlo[:, e.index] = np.maximum(boxlo[:, e.index], vlo)
        boxhi[:, e.index] = np.minimum(boxhi[:, e.index], vhi)
        return
    with np.errstate(all="ignore"):
        if isinstance(e, ex.Add):
            a, b = st[2], st[3]
            ra = ksub(vlo, vhi, b[0], b[1])
            rb = ksub(vlo, vhi, a[0], a[1])
            _hc4_bwd(e.left, a, ra[0], ra[1], boxlo, boxhi, empty)
            _hc4_bwd(e.right, b, rb[0], rb[1], boxlo, boxhi, empty)
            return
        if isinstance(e, ex.Sub):
            a, b = st[2], st[3]
            ra = kadd(vlo, vhi, b[0], b[1])
            rb = ksub(a[0], a[1], vlo, vhi)
            _hc4_bwd(e.left, a, ra[0], ra[1], boxlo, boxhi, empty)
            _hc4_bwd(e.right, b, rb[0], rb[1], boxlo, boxhi, empty)
            return
        if isinstance(e, ex.Mul):
            a, b = st[2], st[3]
            ra = _kdiv_loose(vlo, vhi, b[0], b[1])
            rb = _kdiv_loose(vlo, vhi, a[0], a[1])
            _hc4_bwd(e.left, a, ra[0], ra[1], boxlo, boxhi, empty)
            _hc4_bwd(e.right, b, rb[0], rb[1], boxlo, boxhi, empty)
            return
        if isinstance(e, ex.Div):
            a, b = st[2], st[3]
            ra = kmul(vlo, vhi, b[0], b[1])
            rb = _kdiv_loose(a[0], a[1], vlo, vhi)
            _hc4_bwd(e.left, a, ra[0], ra[1], boxlo, boxhi, empty)
            _hc4_bwd(e.right, b, rb[0], rb[1], boxlo, boxhi, empty)
            return
        if isinstance(e, ex.Neg):
            a = st[2]
            _hc4_bwd(e.arg, a, -vhi, -vlo, boxlo, boxhi, empty)
            return
        if isinstance(e, ex.IntPow):
            a = st[2]
            n = e.exponent
            if n == 0:
                empty |= (1.0 < vlo) | (1.0 > vhi)
                return
            if n == 1 or n % 2 == 1:
                _hc4_bwd(e.base, a, _nthroot_down(vlo, n), _nthroot_up(vhi, n),
                         boxlo, boxhi, empty)
                return
            # even power: |base| <= rhi^(1/n); keep the sign side the current
            # enclosure already determines, otherwise the symmetric hull
            r = _nthroot_up(np.maximum(vhi, 0.0), n)
            s = np.where(vlo > 0.0, _nthroot_down(vlo, n), 0.0)
            blo_ = np.where(a[0] >= 0.0, s, -r)
            bhi_ = np.where(a[1] <= 0.0, -s, r)
            _hc4_bwd(e.base, a, blo_, bhi_, boxlo, boxhi, empty)
            return
        if isinstance(e, ex.Tanh):
            a = st[2]
            lo_ = np.where(vlo > -1.0, _down(np.arctanh(np.minimum(vlo, 1.0)), _ULPS_LIBM), -_INF)
            hi_ = np.where(vhi < 1.0, _up(np.arctanh(np.maximum(vhi, -1.0)), _ULPS_LIBM), _INF)
            _hc4_bwd(e.arg, a, lo_, hi_, boxlo, boxhi, empty)
            return
        if isinstance(e, ex.Exp):
            a = st[2]
            empty |= vhi <= 0.0
            lo_ = np.where(vlo > 0.0, _down(np.log(np.maximum(vlo, 1e-308)), _ULPS_LIBM), -_INF)
            hi_ = np.where(vhi > 0.0, _up(np.log(np.maximum(vhi, 1e-308)), _ULPS_LIBM), _INF)
            _hc4_bwd(e.arg, a, lo_, hi_, boxlo, boxhi, empty)
            return
        if isinstance(e, ex.Ln):
            a = st[2]
            lo_, hi_ = kexp(vlo, vhi)
            _hc4_bwd(e.arg, a, lo_, hi_, boxlo, boxhi, empty)
            return
    raise TypeError(f"not an Expr node: {e!r}")


def hc4_contract(e: ex.Expr, lo: np.ndarray, hi: np.ndarray,
                 rlo: float = -_INF, rhi: float = 0.0):
    """Contract boxes against ``rlo <= e(x) <= rhi``.

    Returns (lo2, hi2, infeasible).  The contracted boxes enclose every
    point of the originals satisfying the constraint; rows flagged
    infeasible contain no such point at all.
    """
    st = _hc4_fwd(e, lo, hi)
    empty = np.zeros(lo.shape[0], dtype=bool)
    lo2, hi2 = lo.copy(), hi.copy()
    _hc4_bwd(e, st, np.full(lo.shape[0], rlo), np.full(lo.shape[0], rhi),
             lo2, hi2, empty)
    empty |= np.any(~(lo2 <= hi2), axis=1)
    lo2 = np.where(empty[:, None], lo, lo2)
    hi2 = np.where(empty[:, None], hi, hi2)
    return lo2, hi2, empty


# ---------------------------------------------------------------------------
# Conditions and the branch-and-bound engine
# ---------------------------------------------------------------------------

class ScalarFn:
    """A scalar function of x that can be bounded over boxes.

    Subclasses provide batched point evaluation and batched interval
    evaluation; ``to_expr`` gives the symbolic form when one exists
    (used by the SMT-LIB exporter).
    """

    dim: int

    def eval_points(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eval_boxes(self, lo: np.ndarray, hi: np.ndarray):
        raise NotImplementedError

    def contract_boxes(self, lo: np.ndarray, hi: np.ndarray):
        """Shrink boxes toward the region where this antecedent can hold
        (f(x) <= 0), returning (lo2, hi2, infeasible_mask).  The default
        only detects infeasibility from the interval lower bound."""
        glo, _ = self.eval_boxes(lo, hi)
        return lo, hi, glo > 0.0

    def to_expr(self) -> ex.Expr:
        raise UnsupportedPrimitive(f"{type(self).__name__} has no symbolic form")


class ExprFn(ScalarFn):
    def __init__(self, e: ex.Expr, dim: int, name: str = ""):
        self.expr = e
        self.dim = dim
        self.name = name or ex.to_str(e)

    def eval_points(self, X):
        return ex.evaluate_many(self.expr, X)

    def eval_boxes(self, lo, hi):
        return expr_interval_many(self.expr, lo, hi)

    def contract_boxes(self, lo, hi):
        return hc4_contract(self.expr, lo, hi, -_INF, 0.0)

    def to_expr(self):
        return self.expr

    def __repr__(self):
        return f"ExprFn({self.name})"


@dataclass(frozen=True)
class Condition:
    """(g_1(x) <= 0 and ... and g_m(x) <= 0)  ==>  h(x) <= 0."""

    antecedents: tuple
    consequent: ScalarFn
    name: str = ""

    def holds_at(self, x) -> bool:
        X = np.asarray(x, dtype=float)[None, :]
        for g in self.antecedents:
            if g.eval_points(X)[0] > 0.0:
                return True  # antecedent false: implication vacuously true
        return bool(self.consequent.eval_points(X)[0] <= 0.0)


@dataclass(frozen=True)
class Certified:
    boxes_processed: int = 0


@dataclass(frozen=True)
class Falsified:
    witness: np.ndarray
    margin: float
    boxes_processed: int = 0


@dataclass(frozen=True)
class Unknown:
    box: Box
    delta: float
    boxes_processed: int = 0


VerifyOutcome = Union[Certified, Falsified, Unknown]


class BudgetExhausted(RuntimeError):
    def __init__(self, processed: int, pending: int):
        super().__init__(f"branch-and-bound budget exhausted after {processed} boxes "
                         f"({pending} still pending)")
        self.processed = processed
        self.pending = pending


def bnb_verify(cond: Condition, X: Box, delta: float = 1e-3,
               budget: int = 5_000_000, chunk: int = 512) -> VerifyOutcome:
    """Decide ``forall x in X: antecedents(x) => consequent(x)`` up to delta.

    Depth-first subdivision.  Each popped box is first contracted
    against the antecedents (expression antecedents run an HC4-revise
    sweep; others just test feasibility): a box whose feasible part is
    provably empty is discarded, as is one where the consequent's
    interval upper bound over the contracted box is <= 0.  Centers of
    surviving boxes are probed in exact point arithmetic: a probe that
    satisfies every antecedent and violates the consequent is a genuine
    counterexample and short-circuits to ``Falsified``.  A surviving box
    whose widths are all <= delta returns ``Unknown``.  ``Certified``
    means every box was discarded.

    Raises ``BudgetExhausted`` once more than ``budget`` boxes have been
    processed.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    stack = [(X.lo.copy(), X.hi.copy())]
    processed = 0
    while stack:
        take = min(chunk, len(stack))
        batch = [stack.pop() for _ in range(take)]
        if processed + take > budget:
            raise BudgetExhausted(processed, len(stack) + take)
        processed += take
        blo = np.stack([b[0] for b in batch])
        bhi = np.stack([b[1] for b in batch])

        feasible = np.ones(take, dtype=bool)
        for g in cond.antecedents:
            blo, bhi, dead = g.contract_boxes(blo, bhi)
            feasible &= ~dead
        alive = feasible
        if np.any(alive):
            # full-chunk evaluation lets condition functions share cached
            # enclosures with the antecedent pass
            _, hhi = cond.consequent.eval_boxes(blo, bhi)
            alive = alive & ~(hhi <= 0.0)

        if np.any(alive):
            idx = np.where(alive)[0]
            mids = 0.5 * (blo[idx] + bhi[idx])
            ok = np.ones(len(idx), dtype=bool)
            for g in cond.antecedents:
                ok &= g.eval_points(mids) <= 0.0
            hv = cond.consequent.eval_points(mids)
            viol = ok & (hv > 0.0)
            if np.any(viol):
                j = int(np.argmax(viol))
                return Falsified(witness=mids[j].copy(), margin=float(hv[j]),
                                 boxes_processed=processed)
            widths = bhi[idx] - blo[idx]
            small = np.all(widths <= delta, axis=1)
            for k, i in enumerate(idx):
                if small[k]:
                    return Unknown(box=Box(blo[i], bhi[i]), delta=delta,
                                   boxes_processed=processed)
                axis = int(np.argmax(widths[k]))
                mid = 0.5 * (blo[i, axis] + bhi[i, axis])
                left_hi = bhi[i].copy()
                left_hi[axis] = mid
                right_lo = blo[i].copy()
                right_lo[axis] = mid
                stack.append((blo[i].copy(), left_hi))
                stack.append((right_lo, bhi[i].copy()))
    return Certified(boxes_processed=processed)
