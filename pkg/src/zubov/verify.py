"""Assembling and discharging the stability certification conditions.

Local certificate: with P solving the Lyapunov equation for the
linearization and r below the smallest eigenvalue of Q, the ellipsoid
{x'Px <= c} is an invariant region of attraction once

    x'Px <= c   =>   2 * sup_{0<=t<=1} |P Dg(tx)|  <=  r

holds, where g = f - Ax and |.| is the matrix 2-norm (exact closed form
for 2x2, Frobenius upper bound otherwise).  The sup over the segment is
absorbed soundly by interval-evaluating Dg over the hull of each
candidate box with the origin.  Reformulating through Dg instead of
checking  2 x'P g(x) <= r |x|^2  directly matters: the direct form is
tight at the origin, where a width-limited decision procedure can only
ever answer "unknown".

Region of attraction in the large: a trained candidate W_N enlarges the
local ellipsoid through three checks over the working box X

    (a)  c1 <= W_N(x) <= c2  =>  grad W_N . f <= -epsilon
    (b)  W_N(x) <= c1        =>  x'Px <= c
    (c)  W_N > c2 on every face of X,

after which {W_N <= c2} is invariant and feeds the ellipsoid, so it is a
certified region of attraction.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import dynamics as dyn
from . import expr as ex
from . import interval as iv
from .ode import ValueSample

__all__ = [
    "LocalCertificate", "RoaCertificate", "ConditionReport",
    "RNotBelowLambdaMin", "NoCertifiableC", "NoCertifiableLevel", "EmptyReference",
    "QuadFormFn", "NetValueFn", "NetLieFn", "SegmentNormFn",
    "verify_local", "find_max_local_c", "verify_roa", "find_max_level",
    "volume_fraction", "export_smt2", "outcome_to_dict", "report_to_json",
]

# strictness slack for "W > c2 on the boundary": certifying W >= c2 + slack
STRICT_SLACK = 1e-9


class RNotBelowLambdaMin(ValueError):
    pass


class NoCertifiableC(RuntimeError):
    pass


class NoCertifiableLevel(RuntimeError):
    pass


class EmptyReference(ValueError):
    pass


# ---------------------------------------------------------------------------
# Condition building blocks
# ---------------------------------------------------------------------------

class _NetBoxCache:
    """Shares one interval net evaluation (value + gradient) between the
    several condition functions that look at the same chunk of boxes.

    The cache keys on the array objects themselves and keeps references
    to them, so an address reused by a later allocation can never alias.
    """

    def __init__(self, net):
        self.net = net
        self._box_key = None
        self._box_val = None
        self._pt_key = None
        self._pt_val = None

    def boxes(self, lo, hi):
        if self._box_key is None or self._box_key[0] is not lo or self._box_key[1] is not hi:
            self._box_val = iv.net_interval_many(self.net, lo, hi, want_grad=True)
            self._box_key = (lo, hi)
        return self._box_val

    def points(self, X):
        if self._pt_key is not X:
            self._pt_val = (self.net.value_batch(X), self.net.grad_batch(X))
            self._pt_key = X
        return self._pt_val


def _net_to_expr(net) -> ex.Expr:
    """Unfold an Mlp into the expression grammar (one Tanh per hidden unit)."""
    n = net.layer_sizes[0]
    layer: list = [ex.Var(i) for i in range(n)]
    last = len(net.weights) - 1
    for li, (W, b) in enumerate(zip(net.weights, net.biases)):
        nxt = []
        for o in range(W.shape[0]):
            acc: Optional[ex.Expr] = None
            for i in range(W.shape[1]):
                w = float(W[o, i])
                if w == 0.0:
                    continue
                term = ex.Mul(ex.Constant(w), layer[i])
                acc = term if acc is None else ex.Add(acc, term)
            bias = float(b[o])
            if acc is None:
                acc = ex.Constant(bias)
            elif bias != 0.0:
                acc = ex.Add(acc, ex.Constant(bias))
            nxt.append(ex.Tanh(acc) if li < last else acc)
        layer = nxt
    return layer[0]


class QuadFormFn(iv.ScalarFn):
    """h(x) = x'Px - c."""

    def __init__(self, P: np.ndarray, c: float):
        self.P = np.asarray(P, dtype=float)
        self.c = float(c)
        self.dim = self.P.shape[0]

    def eval_points(self, X):
        return np.einsum("ki,ij,kj->k", X, self.P, X) - self.c

    def eval_boxes(self, lo, hi):
        n = self.dim
        acc_lo = np.full(lo.shape[0], -self.c)
        acc_hi = acc_lo.copy()
        for i in range(n):
            sq = iv.kpow(lo[:, i], hi[:, i], 2)
            t = iv.kscale(self.P[i, i], *sq)
            acc_lo, acc_hi = iv.kadd(acc_lo, acc_hi, *t)
            for j in range(i + 1, n):
                if self.P[i, j] == 0.0:
                    continue
                cross = iv.kmul(lo[:, i], hi[:, i], lo[:, j], hi[:, j])
                t = iv.kscale(2.0 * self.P[i, j], *cross)
                acc_lo, acc_hi = iv.kadd(acc_lo, acc_hi, *t)
        return acc_lo, acc_hi

    def contract_boxes(self, lo, hi):
        return iv.hc4_contract(self.to_expr(), lo, hi)

    def to_expr(self):
        acc: Optional[ex.Expr] = None
        for i in range(self.dim):
            for j in range(self.dim):
                p = float(self.P[i, j])
                if p == 0.0:
                    continue
                term = ex.Mul(ex.Constant(p), ex.Mul(ex.Var(i), ex.Var(j)))
                acc = term if acc is None else ex.Add(acc, term)
        if acc is None:
            acc = ex.Constant(0.0)
        return ex.Sub(acc, ex.Constant(self.c))


class NetValueFn(iv.ScalarFn):
    """sign=+1: W_N(x) - level <= 0 encodes W <= level;
    sign=-1: level - W_N(x) <= 0 encodes W >= level."""

    def __init__(self, cache: _NetBoxCache, level: float, sign: int, dim: int):
        self.cache = cache
        self.level = float(level)
        self.sign = int(sign)
        self.dim = dim

    def eval_points(self, X):
        w, _ = self.cache.points(X)
        return (w - self.level) if self.sign > 0 else (self.level - w)

    def eval_boxes(self, lo, hi):
        vlo, vhi, _, _ = self.cache.boxes(lo, hi)
        if self.sign > 0:
            return vlo - self.level, vhi - self.level
        return self.level - vhi, self.level - vlo

    def to_expr(self):
        w = _net_to_expr(self.cache.net)
        if self.sign > 0:
            return ex.Sub(w, ex.Constant(self.level))
        return ex.Sub(ex.Constant(self.level), w)


class NetLieFn(iv.ScalarFn):
    """h(x) = grad W_N(x) . f(x) + offset (so h <= 0 means decrease)."""

    def __init__(self, cache: _NetBoxCache, sys: dyn.SystemDef, offset: float):
        self.cache = cache
        self.sys = sys
        self.offset = float(offset)
        self.dim = sys.dim

    def eval_points(self, X):
        _, g = self.cache.points(X)
        F = self.sys.f_many(X)
        return np.sum(g * F, axis=1) + self.offset

    def eval_boxes(self, lo, hi):
        _, _, glo, ghi = self.cache.boxes(lo, hi)
        acc_lo = np.full(lo.shape[0], self.offset)
        acc_hi = acc_lo.copy()
        for i, comp in enumerate(self.sys.field.components):
            flo, fhi = iv.expr_interval_many(comp, lo, hi)
            plo, phi = iv.kmul(glo[:, i], ghi[:, i], flo, fhi)
            acc_lo, acc_hi = iv.kadd(acc_lo, acc_hi, plo, phi)
        return acc_lo, acc_hi

    def to_expr(self):
        w = _net_to_expr(self.cache.net)
        acc: Optional[ex.Expr] = None
        for i, comp in enumerate(self.sys.field.components):
            term = ex.Mul(ex.diff(w, i), comp)
            acc = term if acc is None else ex.Add(acc, term)
        return ex.Add(acc, ex.Constant(self.offset))


class SegmentNormFn(iv.ScalarFn):
    """h(x) = 2 * sup_{0<=t<=1} |P Dg(tx)| - r.

    Over a box B the sup is bounded above by interval-evaluating the Dg
    entries on hull(B, 0), which contains every segment point tx.  At a
    probe point the sup is bounded below by a small t-grid, so reported
    witnesses are genuine.  The matrix norm is the exact 2x2 spectral
    norm (closed-form singular value) or the Frobenius bound for n > 2.
    """

    _TGRID = np.array([0.25, 0.5, 0.75, 1.0])

    def __init__(self, lin: dyn.Linearization, P: np.ndarray, r: float, dim: int):
        self.P = np.asarray(P, dtype=float)
        self.dg = lin.dg
        self.r = float(r)
        self.dim = dim

    def _pdg_entries_interval(self, lo, hi):
        n = self.dim
        dglo = np.empty((n, n, lo.shape[0]))
        dghi = np.empty_like(dglo)
        for i in range(n):
            for j in range(n):
                dglo[i, j], dghi[i, j] = iv.expr_interval_many(self.dg[i][j], lo, hi)
        mlo = np.empty_like(dglo)
        mhi = np.empty_like(dghi)
        for i in range(n):
            for j in range(n):
                alo = np.zeros(lo.shape[0])
                ahi = np.zeros(lo.shape[0])
                for k in range(n):
                    t = iv.kscale(self.P[i, k], dglo[k, j], dghi[k, j])
                    alo, ahi = iv.kadd(alo, ahi, *t)
                mlo[i, j], mhi[i, j] = alo, ahi
        return mlo, mhi

    def _norm_sq_interval(self, mlo, mhi):
        n = self.dim
        if n == 2:
            sq = {(i, j): iv.kpow(mlo[i, j], mhi[i, j], 2)
                  for i in range(2) for j in range(2)}
            p = iv.kadd(*sq[(0, 0)], *sq[(1, 0)])
            s = iv.kadd(*sq[(0, 1)], *sq[(1, 1)])
            q = iv.kadd(*iv.kmul(mlo[0, 0], mhi[0, 0], mlo[0, 1], mhi[0, 1]),
                        *iv.kmul(mlo[1, 0], mhi[1, 0], mlo[1, 1], mhi[1, 1]))
            tr = iv.kadd(*p, *s)
            dif = iv.ksub(*p, *s)
            disc = iv.kadd(*iv.kpow(*dif, 2), *iv.kscale(4.0, *iv.kpow(*q, 2)))
            root = iv.ksqrt(*disc)
            lam = iv.kscale(0.5, *iv.kadd(*tr, *root))
            # the trace also bounds the top eigenvalue of M'M and does not
            # suffer the (p - s)^2 dependency blow-up over origin hulls;
            # intersecting the two sound upper bounds keeps the enclosure
            # tight for near-rank-one matrices
            return np.maximum(lam[0], 0.0), np.minimum(lam[1], tr[1])
        acc_lo = np.zeros(mlo.shape[2])
        acc_hi = acc_lo.copy()
        for i in range(n):
            for j in range(n):
                acc_lo, acc_hi = iv.kadd(acc_lo, acc_hi, *iv.kpow(mlo[i, j], mhi[i, j], 2))
        return acc_lo, acc_hi

    def eval_boxes(self, lo, hi):
        hull_lo = np.minimum(lo, 0.0)
        hull_hi = np.maximum(hi, 0.0)
        mlo, mhi = self._pdg_entries_interval(hull_lo, hull_hi)
        nlo, nhi = iv.ksqrt(*self._norm_sq_interval(mlo, mhi))
        hlo, hhi = iv.kscale(2.0, nlo, nhi)
        return hlo - self.r, hhi - self.r

    def eval_points(self, X):
        K, n = X.shape
        pts = (self._TGRID[:, None, None] * X[None, :, :]).reshape(-1, n)
        dg = np.empty((pts.shape[0], n, n))
        for i in range(n):
            for j in range(n):
                dg[:, i, j] = ex.evaluate_many(self.dg[i][j], pts)
        M = np.einsum("ik,pkj->pij", self.P, dg)
        if n == 2:
            p = M[:, 0, 0] ** 2 + M[:, 1, 0] ** 2
            s = M[:, 0, 1] ** 2 + M[:, 1, 1] ** 2
            q = M[:, 0, 0] * M[:, 0, 1] + M[:, 1, 0] * M[:, 1, 1]
            lam = 0.5 * ((p + s) + np.sqrt((p - s) ** 2 + 4 * q * q))
            norms = np.sqrt(np.maximum(lam, 0.0))
        else:
            norms = np.sqrt(np.sum(M * M, axis=(1, 2)))
        return 2.0 * norms.reshape(len(self._TGRID), K).max(axis=0) - self.r


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

@dataclass
class ConditionReport:
    name: str
    outcome: iv.VerifyOutcome
    seconds: float

    @property
    def certified(self) -> bool:
        return isinstance(self.outcome, iv.Certified)


@dataclass
class LocalCertificate:
    system: str
    P: np.ndarray
    Q: np.ndarray
    r: float
    c: float
    outcome: iv.VerifyOutcome
    lambda_min_q: float
    seconds: float

    @property
    def certified(self) -> bool:
        return isinstance(self.outcome, iv.Certified)


@dataclass
class RoaCertificate:
    c1: float
    c2: float
    epsilon: float
    decrease: ConditionReport
    inclusion: ConditionReport
    boundary: list
    local: LocalCertificate

    @property
    def certified(self) -> bool:
        return (0.0 < self.c1 < self.c2 and self.decrease.certified
                and self.inclusion.certified and all(b.certified for b in self.boundary))


def _timed_bnb(name, cond, box, delta, budget) -> ConditionReport:
    t0 = time.perf_counter()
    outcome = iv.bnb_verify(cond, box, delta=delta, budget=budget)
    return ConditionReport(name=name, outcome=outcome, seconds=time.perf_counter() - t0)


def verify_local(sys: dyn.SystemDef, P: np.ndarray, Q: np.ndarray,
                 r: float, c: float, delta: float = 1e-3,
                 budget: int = 5_000_000) -> LocalCertificate:
    """Certify the ellipsoid {x'Px <= c} as a local region of attraction."""
    if r <= 0 or c <= 0:
        raise ValueError("r and c must be positive")
    lam = dyn.lambda_min(Q)
    if not r < lam:
        raise RNotBelowLambdaMin(f"need r < lambda_min(Q) = {lam}, got r = {r}")
    lin = dyn.linearize(sys)
    cond = iv.Condition(
        antecedents=(QuadFormFn(P, c),),
        consequent=SegmentNormFn(lin, P, r, sys.dim),
        name=f"local-ellipsoid c={c:g}",
    )
    t0 = time.perf_counter()
    outcome = iv.bnb_verify(cond, sys.domain, delta=delta, budget=budget)
    return LocalCertificate(system=sys.name, P=np.asarray(P, float), Q=np.asarray(Q, float),
                            r=r, c=c, outcome=outcome, lambda_min_q=lam,
                            seconds=time.perf_counter() - t0)


def find_max_local_c(sys: dyn.SystemDef, P: np.ndarray, Q: np.ndarray,
                     r: float, delta: float = 1e-3, budget: int = 5_000_000,
                     c_lo: Optional[float] = None, steps: int = 12) -> float:
    """Largest certifiable c on a bisection grid in [c_lo, c_hi].

    c_hi is the largest quadratic-form value over the domain corners (the
    largest sublevel set that could matter inside the box).
    """
    corners = sys.domain.corners()
    c_hi = float(np.einsum("ki,ij,kj->k", corners, np.asarray(P, float), corners).max())
    if c_lo is None:
        c_lo = 1e-3 * c_hi

    def ok(c: float) -> bool:
        try:
            return verify_local(sys, P, Q, r, c, delta=delta, budget=budget).certified
        except iv.BudgetExhausted:
            return False

    if not ok(c_lo):
        raise NoCertifiableC(f"not certifiable even at c = {c_lo:g}")
    if ok(c_hi):
        return c_hi
    good, bad = c_lo, c_hi
    for _ in range(steps):
        mid = 0.5 * (good + bad)
        if ok(mid):
            good = mid
        else:
            bad = mid
    return good


def _face_boxes(box: iv.Box):
    faces = []
    for axis in range(box.dim):
        for side, val in (("lo", box.lo[axis]), ("hi", box.hi[axis])):
            lo = box.lo.copy()
            hi = box.hi.copy()
            lo[axis] = hi[axis] = val
            faces.append((f"x{axis + 1}={val:g}", iv.Box(lo, hi)))
    return faces


def verify_roa(net, sys: dyn.SystemDef, local: LocalCertificate,
               c1: float, c2: float, epsilon: float = 1e-4,
               delta: float = 1e-3, budget: int = 5_000_000) -> RoaCertificate:
    """Certify {W_N <= c2} as a region of attraction feeding the local
    ellipsoid, via the decrease band, the inclusion check, and the
    domain-boundary exclusion check."""
    if not local.certified:
        raise ValueError("local certificate must be Certified first")
    if not (0.0 < c1 < c2 < 1.0):
        raise ValueError("need 0 < c1 < c2 < 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cache = _NetBoxCache(net)
    band = iv.Condition(
        antecedents=(NetValueFn(cache, c1, -1, sys.dim), NetValueFn(cache, c2, +1, sys.dim)),
        consequent=NetLieFn(cache, sys, epsilon),
        name=f"decrease band [{c1:g}, {c2:g}]",
    )
    inclusion = iv.Condition(
        antecedents=(NetValueFn(cache, c1, +1, sys.dim),),
        consequent=QuadFormFn(local.P, local.c),
        name=f"sublevel {c1:g} inside ellipsoid",
    )
    decrease_rep = _timed_bnb("decrease", band, sys.domain, delta, budget)
    inclusion_rep = _timed_bnb("inclusion", inclusion, sys.domain, delta, budget)
    boundary_reps = []
    for face_name, face in _face_boxes(sys.domain):
        cond = iv.Condition(
            antecedents=(),
            consequent=NetValueFn(cache, c2 + STRICT_SLACK, -1, sys.dim),
            name=f"boundary {face_name}: W > c2",
        )
        boundary_reps.append(_timed_bnb(f"boundary {face_name}", cond, face, delta, budget))
    return RoaCertificate(c1=c1, c2=c2, epsilon=epsilon,
                          decrease=decrease_rep, inclusion=inclusion_rep,
                          boundary=boundary_reps, local=local)


def find_max_level(net, sys: dyn.SystemDef, local: LocalCertificate,
                   epsilon: float = 1e-4, delta: float = 1e-3,
                   budget: int = 5_000_000, steps: int = 10):
    """Search the largest certifiable (c1, c2) pair by bisection.

    c1: the largest level whose sublevel set provably sits inside the
    local ellipsoid.  c2: the largest level above c1 for which the
    decrease band and the boundary-exclusion checks both certify.
    Returns (c1, c2, RoaCertificate).
    """
    if not local.certified:
        raise ValueError("local certificate must be Certified first")
    cache = _NetBoxCache(net)

    def wp_certifies(c1: float) -> bool:
        cond = iv.Condition(
            antecedents=(NetValueFn(cache, c1, +1, sys.dim),),
            consequent=QuadFormFn(local.P, local.c),
            name=f"sublevel {c1:g} inside ellipsoid",
        )
        try:
            return isinstance(iv.bnb_verify(cond, sys.domain, delta=delta, budget=budget),
                              iv.Certified)
        except iv.BudgetExhausted:
            return False

    lo, hi = 0.0, 1.0
    c1_best = None
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if wp_certifies(mid):
            c1_best, lo = mid, mid
        else:
            hi = mid
    if c1_best is None:
        raise NoCertifiableLevel("no c1 level set fits inside the local ellipsoid")

    def roa_at(c2: float) -> RoaCertificate:
        return verify_roa(net, sys, local, c1_best, c2, epsilon=epsilon,
                          delta=delta, budget=budget)

    lo, hi = c1_best, 1.0
    best_cert = None
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        try:
            cert = roa_at(mid)
        except iv.BudgetExhausted:
            hi = mid
            continue
        if cert.certified:
            best_cert, lo = cert, mid
        else:
            hi = mid
    if best_cert is None:
        raise NoCertifiableLevel(f"no c2 in ({c1_best:g}, 1) certifies the decrease "
                                 "and boundary conditions")
    return c1_best, best_cert.c2, best_cert


def validate_roa_by_simulation(net, sys: dyn.SystemDef, local: LocalCertificate,
                               c2: float, n_points: int,
                               rng: np.random.Generator,
                               cfg=None) -> dict:
    """Sampled-flow check of a certified sublevel set.

    Draws ``n_points`` uniform domain points with W_N <= c2, integrates
    each until it enters the local ellipsoid {x'Px <= c}, and watches
    W_N at every accepted step.  Returns counts of points that reached
    the ellipsoid, ever exceeded c2 along the way, or failed to arrive.
    """
    from . import ode as _ode
    cfg = cfg or _ode.IntegratorConfig()
    P, c = local.P, local.c
    lo, hi = sys.domain.lo, sys.domain.hi
    pool = []
    while sum(len(p) for p in pool) < n_points:
        cand = rng.uniform(lo, hi, size=(4 * n_points, sys.dim))
        keep = cand[net.value_batch(cand) <= c2]
        pool.append(keep)
    X0 = np.concatenate(pool)[:n_points]
    exceeded = np.zeros(n_points, dtype=bool)

    def classify(t, X):
        out = np.zeros(t.shape, dtype=np.int8)
        out[t >= cfg.t_max] = 2
        out[np.einsum("ki,ij,kj->k", X, P, X) <= c] = 1
        return out

    def on_accept(rows, t, X):
        exceeded[rows] |= net.value_batch(X) > c2

    _, _, status = _ode.advance_batch(sys, X0, classify, cfg, on_accept=on_accept)
    reached = int(np.count_nonzero(status == 1))
    return {
        "points": n_points,
        "reached_ellipsoid": reached,
        "exited_sublevel": int(np.count_nonzero(exceeded)),
        "failed": n_points - reached,
    }


def volume_fraction(net, c2: float, reference: Sequence[ValueSample]) -> float:
    """Share (%) of simulated-convergent reference points inside {W_N <= c2}."""
    conv = [s for s in reference if s.converged]
    if not conv:
        raise EmptyReference("reference dataset has no converged samples")
    X = np.stack([s.x for s in conv])
    w = net.value_batch(X)
    return 100.0 * float(np.count_nonzero(w <= c2)) / len(conv)


# ---------------------------------------------------------------------------
# SMT-LIB export
# ---------------------------------------------------------------------------

def _smt_number(v: float) -> str:
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError(f"cannot export non-finite constant {v}")
    num, den = float(v).as_integer_ratio()
    neg = num < 0
    num = abs(num)
    body = str(num) if den == 1 else f"(/ {num} {den})"
    return f"(- {body})" if neg else body


def _smt_render(e: ex.Expr, names: dict) -> str:
    key = id(e)
    if key in names:
        return names[key]
    if isinstance(e, ex.Constant):
        return _smt_number(e.value)
    if isinstance(e, ex.Var):
        return f"x{e.index + 1}"
    if isinstance(e, ex.Add):
        return f"(+ {_smt_render(e.left, names)} {_smt_render(e.right, names)})"
    if isinstance(e, ex.Sub):
        return f"(- {_smt_render(e.left, names)} {_smt_render(e.right, names)})"
    if isinstance(e, ex.Mul):
        return f"(* {_smt_render(e.left, names)} {_smt_render(e.right, names)})"
    if isinstance(e, ex.Div):
        return f"(/ {_smt_render(e.left, names)} {_smt_render(e.right, names)})"
    if isinstance(e, ex.Neg):
        return f"(- {_smt_render(e.arg, names)})"
    if isinstance(e, ex.IntPow):
        base = _smt_render(e.base, names)
        if e.exponent == 0:
            return "1"
        return f"(* {' '.join([base] * e.exponent)})" if e.exponent > 1 else base
    if isinstance(e, ex.Tanh):
        return f"(tanh {_smt_render(e.arg, names)})"
    if isinstance(e, ex.Exp):
        return f"(exp {_smt_render(e.arg, names)})"
    if isinstance(e, ex.Ln):
        return f"(log {_smt_render(e.arg, names)})"
    raise iv.UnsupportedPrimitive(f"cannot export node {type(e).__name__}")


def _collect_tanh(e: ex.Expr, seen: dict, order: list):
    """Structural duplicates of Tanh nodes, in deterministic DFS order."""
    if isinstance(e, (ex.Constant, ex.Var)):
        return
    if isinstance(e, (ex.Add, ex.Sub, ex.Mul, ex.Div)):
        _collect_tanh(e.left, seen, order)
        _collect_tanh(e.right, seen, order)
        return
    if isinstance(e, ex.IntPow):
        _collect_tanh(e.base, seen, order)
        return
    _collect_tanh(e.arg, seen, order)
    if isinstance(e, ex.Tanh):
        if e not in seen:
            seen[e] = []
            order.append(e)
        seen[e].append(e)


def export_smt2(cond: iv.Condition, X: iv.Box, tanh_mode: str = "native",
                logic: str = "QF_NRA") -> str:
    """SMT-LIB 2 script asserting the negation of the condition over X.

    The script is satisfiable exactly when a counterexample exists, so an
    external solver reporting unsat certifies the condition.  Repeated
    tanh applications (each hidden unit appears in the value and in every
    gradient component) are bound once with let.  ``tanh_mode`` is
    "native" for solvers with a builtin tanh or "uninterpreted" to merely
    declare it.
    """
    if tanh_mode not in ("native", "uninterpreted"):
        raise ValueError("tanh_mode must be 'native' or 'uninterpreted'")
    exprs = [g.to_expr() for g in cond.antecedents]
    h = cond.consequent.to_expr()
    seen: dict = {}
    order: list = []
    for e in exprs + [h]:
        _collect_tanh(e, seen, order)
    shared = [t for t in order if len(seen[t]) > 1]
    names: dict = {}
    lines = [f"(set-logic {logic})"]
    if tanh_mode == "uninterpreted" and any(
            isinstance(t, ex.Tanh) for t in order):
        lines.append("(declare-fun tanh (Real) Real)")
    for i in range(X.dim):
        lines.append(f"(declare-const x{i + 1} Real)")
    for i in range(X.dim):
        lines.append(f"(assert (>= x{i + 1} {_smt_number(float(X.lo[i]))}))")
        lines.append(f"(assert (<= x{i + 1} {_smt_number(float(X.hi[i]))}))")

    # bind each shared hidden-unit application once, in dependency order
    for k, t in enumerate(shared):
        nm = f"t{k + 1}"
        body = f"(tanh {_smt_render(t.arg, names)})"
        for node in seen[t]:
            names[id(node)] = nm
        lines.append(f"(define-fun {nm} () Real {body})")

    for g in exprs:
        lines.append(f"(assert (<= {_smt_render(g, names)} 0))")
    lines.append(f"(assert (> {_smt_render(h, names)} 0))")
    lines.append("(check-sat)")
    lines.append("(exit)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def outcome_to_dict(outcome: iv.VerifyOutcome) -> dict:
    if isinstance(outcome, iv.Certified):
        return {"status": "certified", "boxes": outcome.boxes_processed}
    if isinstance(outcome, iv.Falsified):
        return {"status": "falsified", "witness": [float(v) for v in outcome.witness],
                "margin": outcome.margin, "boxes": outcome.boxes_processed}
    return {"status": "unknown",
            "box": [[float(l), float(h)] for l, h in zip(outcome.box.lo, outcome.box.hi)],
            "delta": outcome.delta, "boxes": outcome.boxes_processed}


def report_to_json(obj) -> str:
    if isinstance(obj, LocalCertificate):
        doc = {
            "kind": "local",
            "system": obj.system,
            "P": obj.P.tolist(),
            "Q": obj.Q.tolist(),
            "r": obj.r,
            "c": obj.c,
            "lambda_min_q": obj.lambda_min_q,
            "outcome": outcome_to_dict(obj.outcome),
            "seconds": obj.seconds,
        }
    elif isinstance(obj, RoaCertificate):
        doc = {
            "kind": "roa",
            "c1": obj.c1,
            "c2": obj.c2,
            "epsilon": obj.epsilon,
            "certified": obj.certified,
            "decrease": {"outcome": outcome_to_dict(obj.decrease.outcome),
                         "seconds": obj.decrease.seconds},
            "inclusion": {"outcome": outcome_to_dict(obj.inclusion.outcome),
                          "seconds": obj.inclusion.seconds},
            "boundary": [{"name": b.name, "outcome": outcome_to_dict(b.outcome),
                          "seconds": b.seconds} for b in obj.boundary],
            "local": json.loads(report_to_json(obj.local)),
        }
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    return json.dumps(doc, indent=1)
