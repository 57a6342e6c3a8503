"""The Lyapunov candidate network and its residual training loop.

The candidate W_N(x; theta) is a small tanh MLP with identity output.
Training minimizes

    total = lr_w * L_r + lb_w * L_b + ld_w * L_d

where L_r is the mean squared defect of the governing PDE

    grad W_N(x) . f(x) + Psi(x) (1 - W_N(x)) = 0,
    Psi = alpha * Phi            ("exp" form)
    Psi = alpha * (1 + W_N) * Phi ("tanh" form),   Phi(x) = |x|^2,

L_b pins the boundary behaviour (W -> 1 on points outside the basin,
W(0) = O, and an optional hinge keeping W between two quadratic-rate
envelopes near the origin), and L_d fits simulated value data.

Gradients are computed by hand: one forward pass carries the directional
derivative u = grad W_N . f as a tangent stream, and one reverse pass
accumulates d/d theta of both the value and u.  No autodiff framework is
involved, which keeps runs bit-reproducible for a fixed seed and lets
the verifier reuse the exact same weights.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dynamics as dyn
from . import expr as ex
from .ode import BetaKind, beta_transform

__all__ = [
    "Mlp", "TrainConfig", "Dataset", "TrainRecord", "LossParts",
    "DivergedLoss", "ExprCandidate",
    "init_mlp", "forward", "forward_batch", "input_grad", "input_grad_batch",
    "zubov_residual", "zubov_residual_batch", "loss", "train",
    "assemble_dataset", "save_mlp", "load_mlp", "param_count",
]

NET_FILE_VERSION = 1


class DivergedLoss(RuntimeError):
    pass


@dataclass
class Mlp:
    """Feedforward tanh network with identity output, weights as (out, in)."""

    layer_sizes: tuple
    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.activation != "tanh":
            raise ValueError("only tanh hidden activations are supported")
        if self.layer_sizes[-1] != 1:
            raise ValueError("output must be scalar")
        if len(self.weights) != len(self.layer_sizes) - 1:
            raise ValueError("weight count does not match layer_sizes")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if W.shape != expect or b.shape != (expect[0],):
                raise ValueError(f"layer {i}: bad shapes {W.shape}, {b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def dim(self) -> int:
        return self.layer_sizes[0]

    def value_batch(self, X: np.ndarray) -> np.ndarray:
        return forward_batch(self, X)

    def grad_batch(self, X: np.ndarray) -> np.ndarray:
        return input_grad_batch(self, X)

    def clone(self) -> "Mlp":
        return Mlp(self.layer_sizes, [W.copy() for W in self.weights],
                   [b.copy() for b in self.biases], self.activation)


def init_mlp(layer_sizes, seed_or_rng) -> Mlp:
    """Glorot-uniform weights, zero biases, from a seeded PCG64 stream."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases)


def param_count(net: Mlp) -> int:
    return sum(W.size + b.size for W, b in zip(net.weights, net.biases))


# ---------------------------------------------------------------------------
# Forward / gradients
# ---------------------------------------------------------------------------

def forward_batch(net: Mlp, X: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(X, dtype=float))
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ W.T + b
        if i < last:
            a = np.tanh(a)
    return a[:, 0]


def forward(net: Mlp, x) -> float:
    return float(forward_batch(net, np.asarray(x, dtype=float)[None, :])[0])


def input_grad_batch(net: Mlp, X: np.ndarray) -> np.ndarray:
    """Exact gradient of W_N in x via the layer chain rule, (K, n)."""
    a = np.atleast_2d(np.asarray(X, dtype=float))
    K, n = a.shape
    J = np.broadcast_to(np.eye(n), (K, n, n)).copy()
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        J = np.einsum("om,kmn->kon", W, J)
        if i < last:
            a = np.tanh(z)
            J = (1.0 - a * a)[:, :, None] * J
    return J[:, 0, :]


def input_grad(net: Mlp, x) -> np.ndarray:
    return input_grad_batch(net, np.asarray(x, dtype=float)[None, :])[0]


class ExprCandidate:
    """Closed-form candidate wrapping an expression; same duck interface
    as Mlp where W values and input gradients are needed."""

    def __init__(self, e: ex.Expr, dim: int):
        self.expr = e
        self.dim = dim
        self._grads = [ex.diff(e, i) for i in range(dim)]

    def value_batch(self, X: np.ndarray) -> np.ndarray:
        return ex.evaluate_many(self.expr, np.atleast_2d(X))

    def grad_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.stack([ex.evaluate_many(g, X) for g in self._grads], axis=1)


# ---------------------------------------------------------------------------
# Configuration / data containers
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    alpha: float = 0.1
    psi_form: str = "tanh"          # "exp": Psi = a*Phi ; "tanh": Psi = a*(1+W)*Phi
    batch: int = 32
    lr: float = 1e-3
    max_epochs: int = 200
    loss_threshold: float = 1e-5
    lambda_r: float = 1.0
    lambda_b: float = 1.0
    lambda_d: float = 1.0
    seed: int = 0
    # quadratic-envelope hinge near the origin: active inside x'Px <= c_local
    use_local_band: bool = True
    local_P: Optional[np.ndarray] = None
    c_local: Optional[float] = None
    c1_local: Optional[float] = None
    c2_local: Optional[float] = None

    def __post_init__(self):
        if self.psi_form not in ("exp", "tanh"):
            raise ValueError(f"unknown psi form {self.psi_form!r}")
        if self.alpha <= 0 or self.lr <= 0 or self.batch < 1:
            raise ValueError("alpha, lr must be positive and batch >= 1")
        if min(self.lambda_r, self.lambda_b, self.lambda_d) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.local_P is not None:
            if self.c1_local is None:
                self.c1_local = dyn.lambda_min(self.local_P)
            if self.c2_local is None:
                self.c2_local = float(np.linalg.eigvalsh(self.local_P)[-1])

    def beta(self) -> BetaKind:
        return BetaKind(kind=self.psi_form, alpha=self.alpha)


@dataclass
class Dataset:
    collocation: np.ndarray                 # (N, n) residual points
    exterior: np.ndarray                    # (M, n) points where W should be 1
    pair_x: np.ndarray                      # (D, n) value-data points
    pair_w: np.ndarray                      # (D,) targets in [0, 1]

    def __post_init__(self):
        self.collocation = np.atleast_2d(np.asarray(self.collocation, dtype=float))
        if self.collocation.size == 0:
            raise ValueError("collocation set must be non-empty")
        n = self.collocation.shape[1]

        def norm2d(a):
            a = np.asarray(a, dtype=float)
            return np.empty((0, n)) if a.size == 0 else np.atleast_2d(a)

        self.exterior = norm2d(self.exterior)
        self.pair_x = norm2d(self.pair_x)
        self.pair_w = np.asarray(self.pair_w, dtype=float).reshape(-1)
        if self.pair_x.shape[0] != self.pair_w.shape[0]:
            raise ValueError("pair_x and pair_w lengths differ")
        if self.pair_w.size and (self.pair_w.min() < 0 or self.pair_w.max() > 1):
            raise ValueError("pair targets must lie in [0, 1]")


def assemble_dataset(samples: list, cfg: TrainConfig,
                     pair_fraction: float = 0.0,
                     rng: Optional[np.random.Generator] = None) -> Dataset:
    """Build a training set from simulated value samples.

    Collocation = every sample point; exterior = the non-converged ones;
    pairs = a random fraction of all samples with their w targets.
    Converged targets must agree with the configured value transform.
    """
    X = np.stack([s.x for s in samples])
    conv = np.array([s.converged for s in samples])
    w = np.array([s.w_hat for s in samples])
    v = np.array([s.v_hat for s in samples])
    expect = beta_transform(v[conv], cfg.beta()) if np.any(conv) else np.empty(0)
    if expect.size and not np.allclose(w[conv], expect, atol=1e-12):
        raise ValueError("sample w targets disagree with the configured "
                         "alpha/psi_form value transform")
    exterior = X[~conv]
    if pair_fraction > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        k = max(1, int(round(pair_fraction * X.shape[0])))
        idx = rng.choice(X.shape[0], size=min(k, X.shape[0]), replace=False)
        pair_x, pair_w = X[idx], w[idx]
    else:
        pair_x = np.empty((0, X.shape[1]))
        pair_w = np.empty(0)
    return Dataset(collocation=X, exterior=exterior, pair_x=pair_x, pair_w=pair_w)


@dataclass(frozen=True)
class LossParts:
    residual: float
    boundary: float
    data: float

    def total(self, cfg: TrainConfig) -> float:
        return (cfg.lambda_r * self.residual + cfg.lambda_b * self.boundary
                + cfg.lambda_d * self.data)


@dataclass
class TrainRecord:
    epochs: list = field(default_factory=list)   # (total, L_r, L_b, L_d) per epoch
    stop_reason: str = "not-run"
    epochs_run: int = 0
    wall_time_s: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.epochs[-1][0] if self.epochs else float("nan")


# ---------------------------------------------------------------------------
# Residual and loss
# ---------------------------------------------------------------------------

def _psi(cfg: TrainConfig, phi: np.ndarray, w: np.ndarray) -> np.ndarray:
    if cfg.psi_form == "exp":
        return cfg.alpha * phi
    return cfg.alpha * (1.0 + w) * phi


def zubov_residual_batch(net, sys: dyn.SystemDef, cfg: TrainConfig,
                         X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w = net.value_batch(X)
    g = net.grad_batch(X)
    F = sys.f_many(X)
    phi = np.sum(X * X, axis=1)
    return np.sum(g * F, axis=1) + _psi(cfg, phi, w) * (1.0 - w)


def zubov_residual(net, sys: dyn.SystemDef, cfg: TrainConfig, x) -> float:
    return float(zubov_residual_batch(net, sys, cfg,
                                      np.asarray(x, dtype=float)[None, :])[0])


class _GradAccum:
    def __init__(self, net: Mlp):
        self.dW = [np.zeros_like(W) for W in net.weights]
        self.db = [np.zeros_like(b) for b in net.biases]

    def scaled(self, s: float) -> "_GradAccum":
        for a in (self.dW, self.db):
            for g in a:
                g *= s
        return self


def _forward_states(net: Mlp, X: np.ndarray):
    """Hidden activations a_l and derivatives s_l = 1 - a_l^2 per layer."""
    acts, sigs = [X], []
    a = X
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        if i < last:
            a = np.tanh(z)
            acts.append(a)
            sigs.append(1.0 - a * a)
        else:
            y = z[:, 0]
    return acts, sigs, y


def _value_vjp(net: Mlp, X: np.ndarray, ybar: np.ndarray, out: _GradAccum):
    """Accumulate d/d theta of sum_i ybar_i * W_N(x_i)."""
    acts, sigs, _ = _forward_states(net, X)
    L = len(net.weights) - 1
    abar = ybar[:, None] * net.weights[L]           # (B, h_L)
    out.dW[L] += ybar[None, :] @ acts[L]
    out.db[L] += np.array([ybar.sum()])
    for l in range(L - 1, -1, -1):
        zbar = abar * sigs[l]
        out.dW[l] += zbar.T @ acts[l]
        out.db[l] += zbar.sum(axis=0)
        abar = zbar @ net.weights[l]
    return out


def _residual_forward(net: Mlp, X: np.ndarray, F: np.ndarray):
    """Joint primal/tangent forward pass; tangent direction is f(x).

    Returns per-layer states and (y, u) with u = grad W_N . f.
    """
    acts, taus, vs, sigs = [X], [F], [], []
    a, tau = X, F
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        v = tau @ W.T
        if i < last:
            a = np.tanh(z)
            s = 1.0 - a * a
            tau = s * v
            acts.append(a)
            taus.append(tau)
            vs.append(v)
            sigs.append(s)
        else:
            y, u = z[:, 0], v[:, 0]
    return acts, taus, vs, sigs, y, u


def _residual_vjp(net: Mlp, states, ybar: np.ndarray, ubar: np.ndarray,
                  out: _GradAccum):
    """Accumulate d/d theta of sum_i (ybar_i y_i + ubar_i u_i)."""
    acts, taus, vs, sigs, _, _ = states
    L = len(net.weights) - 1
    Wo = net.weights[L]
    abar = ybar[:, None] * Wo
    tbar = ubar[:, None] * Wo
    out.dW[L] += ybar[None, :] @ acts[L] + ubar[None, :] @ taus[L]
    out.db[L] += np.array([ybar.sum()])  # the tangent stream carries no bias
    for l in range(L - 1, -1, -1):
        s, v, a = sigs[l], vs[l], acts[l + 1]
        vbar = tbar * s
        sbar = tbar * v
        abar = abar + sbar * (-2.0 * a)     # s = 1 - a^2
        zbar = abar * s
        out.dW[l] += zbar.T @ acts[l] + vbar.T @ taus[l]
        out.db[l] += zbar.sum(axis=0)
        abar = zbar @ net.weights[l]
        tbar = vbar @ net.weights[l]
    return out


def _hinge_targets(cfg: TrainConfig, X: np.ndarray):
    """Quadratic-rate envelopes beta(c1 |x|^2), beta(c2 |x|^2) and the
    mask of points inside the local ellipsoid."""
    q = np.einsum("ki,ij,kj->k", X, cfg.local_P, X)
    inside = q <= cfg.c_local
    n2 = np.sum(X * X, axis=1)
    b = cfg.beta()
    return inside, beta_transform(cfg.c1_local * n2, b), beta_transform(cfg.c2_local * n2, b)


def _loss_batch(net: Mlp, sys: dyn.SystemDef, cfg: TrainConfig,
                Xc: np.ndarray, Xe: np.ndarray,
                Xp: np.ndarray, wp: np.ndarray,
                want_grad: bool):
    """Loss parts on one mini-batch, optionally with the parameter gradient
    of the weighted total."""
    grad = _GradAccum(net) if want_grad else None
    n = sys.dim

    # residual term
    F = sys.f_many(Xc)
    states = _residual_forward(net, Xc, F)
    y, u = states[4], states[5]
    phi = np.sum(Xc * Xc, axis=1)
    psi = _psi(cfg, phi, y)
    r = u + psi * (1.0 - y)
    L_r = float(np.mean(r * r))
    B = Xc.shape[0]
    if want_grad and cfg.lambda_r != 0.0:
        rbar = (2.0 * cfg.lambda_r / B) * r
        if cfg.psi_form == "exp":
            ybar = rbar * (-cfg.alpha * phi)
        else:
            ybar = rbar * (-2.0 * cfg.alpha * phi * y)
        _residual_vjp(net, states, ybar, rbar, grad)

    # boundary term: exterior pull to 1, origin pin, local envelope hinge
    L_b = 0.0
    if Xe.shape[0]:
        we = forward_batch(net, Xe)
        d = we - 1.0
        L_b += float(np.mean(d * d))
        if want_grad and cfg.lambda_b != 0.0:
            _value_vjp(net, Xe, (2.0 * cfg.lambda_b / Xe.shape[0]) * d, grad)
    w0 = forward_batch(net, np.zeros((1, n)))
    L_b += float(w0[0] ** 2)
    if want_grad and cfg.lambda_b != 0.0:
        _value_vjp(net, np.zeros((1, n)), 2.0 * cfg.lambda_b * w0, grad)
    if cfg.use_local_band and cfg.local_P is not None and cfg.c_local is not None:
        inside, lo_t, hi_t = _hinge_targets(cfg, Xc)
        if np.any(inside):
            Xi = Xc[inside]
            wi = y[inside]
            under = np.maximum(lo_t[inside] - wi, 0.0)
            over = np.maximum(wi - hi_t[inside], 0.0)
            L_b += float(np.mean(under ** 2 + over ** 2))
            if want_grad and cfg.lambda_b != 0.0:
                coeff = (2.0 * cfg.lambda_b / Xi.shape[0]) * (over - under)
                _value_vjp(net, Xi, coeff, grad)

    # data term
    if Xp.shape[0]:
        wn = forward_batch(net, Xp)
        d = wn - wp
        L_d = float(np.mean(d * d))
        if want_grad and cfg.lambda_d != 0.0:
            _value_vjp(net, Xp, (2.0 * cfg.lambda_d / Xp.shape[0]) * d, grad)
    else:
        L_d = 0.0

    parts = LossParts(residual=L_r, boundary=L_b, data=L_d)
    return (parts, grad) if want_grad else parts


def loss(net: Mlp, data: Dataset, sys: dyn.SystemDef, cfg: TrainConfig):
    """Full-dataset loss. Returns (total, LossParts)."""
    parts = _loss_batch(net, sys, cfg, data.collocation, data.exterior,
                        data.pair_x, data.pair_w, want_grad=False)
    return parts.total(cfg), parts


# ---------------------------------------------------------------------------
# Training (Algorithm: mini-batch Adam on the weighted loss)
# ---------------------------------------------------------------------------

def _cycle_take(arr: np.ndarray, perm: np.ndarray, start: int, count: int):
    if arr.shape[0] == 0 or count == 0:
        return arr[:0]
    idx = (start + np.arange(count)) % perm.shape[0]
    return arr[perm[idx]]


def train(net: Mlp, data: Dataset, sys: dyn.SystemDef, cfg: TrainConfig):
    """Mini-batch Adam with per-epoch reshuffling; deterministic per seed.

    Stops when the epoch-mean total loss drops below ``loss_threshold``
    or after ``max_epochs``.  Raises DivergedLoss on non-finite loss.
    """
    t0 = time.perf_counter()
    net = net.clone()
    record = TrainRecord()
    if cfg.max_epochs == 0:
        record.stop_reason = "max_epochs"
        return net, record
    rng = np.random.default_rng(cfg.seed)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    mW = [np.zeros_like(W) for W in net.weights]
    vW = [np.zeros_like(W) for W in net.weights]
    mb = [np.zeros_like(b) for b in net.biases]
    vb = [np.zeros_like(b) for b in net.biases]
    adam_t = 0
    N = data.collocation.shape[0]
    steps = max(1, (N + cfg.batch - 1) // cfg.batch)
    stop_reason = "max_epochs"
    for epoch in range(cfg.max_epochs):
        perm_c = rng.permutation(N)
        perm_e = rng.permutation(max(1, data.exterior.shape[0]))
        perm_p = rng.permutation(max(1, data.pair_x.shape[0]))
        sums = np.zeros(4)
        for s in range(steps):
            lo = s * cfg.batch
            Xc = data.collocation[perm_c[lo:lo + cfg.batch]]
            Xe = _cycle_take(data.exterior, perm_e, lo,
                             min(cfg.batch, data.exterior.shape[0]))
            Xp_idx_n = min(cfg.batch, data.pair_x.shape[0])
            Xp = _cycle_take(data.pair_x, perm_p, lo, Xp_idx_n)
            wp = _cycle_take(data.pair_w, perm_p, lo, Xp_idx_n)
            parts, grad = _loss_batch(net, sys, cfg, Xc, Xe, Xp, wp, want_grad=True)
            total = parts.total(cfg)
            if not np.isfinite(total):
                raise DivergedLoss(f"loss became non-finite at epoch {epoch}, step {s}")
            sums += (total, parts.residual, parts.boundary, parts.data)
            adam_t += 1
            corr1 = 1.0 - beta1 ** adam_t
            corr2 = 1.0 - beta2 ** adam_t
            for l in range(len(net.weights)):
                for p, g, m, v in ((net.weights[l], grad.dW[l], mW[l], vW[l]),
                                   (net.biases[l], grad.db[l], mb[l], vb[l])):
                    m *= beta1
                    m += (1 - beta1) * g
                    v *= beta2
                    v += (1 - beta2) * g * g
                    p -= cfg.lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
        means = sums / steps
        record.epochs.append(tuple(float(x) for x in means))
        record.epochs_run = epoch + 1
        if means[0] < cfg.loss_threshold:
            stop_reason = "loss_threshold"
            break
    record.stop_reason = stop_reason
    record.wall_time_s = time.perf_counter() - t0
    return net, record


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_mlp(net: Mlp, path, alpha: float, psi_form: str,
             extra: Optional[dict] = None) -> None:
    doc = {
        "version": NET_FILE_VERSION,
        "activation": net.activation,
        "alpha": alpha,
        "psi_form": psi_form,
        "layer_sizes": list(net.layer_sizes),
        "layers": [{"w": W.flatten().tolist(), "b": b.tolist()}
                   for W, b in zip(net.weights, net.biases)],
    }
    if extra:
        doc["meta"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_mlp(path):
    """Returns (net, alpha, psi_form). Rejects unknown file versions."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != NET_FILE_VERSION:
        raise ValueError(f"unsupported network file version {doc.get('version')!r}")
    sizes = tuple(doc["layer_sizes"])
    weights, biases = [], []
    for i, layer in enumerate(doc["layers"]):
        shape = (sizes[i + 1], sizes[i])
        weights.append(np.array(layer["w"], dtype=float).reshape(shape))
        biases.append(np.array(layer["b"], dtype=float))
    net = Mlp(sizes, weights, biases, activation=doc["activation"])
    return net, float(doc["alpha"]), str(doc["psi_form"])
