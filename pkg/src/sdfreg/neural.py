"""Per-target MLP signed distance fields.

The network maps a 3D point to a scalar through softplus hidden layers and a
linear output layer. Training uses a self-supervised projection loss plus an
Eikonal penalty on the input gradient, so the parameter backward pass runs
through the forward-mode input tangents (second-order path).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .sdf import SdfModel

NO_SKIP = 0xFFFFFFFF


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss {loss!r}")
        self.step = step


@dataclass
class MlpParams:
    """Layer ``l`` computes ``W[l] @ a + b[l]``; ``skip`` layers also see the raw input."""

    weights: list
    biases: list
    beta: float = 100.0
    skip: int | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("softplus sharpness beta must be positive")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        if self.skip is not None and not 0 < self.skip < len(self.weights):
            raise ValueError(f"skip layer {self.skip} out of range")
        width = 3
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            expect = width + (3 if i == self.skip else 0)
            if W.ndim != 2 or W.shape[1] != expect or b.shape != (W.shape[0],):
                raise ValueError(f"layer {i} has inconsistent shape {W.shape} / {b.shape}")
            width = W.shape[0]
        if width != 1:
            raise ValueError("the last layer must have a single output")
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise ValueError("parameters must be finite")

    @property
    def n_layers(self):
        return len(self.weights)

    def arrays(self):
        return self.weights + self.biases

    def with_arrays(self, arrays):
        n = self.n_layers
        return replace(self, weights=list(arrays[:n]), biases=list(arrays[n:]))

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])


def init_mlp(hidden_layers=4, hidden_width=128, beta=100.0, skip=None, seed=0):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    widths = [3] + [hidden_width] * hidden_layers + [1]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        fan_in = widths[i] + (3 if i == skip else 0)
        fan_out = widths[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, beta, skip)


def _softplus(z, beta):
    return np.logaddexp(0.0, beta * z) / beta


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 3), x.shape[:-1]


def _forward(params, X):
    """Primal pass; returns output (B,) and the per-layer inputs and pre-activations."""
    inputs, pre = [], []
    a = X
    last = params.n_layers - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        if i == params.skip:
            a = np.concatenate([a, X], axis=1)
        inputs.append(a)
        z = a @ W.T + b
        if i == last:
            return z[:, 0], inputs, pre
        pre.append(z)
        a = _softplus(z, params.beta)


def mlp_forward(params, x):
    """Network output at a point (3,) or stacked points (..., 3)."""
    X, lead = _as_batch(x)
    y, _, _ = _forward(params, X)
    return y.reshape(lead) if lead else float(y[0])


def mlp_grad_input(params, x):
    """Reverse-mode gradient of the output with respect to the input point(s)."""
    X, lead = _as_batch(x)
    _, _, pre = _forward(params, X)
    beta = params.beta
    W = params.weights
    abar = np.broadcast_to(W[-1][0], (len(X), W[-1].shape[1]))
    xbar = np.zeros_like(X)
    for i in range(params.n_layers - 1, 0, -1):
        if i == params.skip:
            xbar += abar[:, -3:]
            abar = abar[:, :-3]
        zbar = abar * _sigmoid(beta * pre[i - 1])
        abar = zbar @ W[i - 1]
    xbar += abar
    return xbar.reshape(lead + (3,)) if lead else xbar[0]


def _forward_tangent(params, X):
    """Primal pass plus forward-mode tangents d(activation)/dx stored as (3, B, width)."""
    B = len(X)
    beta = params.beta
    E = np.zeros((3, B, 3))
    for k in range(3):
        E[k, :, k] = 1.0
    cache = []
    a, T = X, E
    last = params.n_layers - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        if i == params.skip:
            a = np.concatenate([a, X], axis=1)
            T = np.concatenate([T, E], axis=2)
        z = a @ W.T + b
        Z = T @ W.T
        if i == last:
            cache.append((a, T, None, None, None, None))
            return z[:, 0], Z[:, :, 0].T, cache
        s1 = _sigmoid(beta * z)
        s2 = beta * s1 * (1.0 - s1)
        cache.append((a, T, z, Z, s1, s2))
        a = np.logaddexp(0.0, beta * z) / beta
        T = Z * s1


def _backward_tangent(params, cache, ybar, gbar):
    """Parameter gradients for adjoints on the outputs ``y`` (B,) and input gradients ``g`` (B, 3)."""
    n = params.n_layers
    dW = [None] * n
    db = [None] * n
    W = params.weights
    a, T, *_ = cache[-1]
    B = len(a)
    Tf = T.reshape(3 * B, -1)
    gb = gbar.T.reshape(3 * B, 1)
    dW[-1] = ybar[None, :] @ a + gb.T @ Tf
    db[-1] = np.array([ybar.sum()])
    abar = ybar[:, None] * W[-1]
    Tbar = gbar.T[:, :, None] * W[-1][None]
    for i in range(n - 2, -1, -1):
        if i + 1 == params.skip:
            abar = abar[:, :-3]
            Tbar = Tbar[:, :, :-3]
        a, T, z, Z, s1, s2 = cache[i]
        Zbar = Tbar * s1
        s1bar = np.einsum("kbn,kbn->bn", Tbar, Z)
        zbar = abar * s1 + s1bar * s2
        width = Z.shape[2]
        Zf = Zbar.reshape(3 * B, width)
        dW[i] = zbar.T @ a + Zf.T @ T.reshape(3 * B, -1)
        db[i] = zbar.sum(axis=0)
        if i > 0:
            abar = zbar @ W[i]
            Tbar = (Zf @ W[i]).reshape(3, B, -1)
    return dW + db


def mlp_grad_params(params, x, value_adjoint, grad_adjoint=None):
    """Parameter gradients of ``sum(value_adjoint * y) + sum(grad_adjoint * dy/dx)``.

    Returns a list shaped like ``params.arrays()`` (weights first, then biases).
    """
    X, _ = _as_batch(x)
    ybar = np.asarray(value_adjoint, dtype=float).reshape(len(X))
    gbar = np.zeros((len(X), 3)) if grad_adjoint is None else np.asarray(grad_adjoint, dtype=float).reshape(len(X), 3)
    _, _, cache = _forward_tangent(params, X)
    return _backward_tangent(params, cache, ybar, gbar)


def nearest_surface_point(x, Q):
    """Exact nearest member of ``Q`` to ``x``; ties go to the lowest index."""
    Q = np.asarray(Q, dtype=float).reshape(-1, 3)
    if len(Q) == 0:
        raise ValueError("cannot project onto an empty cloud")
    d2 = np.sum((Q - np.asarray(x, dtype=float)) ** 2, axis=1)
    i = int(np.argmin(d2))
    return Q[i].copy(), i


def project_estimate(x, t, phi_x):
    """Move ``x`` by ``|phi_x|`` along the unit direction towards ``t``."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    diff = x - t
    r = np.linalg.norm(diff, axis=-1, keepdims=True)
    phi = np.asarray(phi_x, dtype=float)[..., None]
    close = r < 1e-12
    d = diff / np.where(close, 1.0, r)
    that = np.where(phi >= 0, x - d * phi, x + d * phi)
    return np.where(close, x, that)


@dataclass
class QuerySet:
    """Query points and the index of their nearest target point."""

    points: np.ndarray
    nearest: np.ndarray

    @classmethod
    def build(cls, points, Q, tree=None):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        tree = cKDTree(Q) if tree is None else tree
        _, idx = tree.query(points)
        return cls(points, np.asarray(idx, dtype=int))

    def __len__(self):
        return len(self.points)


def loss_self(params, query_set, Q, lambda_q):
    """Mean squared projection error over the queries plus the weighted mean |phi| on ``Q``."""
    Q = np.asarray(Q, dtype=float)
    t = Q[query_set.nearest]
    phi = mlp_forward(params, query_set.points).reshape(-1)
    that = project_estimate(query_set.points, t, phi)
    proj = np.mean(np.sum((that - t) ** 2, axis=1))
    return float(proj + lambda_q * np.mean(np.abs(mlp_forward(params, Q).reshape(-1))))


def loss_eikonal(params, points):
    g = mlp_grad_input(params, np.asarray(points, dtype=float).reshape(-1, 3))
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def _loss_and_grads(params, X, T, Qb, lambda_q, lambda_e):
    """Total training loss and its parameter gradients for one batch.

    ``X`` are queries with nearest targets ``T``; ``Qb`` are target points pinned to zero.
    Returns (loss_self, loss_eikonal, grads).
    """
    nx = len(X)
    y, g, cache = _forward_tangent(params, np.concatenate([X, Qb], axis=0))
    phi, phi_q = y[:nx], y[nx:]
    gx = g[:nx]

    diff = X - T
    r = np.linalg.norm(diff, axis=1)
    live = r >= 1e-12
    gap = np.where(live, r - np.abs(phi), r)
    proj = np.mean(gap**2)
    sgn = np.where(phi >= 0, 1.0, -1.0)
    ybar_x = np.where(live, -2.0 * gap * sgn, 0.0) / nx

    lq = np.mean(np.abs(phi_q))
    ybar_q = lambda_q * np.sign(phi_q) / len(Qb)

    gn = np.linalg.norm(gx, axis=1)
    eik = np.mean((gn - 1.0) ** 2)
    scale = np.where(gn > 0, 2.0 * (gn - 1.0) / np.where(gn > 0, gn, 1.0), 0.0)
    gbar = np.zeros((len(y), 3))
    gbar[:nx] = lambda_e * scale[:, None] * gx / nx

    ybar = np.concatenate([ybar_x, ybar_q])
    grads = _backward_tangent(params, cache, ybar, gbar)
    return proj + lambda_q * lq, eik, grads


@dataclass
class TrainConfig:
    lambda_q: float = 0.01
    lambda_e: float = 0.001
    steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    query_box_padding: float = 0.25
    seed: int = 0
    hidden_layers: int = 4
    hidden_width: int = 128
    beta: float = 100.0
    skip_layer: int | None = None
    refine_steps: int = 50

    def __post_init__(self):
        if self.lambda_q < 0 or self.lambda_e < 0:
            raise ValueError("loss weights must be non-negative")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.hidden_layers < 1 or self.hidden_width < 1 or self.refine_steps < 0:
            raise ValueError("network size and refine_steps must be positive")


@dataclass
class AdamState:
    """Adaptive-moment optimizer state; pass the same instance to keep moments across calls."""

    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    def step(self, arrays, grads):
        if not self.m:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = []
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            out.append(a - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


def median_spacing(Q):
    d, _ = cKDTree(Q).query(Q, k=2)
    return float(np.median(d[:, 1]))


def _run(params, Q, config, rng, steps, draw_queries, opt=None):
    tree = cKDTree(Q)
    opt = AdamState(config.learning_rate) if opt is None else opt
    arrays = params.arrays()
    trace = np.empty((steps, 3))
    nq = min(len(Q), config.batch_size)
    for step in range(steps):
        X = draw_queries(rng)
        _, idx = tree.query(X)
        Qb = Q[rng.choice(len(Q), size=nq, replace=False)]
        ls, le, grads = _loss_and_grads(params, X, Q[idx], Qb, config.lambda_q, config.lambda_e)
        total = ls + config.lambda_e * le
        if not np.isfinite(total):
            raise TrainingDivergedError(step, total)
        trace[step] = (ls, le, total)
        arrays = opt.step(arrays, grads)
        params = params.with_arrays(arrays)
    return params, trace


def fit_sdf(Q, config=None, extra_queries=None, optimizer=None):
    """Train a fresh network on target cloud ``Q``; returns (params, loss trace).

    The trace has one row per step: (loss_self, loss_eikonal, loss_total).
    Each step draws half its queries uniformly in the padded bounding box and
    half as Gaussian perturbations of target points. ``extra_queries`` (for
    example the source cloud) are mixed into every batch when given. An
    :class:`AdamState` passed as ``optimizer`` is updated in place.
    """
    config = config or TrainConfig()
    Q = np.asarray(Q, dtype=float)
    if len(Q) < 10:
        raise ValueError("need at least 10 target points to fit an SDF")
    rng = np.random.default_rng(config.seed)
    params = init_mlp(config.hidden_layers, config.hidden_width, config.beta, config.skip_layer, rng)
    lo = Q.min(axis=0) - config.query_box_padding
    hi = Q.max(axis=0) + config.query_box_padding
    sigma = 2.0 * median_spacing(Q)
    n_uni = config.batch_size // 2
    n_near = config.batch_size - n_uni
    extra = None if extra_queries is None else np.asarray(extra_queries, dtype=float).reshape(-1, 3)
    n_extra = 0 if extra is None else min(len(extra), config.batch_size)

    def draw(rng):
        parts = [
            rng.uniform(lo, hi, (n_uni, 3)),
            Q[rng.integers(0, len(Q), n_near)] + rng.normal(0.0, sigma, (n_near, 3)),
        ]
        if n_extra:
            parts.append(extra[rng.choice(len(extra), size=n_extra, replace=False)])
        return np.concatenate(parts, axis=0)

    return _run(params, Q, config, rng, config.steps, draw, optimizer)


def refine_sdf(params, Q, extra_queries, config=None, steps=None, seed=None, optimizer=None):
    """Continue training with queries drawn only from ``extra_queries``.

    Returns (params, loss trace). An empty query set leaves ``params`` untouched.
    """
    config = config or TrainConfig()
    steps = config.refine_steps if steps is None else steps
    extra = np.asarray(extra_queries, dtype=float).reshape(-1, 3)
    if len(extra) == 0 or steps == 0:
        return params, np.empty((0, 3))
    Q = np.asarray(Q, dtype=float)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    nb = min(len(extra), config.batch_size)

    def draw(rng):
        return extra[rng.choice(len(extra), size=nb, replace=False)]

    return _run(params, Q, config, rng, steps, draw, optimizer)


class NeuralSdf(SdfModel):
    """Adapter exposing a trained network through the :class:`SdfModel` interface."""

    def __init__(self, params):
        self.params = params

    def _value(self, x):
        return mlp_forward(self.params, x)

    def _gradient(self, x):
        return mlp_grad_input(self.params, x)


_MAGIC = b"SDFN"


def save_mlp(params, path):
    chunks = [struct.pack("<4sII", _MAGIC, 1, params.n_layers)]
    for W, b in zip(params.weights, params.biases):
        chunks.append(struct.pack("<II", *W.shape))
        chunks.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    skip = NO_SKIP if params.skip is None else params.skip
    chunks.append(struct.pack("<dI", params.beta, skip))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_mlp(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, version, n = struct.unpack_from("<4sII", blob, 0)
        if magic != _MAGIC or version != 1:
            raise ValueError(f"{path}: not an SDFN version 1 file")
        off = 12
        weights, biases = [], []
        for _ in range(n):
            rows, cols = struct.unpack_from("<II", blob, off)
            off += 8
            W = np.frombuffer(blob, "<f8", rows * cols, off).reshape(rows, cols).astype(float)
            off += 8 * rows * cols
            b = np.frombuffer(blob, "<f8", rows, off).astype(float)
            off += 8 * rows
            weights.append(W)
            biases.append(b)
        beta, skip = struct.unpack_from("<dI", blob, off)
        off += 12
    except struct.error as exc:
        raise ValueError(f"{path}: truncated model file") from exc
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after model")
    return MlpParams(weights, biases, beta, None if skip == NO_SKIP else skip)
