"""Layers with analytic gradients, losses, SGD and a finite-difference checker.

All arithmetic is float64. Image tensors are (N, C, H, W); sequences are
(B, T, F). A layer caches what it needs during ``forward`` and consumes it
in ``backward``, which accumulates parameter gradients into ``layer.grads``
and returns the gradient with respect to the layer input.
"""
from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .errors import BackwardBeforeForward, ProbNotNormalized, ShapeMismatch

__all__ = [
    "Layer",
    "Conv2D",
    "MaxPool2D",
    "GlobalAvgPool",
    "Dense",
    "ReLU",
    "Softmax",
    "Standardize",
    "LSTM",
    "glorot_uniform",
    "log_softmax",
    "softmax",
    "softmax_cross_entropy",
    "weighted_cross_entropy",
    "sgd_step",
    "clip_grad_norm",
    "grad_check",
]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class. Subclasses fill ``params`` and implement forward/backward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}  # state that SGD never touches
        self.trainable = True
        self._cache = None

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise BackwardBeforeForward(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def kink_state(self):
        """Snapshot of non-differentiable branch decisions, if any."""
        return None

    def __call__(self, x, training=False):
        return self.forward(x, training)


class Conv2D(Layer):
    """Stride-1 2D cross-correlation (no kernel flip) with zero padding."""

    def __init__(self, in_channels, out_channels, kernel_size=3, padding="same", rng=None):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, k
        self.pad = k // 2 if padding == "same" else 0
        self.params["w"] = glorot_uniform(rng, (out_channels, in_channels, k, k),
                                          in_channels * k * k, out_channels * k * k)
        self.params["b"] = np.zeros(out_channels)
        self._init_grads()

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"Conv2D expects (N, {self.in_channels}, H, W), got {x.shape}")
        x = np.ascontiguousarray(x, dtype=np.float64)
        self._cache = x
        return _kernels.conv2d_forward(x, self.params["w"], self.params["b"], self.pad)

    def backward(self, dy):
        x = self._need_cache()
        dx, dw, db = _kernels.conv2d_backward(x, self.params["w"], np.ascontiguousarray(dy), self.pad)
        self.grads["w"] += dw
        self.grads["b"] += db
        return dx


class MaxPool2D(Layer):
    """2x2 max pooling, stride 2. Ties go to the first element in row-major order."""

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeMismatch(f"MaxPool2D expects (N, C, H>=2, W>=2), got {x.shape}")
        y, idx = _kernels.maxpool2_forward(np.ascontiguousarray(x, dtype=np.float64))
        self._cache = (x.shape, idx)
        return y

    def backward(self, dy):
        shape, idx = self._need_cache()
        return _kernels.maxpool2_backward(np.ascontiguousarray(dy), idx, shape)

    def kink_state(self):
        return None if self._cache is None else self._cache[1]


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C)."""

    def forward(self, x, training=False):
        if x.ndim != 4:
            raise ShapeMismatch(f"GlobalAvgPool expects a 4D input, got {x.shape}")
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        N, C, H, W = self._need_cache()
        return np.broadcast_to(dy[:, :, None, None] / (H * W), (N, C, H, W)).copy()


class Dense(Layer):
    """y = x W + b for row-vector inputs (N, in)."""

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["w"] = glorot_uniform(rng, (in_features, out_features), in_features, out_features)
        self.params["b"] = np.zeros(out_features)
        self._init_grads()

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"Dense expects (N, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        x = self._need_cache()
        self.grads["w"] += x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["w"].T


class ReLU(Layer):
    def forward(self, x, training=False):
        mask = x > 0  # derivative at exactly 0 is 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._need_cache(), dy, 0.0)

    def kink_state(self):
        return self._cache


class Softmax(Layer):
    """Row-wise softmax; backward is the full Jacobian-vector product."""

    def forward(self, x, training=False):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, dy):
        p = self._need_cache()
        return p * (dy - (dy * p).sum(axis=1, keepdims=True))


class Standardize(Layer):
    """Fixed affine standardisation ``(x - mean) * scale``.

    With ``features > 1`` the statistics are per entry of the last axis;
    with ``features == 1`` a single mean and scale cover every value, so the
    layer accepts any shape. The statistics are buffers set by :meth:`fit`,
    never by SGD. Spreads below 1% of the median spread are floored there so
    that a feature that was silent at fit time cannot blow up later, and a
    constant input keeps scale 1.
    """

    def __init__(self, features=1):
        super().__init__()
        self.features = int(features)
        self.buffers["mean"] = np.zeros(self.features)
        self.buffers["scale"] = np.ones(self.features)
        self.buffers["fitted"] = np.zeros(1)

    @property
    def fitted(self) -> bool:
        return bool(self.buffers["fitted"][0])

    def fit(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if self.features > 1 and x.shape[-1] != self.features:
            raise ShapeMismatch(f"Standardize expects {self.features} features, got shape {x.shape}")
        x = x.reshape(-1, self.features)
        std = x.std(axis=0)
        spread = np.maximum(std, 0.01 * float(np.median(std)))
        self.buffers["mean"][...] = x.mean(axis=0)
        self.buffers["scale"][...] = np.divide(1.0, spread, out=np.ones_like(spread), where=spread > 0)
        self.buffers["fitted"][0] = 1.0

    def forward(self, x, training=False):
        if self.features > 1 and x.shape[-1] != self.features:
            raise ShapeMismatch(f"Standardize expects {self.features} features, got shape {x.shape}")
        self._cache = True
        if self.features == 1:
            return (x - self.buffers["mean"][0]) * self.buffers["scale"][0]
        return (x - self.buffers["mean"]) * self.buffers["scale"]

    def backward(self, dy):
        self._need_cache()
        if self.features == 1:
            return dy * self.buffers["scale"][0]
        return dy * self.buffers["scale"]


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_GATES = ("i", "f", "g", "o")


class LSTM(Layer):
    """Single-layer LSTM returning only the final hidden state.

    Input, forget and output gates use the logistic sigmoid; the candidate
    and the cell output use tanh. Parameters are kept as four input matrices
    ``W_*`` (F, U), four recurrent matrices ``U_*`` (U, U) and four biases.
    The forget-gate bias starts at 1.
    """

    def __init__(self, in_features, units, rng=None, forget_bias=1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.units = in_features, units
        for g in _GATES:
            self.params[f"W_{g}"] = glorot_uniform(rng, (in_features, units), in_features, units)
        for g in _GATES:
            self.params[f"U_{g}"] = glorot_uniform(rng, (units, units), units, units)
        for g in _GATES:
            self.params[f"b_{g}"] = np.full(units, forget_bias if g == "f" else 0.0)
        self._init_grads()

    def _stacked(self):
        W = np.concatenate([self.params[f"W_{g}"] for g in _GATES], axis=1)
        U = np.concatenate([self.params[f"U_{g}"] for g in _GATES], axis=1)
        b = np.concatenate([self.params[f"b_{g}"] for g in _GATES])
        return W, U, b

    def forward(self, x, training=False):
        if x.ndim != 3 or x.shape[2] != self.in_features or x.shape[1] < 1:
            raise ShapeMismatch(f"LSTM expects (B, T>=1, {self.in_features}), got {x.shape}")
        B, T, _ = x.shape
        n = self.units
        W, U, b = self._stacked()
        zx = x @ W + b  # (B, T, 4U)
        h = np.zeros((B, n))
        c = np.zeros((B, n))
        gates = np.empty((T, B, 4 * n))
        cs = np.empty((T + 1, B, n))
        hs = np.empty((T + 1, B, n))
        cs[0], hs[0] = c, h
        for t in range(T):
            z = zx[:, t] + h @ U
            a = np.empty_like(z)
            a[:, :2 * n] = _sigmoid(z[:, :2 * n])
            a[:, 2 * n:3 * n] = np.tanh(z[:, 2 * n:3 * n])
            a[:, 3 * n:] = _sigmoid(z[:, 3 * n:])
            i, f, g, o = a[:, :n], a[:, n:2 * n], a[:, 2 * n:3 * n], a[:, 3 * n:]
            c = f * c + i * g
            h = o * np.tanh(c)
            gates[t], cs[t + 1], hs[t + 1] = a, c, h
        self._cache = (x, W, U, gates, cs, hs)
        return h

    def backward(self, dy):
        x, W, U, gates, cs, hs = self._need_cache()
        B, T, F = x.shape
        n = self.units
        dW = np.zeros_like(W)
        dU = np.zeros_like(U)
        db = np.zeros(4 * n)
        dx = np.empty_like(x)
        dh = np.array(dy, dtype=np.float64)
        dc = np.zeros((B, n))
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, g, o = a[:, :n], a[:, n:2 * n], a[:, 2 * n:3 * n], a[:, 3 * n:]
            tc = np.tanh(cs[t + 1])
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = np.empty((B, 4 * n))
            dz[:, :n] = dc * g * i * (1.0 - i)
            dz[:, n:2 * n] = dc * cs[t] * f * (1.0 - f)
            dz[:, 2 * n:3 * n] = dc * i * (1.0 - g * g)
            dz[:, 3 * n:] = dh * tc * o * (1.0 - o)
            dW += x[:, t].T @ dz
            dU += hs[t].T @ dz
            db += dz.sum(axis=0)
            dx[:, t] = dz @ W.T
            dh = dz @ U.T
            dc = dc * f
        for k, g in enumerate(_GATES):
            sl = slice(k * n, (k + 1) * n)
            self.grads[f"W_{g}"] += dW[:, sl]
            self.grads[f"U_{g}"] += dU[:, sl]
            self.grads[f"b_{g}"] += db[sl]
        return dx


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def _sample_weights(labels, weights, k):
    if weights is None:
        return np.ones(len(labels))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ShapeMismatch(f"expected {k} class weights, got shape {weights.shape}")
    return weights[labels]


def _check_labels(labels, b, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ShapeMismatch(f"expected {b} labels, got shape {labels.shape}")
    if b and (labels.min() < 0 or labels.max() >= k):
        raise ShapeMismatch(f"labels must lie in [0, {k - 1}]")
    return labels


def softmax_cross_entropy(logits, labels, weights=None):
    """Fused, log-sum-exp stabilised softmax + weighted cross-entropy.

    Returns ``(loss, probs, dlogits)`` where loss is the batch mean of
    ``w[y] * -log p[y]``.
    """
    B, K = logits.shape
    labels = _check_labels(labels, B, K)
    sw = _sample_weights(labels, weights, K)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    rows = np.arange(B)
    loss = float(np.sum(sw * -logp[rows, labels]) / B)
    d = probs.copy()
    d[rows, labels] -= 1.0
    d *= sw[:, None] / B
    return loss, probs, d


def weighted_cross_entropy(probs, labels, weights=None):
    """Weighted CE on already-normalised probabilities.

    Returns ``(loss, grad)``; ``grad`` is the gradient with respect to the
    logits that produced ``probs`` through a softmax head.
    """
    probs = np.asarray(probs, dtype=np.float64)
    B, K = probs.shape
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9) or np.any(probs < 0):
        raise ProbNotNormalized("probability rows must be non-negative and sum to 1")
    labels = _check_labels(labels, B, K)
    sw = _sample_weights(labels, weights, K)
    rows = np.arange(B)
    with np.errstate(divide="ignore"):
        nll = -np.log(probs[rows, labels])
    loss = float(np.sum(sw * nll) / B)
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad *= sw[:, None] / B
    return loss, grad


def clip_grad_norm(layers, max_norm: float) -> float:
    """Rescale the gradients of trainable layers so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [g for layer in layers if layer.trainable for g in layer.grads.values()]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def sgd_step(layers, lr: float) -> None:
    """Plain SGD on trainable layers; all gradients are zeroed afterwards."""
    for layer in layers:
        if layer.trainable:
            for name, p in layer.params.items():
                p -= lr * layer.grads[name]
        layer.zero_grad()


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def _kinks(layers):
    return [None if s is None else s.copy() for s in (l.kink_state() for l in layers)]


def _same_kinks(a, b):
    return all((x is None and y is None) or (x is not None and y is not None and x.shape == y.shape
                                             and np.array_equal(x, y)) for x, y in zip(a, b))


def grad_check(target, x, epsilon=1e-5, *, labels=None, weights=None, max_coords=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``target`` is a Layer (checked on the scalar ``sum(forward(x) * R)`` for a
    fixed random ``R``) or a model exposing ``layers``, ``forward`` and
    ``backward`` (checked on its weighted cross-entropy at ``labels``). The
    error for one coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``; both
    parameters and the input are checked. Coordinates where a perturbation
    flips a ReLU mask or max-pool winner are skipped. ``max_coords`` limits
    the number of randomly chosen coordinates per tensor.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    is_layer = isinstance(target, Layer)
    layers = [target] if is_layer else list(target.layers)

    if is_layer:
        R = rng.normal(size=target.forward(x, training=True).shape)

        def f(inp):
            return float(np.sum(target.forward(inp, training=True) * R))

        def analytic(inp):
            target.zero_grad()
            target.forward(inp, training=True)
            return target.backward(R)
    else:
        def f(inp):
            return target.loss(inp, labels, weights)

        def analytic(inp):
            target.zero_grad()
            target.loss(inp, labels, weights)
            return target.backward()

    dx = analytic(x)
    base_kinks = _kinks(layers)
    checks = [(x, dx, True)]
    for layer in layers:
        for name, p in layer.params.items():
            checks.append((p, layer.grads[name].copy(), False))

    worst = 0.0
    for arr, grad, is_input in checks:
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = rng.choice(arr.size, size=max_coords, replace=False)
        for j in flat_idx:
            pos = np.unravel_index(j, arr.shape)
            orig = arr[pos]
            arr[pos] = orig + epsilon
            fp = f(x)
            kp = _kinks(layers)
            arr[pos] = orig - epsilon
            fm = f(x)
            km = _kinks(layers)
            arr[pos] = orig
            if not (_same_kinks(base_kinks, kp) and _same_kinks(base_kinks, km)):
                continue
            num = (fp - fm) / (2.0 * epsilon)
            a = grad[pos]
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    return worst
