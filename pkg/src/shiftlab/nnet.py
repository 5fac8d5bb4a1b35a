"""A small fully connected ReLU network with hand-written backpropagation.

Parameters are stored per layer as ``W`` (``fan_in x fan_out``) and ``b``.
``forward`` returns a cache tagged with the parameter version; any update
through :meth:`Mlp.apply` or :meth:`Mlp.set_params` invalidates older
caches, and ``backward`` refuses them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .errors import BadLayer, DimensionMismatch, NonDifferentiable, ParseError, StaleCache, TaskMismatch

MAGIC = b"MLP1"


@dataclass(frozen=True)
class Cache:
    version: int
    inputs: tuple  # input of every layer
    pre: tuple  # pre-activation of every layer


class Mlp:
    """ReLU on hidden layers, identity on the output layer."""

    def __init__(self, weights, biases):
        if len(weights) == 0 or len(weights) != len(biases):
            raise BadLayer("need one bias per weight matrix and at least one layer")
        ws, bs = [], []
        for i, (W, b) in enumerate(zip(weights, biases)):
            W = np.array(W, dtype=float, ndmin=2)
            b = np.array(b, dtype=float).ravel()
            if b.size != W.shape[1]:
                raise BadLayer(f"layer {i}: bias has {b.size} entries for {W.shape[1]} units")
            if ws and ws[-1].shape[1] != W.shape[0]:
                raise BadLayer(f"layer {i}: expects {W.shape[0]} inputs, previous layer gives {ws[-1].shape[1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise BadLayer(f"layer {i}: non-finite parameters")
            ws.append(W)
            bs.append(b)
        self.weights: List[np.ndarray] = ws
        self.biases: List[np.ndarray] = bs
        self.version = 0

    @classmethod
    def init(cls, layer_sizes, rng) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise BadLayer(f"invalid layer sizes {sizes}")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list:
        """Parameter arrays in the order ``W0, b0, W1, b1, ...``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def set_params(self, params) -> None:
        params = list(params)
        if len(params) != 2 * self.n_layers:
            raise BadLayer(f"expected {2 * self.n_layers} arrays, got {len(params)}")
        for i in range(self.n_layers):
            W = np.asarray(params[2 * i], dtype=float)
            b = np.asarray(params[2 * i + 1], dtype=float)
            if W.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise BadLayer(f"layer {i}: shape mismatch")
            self.weights[i] = W.copy()
            self.biases[i] = b.copy()
        self.version += 1

    def apply(self, opt: "OptState", grads, frozen_layers: int = 0) -> None:
        """Optimizer update; the first ``frozen_layers`` layers stay fixed."""
        skip = 2 * frozen_layers
        step(opt, self.params()[skip:], list(grads)[skip:])
        self.version += 1

    def clone(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x):
        return forward(self, x)[0]

    def hidden(self, x):
        """Activations of the last hidden layer (the input for a 1-layer net)."""
        cache = forward(self, x)[1]
        return cache.inputs[-1]


def _check_input(m: Mlp, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if m.layer_sizes[0] == 1 else x[None, :]
    if x.shape[1] != m.layer_sizes[0]:
        raise DimensionMismatch(f"input has {x.shape[1]} columns, network expects {m.layer_sizes[0]}")
    return x


def forward(m: Mlp, x):
    """Outputs (``n x k``) and the cache needed by :func:`backward`."""
    h = _check_input(m, x)
    inputs, pre = [], []
    last = m.n_layers - 1
    for i, (W, b) in enumerate(zip(m.weights, m.biases)):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return h, Cache(m.version, tuple(inputs), tuple(pre))


def backward(m: Mlp, cache: Cache, grad_out, input_grad: bool = False):
    """Gradients ``[dW0, db0, dW1, db1, ...]`` of ``sum(grad_out * outputs)``.

    With ``input_grad=True`` the gradient with respect to the input batch
    is returned as well, as ``(grads, dx)``.
    """
    if cache.version != m.version:
        raise StaleCache(f"cache from parameter version {cache.version}, network is at {m.version}")
    delta = np.asarray(grad_out, dtype=float)
    if delta.ndim == 1:
        delta = delta[:, None]
    if delta.shape != cache.pre[-1].shape:
        raise DimensionMismatch(f"grad_out shape {delta.shape} != output shape {cache.pre[-1].shape}")
    grads = [None] * (2 * m.n_layers)
    for i in range(m.n_layers - 1, -1, -1):
        if i < m.n_layers - 1:
            delta = delta * (cache.pre[i] > 0)
        grads[2 * i] = cache.inputs[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0 or input_grad:
            delta = delta @ m.weights[i].T
    if input_grad:
        return grads, delta
    return grads


# --------------------------------------------------------------------------
# losses with gradients


def loss_grad(loss, logits, y):
    """Per-sample loss values and their gradients with respect to ``logits``.

    ``softmax_ce`` takes ``n x k`` logits and 0-based labels; the other
    losses take one score per sample (a vector or ``n x 1``) and, for the
    margin losses, labels in {-1, +1}. The gradient has the shape of
    ``logits``. The hinge subgradient at margin exactly one is zero.
    """
    kind = loss.kind
    logits = np.asarray(logits, dtype=float)
    if kind == "zero_one":
        raise NonDifferentiable("the 0-1 loss has no useful gradient")
    if kind == "softmax_ce":
        z = np.atleast_2d(logits)
        if z.shape[1] < 2:
            raise TaskMismatch("softmax_ce needs at least two logits per sample")
        yi = np.atleast_1d(np.asarray(y).astype(int))
        rows = np.arange(z.shape[0])
        value = -log_softmax(z, axis=1)[rows, yi]
        grad = softmax(z, axis=1)
        grad[rows, yi] -= 1.0
        return value, grad.reshape(logits.shape)
    column = logits.ndim == 2
    if column and logits.shape[1] != 1:
        raise TaskMismatch(f"{kind} expects one score per sample")
    f = logits.ravel()
    y = np.asarray(y, dtype=float).ravel()
    if kind == "squared":
        value, g = (f - y) ** 2, 2.0 * (f - y)
    elif kind == "logistic":
        margin = y * f
        value, g = np.logaddexp(0.0, -margin), -y * expit(-margin)
    elif kind == "hinge":
        margin = y * f
        value, g = np.maximum(0.0, 1.0 - margin), np.where(margin < 1.0, -y, 0.0)
    elif kind == "tukey":
        from .erm import tukey_loss, tukey_weight

        r = f - y
        value, g = tukey_loss(r, loss.rho), 6.0 * r * tukey_weight(r, loss.rho) / loss.rho**2
    else:
        raise NonDifferentiable(f"no gradient for {kind}")
    return value, g.reshape(logits.shape)


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[list] = field(default=None, repr=False)
    v: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def sgd(lr: float) -> OptState:
    return OptState("sgd", lr)


def adam(lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptState:
    return OptState("adam", lr, beta1, beta2, eps)


def step(opt: OptState, params, grads):
    """Update ``params`` in place and return them."""
    if len(params) != len(grads):
        raise DimensionMismatch(f"{len(params)} parameters, {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise DimensionMismatch(f"parameter shape {np.shape(p)} vs gradient {np.shape(g)}")
    if opt.kind == "sgd":
        for p, g in zip(params, grads):
            p -= opt.lr * g
        return params
    if opt.m is None:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    opt.t += 1
    c1 = 1.0 - opt.beta1**opt.t
    c2 = 1.0 - opt.beta2**opt.t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


def minibatches(n: int, size: int, rng):
    """Index blocks of a fresh permutation; the last block may be short."""
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, max(1, size))]


# --------------------------------------------------------------------------
# checkpoints


def save(m: Mlp, path) -> None:
    sizes = m.layer_sizes
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for W, b in zip(m.weights, m.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load(path) -> Mlp:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ParseError("not an MLP1 checkpoint", 0)
    try:
        (count,) = struct.unpack_from("<I", blob, 4)
        sizes = struct.unpack_from(f"<{count}I", blob, 8)
    except struct.error as exc:
        raise ParseError("truncated checkpoint header", 0) from exc
    offset = 8 + 4 * count
    expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if len(blob) - offset != 8 * expected:
        raise ParseError(f"checkpoint holds {len(blob) - offset} payload bytes, layer sizes need {8 * expected}", 0)
    values = np.frombuffer(blob, dtype="<f8", offset=offset)
    weights, biases, pos = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(values[pos : pos + a * b].reshape(a, b).copy())
        pos += a * b
        biases.append(values[pos : pos + b].copy())
        pos += b
    return Mlp(weights, biases)
