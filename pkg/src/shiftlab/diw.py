"""Dynamic importance weighting.

Weights are re-estimated in every mini-batch by kernel mean matching, not
on the raw inputs but on a low-dimensional transformation computed by the
current network: either the per-sample loss values (one column) or the
activations of a hidden layer, matched class by class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .erm import Loss, loss_eval
from .errors import BadLayer, DegenerateData, MaxIterExceeded, ShiftLabError
from .kernels import kernel_matrix, median_heuristic
from .nnet import Mlp, adam, backward, forward, loss_grad, minibatches
from .ratio import kmm_qp

TRANSFORMS = ("loss_value", "hidden")

# Batch kernels on one-dimensional loss values are close to singular, so the
# optimum is a flat face and the last digits are not worth the iterations.
BATCH_SOLVER = {"tol": 1e-6, "max_iter": 500}


@dataclass(frozen=True)
class DiwConfig:
    transform: str = "loss_value"
    layer_index: int = -2  # hidden version: -2 is the last hidden layer
    B: float = 10.0
    eps: float = 0.01
    bandwidth: Optional[float] = None  # None selects the median heuristic per batch
    pretrain_epochs: int = 1
    epochs: int = 20
    minibatch: int = 128
    lr: float = 1e-3

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"transform must be one of {TRANSFORMS}")
        if not self.B > 0:
            raise ValueError("B must be positive")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.epochs < 1 or self.minibatch < 1 or self.pretrain_epochs < 0:
            raise ValueError("epochs and minibatch must be positive")


@dataclass(frozen=True)
class ClassPriorRatio:
    w_y: np.ndarray
    absent: tuple = ()  # classes missing from the training labels

    def __getitem__(self, y):
        return self.w_y[y]


def class_prior_ratio(train_y, valid_y, k: int) -> ClassPriorRatio:
    """Ratio of label frequencies, validation over training, with add-one smoothing."""
    train_y = np.asarray(train_y).astype(int).ravel()
    valid_y = np.asarray(valid_y).astype(int).ravel()
    if train_y.size == 0 or valid_y.size == 0:
        raise ValueError("both label sets must be non-empty")
    c_tr = np.bincount(train_y, minlength=k)[:k]
    c_va = np.bincount(valid_y, minlength=k)[:k]
    w = ((c_va + 1.0) / valid_y.size) / ((c_tr + 1.0) / train_y.size)
    absent = tuple(int(c) for c in np.flatnonzero(c_tr == 0))
    return ClassPriorRatio(w, absent)


def _bandwidth(cfg: DiwConfig, z_tr, z_te) -> float:
    if cfg.bandwidth is not None:
        return cfg.bandwidth
    try:
        return median_heuristic(np.vstack([z_tr, z_te]))
    except DegenerateData:
        return 1.0


def minibatch_match(z_tr, z_te, cfg: DiwConfig, **solver) -> np.ndarray:
    """Kernel mean matching weights for ``z_tr`` against ``z_te``.

    Solves ``min w'Kw - 2 kappa'w`` over ``0 <= w <= B`` with
    ``|mean(w) - 1| <= eps`` and ``kappa_i = (n_tr/n_te) sum_j k(z_i, z_j^te)``.
    ``solver`` overrides :data:`BATCH_SOLVER`; when the iteration budget
    runs out, the best feasible iterate is returned.
    """
    z_tr = np.asarray(z_tr, dtype=float)
    z_te = np.asarray(z_te, dtype=float)
    if z_tr.ndim == 1:
        z_tr = z_tr[:, None]
    if z_te.ndim == 1:
        z_te = z_te[:, None]
    sigma = _bandwidth(cfg, z_tr, z_te)
    K = kernel_matrix(sigma, z_tr, z_tr)
    kappa = (z_tr.shape[0] / z_te.shape[0]) * kernel_matrix(sigma, z_tr, z_te).sum(axis=1)
    opts = {**BATCH_SOLVER, **solver}
    try:
        return kmm_qp(K, kappa, cfg.B, cfg.eps, **opts)
    except MaxIterExceeded as exc:
        return exc.best


def _scores(f: Mlp, x, loss: Loss):
    out = f(x)
    return out if loss.kind == "softmax_ce" else out[:, 0]


def transform_loss_value(f: Mlp, batch: Dataset, loss: Loss) -> np.ndarray:
    """Per-sample loss values of the current network as an ``n x 1`` matrix."""
    return np.asarray(loss_eval(loss, _scores(f, batch.x, loss), batch.y), dtype=float).reshape(-1, 1)


def transform_hidden(f: Mlp, x, layer_index: int) -> np.ndarray:
    """Output of layer ``layer_index`` (ReLU applied on hidden layers).

    Negative indices count from the output layer, so ``-1`` is the network
    output and ``-2`` the last hidden layer.
    """
    n = f.n_layers
    idx = layer_index + n if layer_index < 0 else layer_index
    if not 0 <= idx < n:
        raise BadLayer(f"layer index {layer_index} out of range for {n} layers")
    out, cache = forward(f, x)
    if idx == n - 1:
        return out
    return cache.inputs[idx + 1]


def normalize_mean_one(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    total = w.mean()
    if total <= 0:
        return np.ones_like(w)
    return w / total


def batch_weights(
    f: Mlp, tr: Dataset, va: Dataset, cfg: DiwConfig, loss: Loss, prior: Optional[ClassPriorRatio] = None
) -> np.ndarray:
    """Mini-batch importance weights, normalized to mean one."""
    if cfg.transform == "loss_value":
        w = minibatch_match(transform_loss_value(f, tr, loss), transform_loss_value(f, va, loss), cfg)
        return normalize_mean_one(w)
    z_tr = transform_hidden(f, tr.x, cfg.layer_index)
    z_va = transform_hidden(f, va.x, cfg.layer_index)
    y_tr, y_va = tr.labels, va.labels
    w = np.ones(tr.n)
    for c in np.unique(y_tr):
        rows = y_tr == c
        cols = y_va == c
        scale = 1.0 if prior is None else float(prior[int(c)])
        if rows.sum() >= 2 and cols.sum() >= 1:
            w[rows] = scale * minibatch_match(z_tr[rows], z_va[cols], cfg)
        else:
            w[rows] = scale
    return normalize_mean_one(w)


def _accuracy(f: Mlp, d: Dataset, loss: Loss) -> float:
    s = _scores(f, d.x, loss)
    if s.ndim == 2:
        return float(np.mean(np.argmax(s, axis=1) == d.labels))
    return float(np.mean(np.where(s >= 0, 1.0, -1.0) == np.ravel(d.y)))


def diw_train(
    train: Dataset,
    valid: Dataset,
    f: Mlp,
    cfg: DiwConfig,
    loss: Loss,
    rng,
    noise_mask=None,
    trace_path=None,
):
    """Train ``f`` in place with dynamically estimated weights.

    The first ``cfg.pretrain_epochs`` epochs are unweighted. Returns the
    network and the weight each training sample received in its last
    mini-batch. ``noise_mask`` (known corruptions) only feeds the trace.
    """
    if train.y is None or valid.y is None:
        raise ShiftLabError("DIW needs labelled training and validation data")
    prior = None
    if cfg.transform == "hidden":
        k = f.layer_sizes[-1]
        prior = class_prior_ratio(train.labels, valid.labels, k)
    opt = adam(cfg.lr)
    final = np.ones(train.n)
    mask = None if noise_mask is None else np.asarray(noise_mask, dtype=bool)
    rows = []
    va_size = min(cfg.minibatch, valid.n)
    for epoch in range(cfg.pretrain_epochs + cfg.epochs):
        weighted = epoch >= cfg.pretrain_epochs
        va_order = rng.permutation(valid.n)
        for b, idx in enumerate(minibatches(train.n, cfg.minibatch, rng)):
            tr = train.subset(idx)
            if weighted:
                start = (b * va_size) % valid.n
                jdx = np.resize(np.roll(va_order, -start), va_size)
                w = batch_weights(f, tr, valid.subset(jdx), cfg, loss, prior)
            else:
                w = np.ones(len(idx))
            final[idx] = w
            out, cache = forward(f, tr.x)
            _, d = loss_grad(loss, out, tr.y)
            d = d.reshape(out.shape) * (w / len(idx))[:, None]
            f.apply(opt, backward(f, cache, d))
            row = {"epoch": epoch, "batch": b, "mean_weight": float(w.mean())}
            if mask is not None:
                bad = mask[idx]
                row["mean_weight_intact"] = float(w[~bad].mean()) if (~bad).any() else float("nan")
                row["mean_weight_corrupted"] = float(w[bad].mean()) if bad.any() else float("nan")
            rows.append(row)
        rows[-1]["train_accuracy"] = _accuracy(f, train, loss)
        rows[-1]["valid_accuracy"] = _accuracy(f, valid, loss)
    if trace_path is not None:
        _write_trace(rows, trace_path)
    return f, final


def _write_trace(rows, path) -> None:
    fields = ["epoch", "batch", "mean_weight", "mean_weight_intact", "mean_weight_corrupted"]
    fields += ["train_accuracy", "valid_accuracy"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
