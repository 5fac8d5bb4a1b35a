"""Joint importance/predictor learning by upper-bound minimization.

The objective is the empirical upper bound on the squared test risk,

    J_ub(f, g) = (mean_i g(x_i) l_ub(f(x_i), y_i))^2
                 + m^2 (mean_i g(x_i)^2 - 2 mean_j g(x_j^te)),

reported without the constant ``C = E_tr[w^2] / 2``. Values are therefore
only comparable within one dataset. ``g`` is clamped at zero wherever it
is used.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .data import Dataset
from .erm import LinearPredictor, Loss, UnsupportedLoss, irls_tukey_fit, loss_eval, weighted_krr_fit
from .errors import RequiresOracle
from .kernels import GaussianBasis, design_matrix
from .nnet import Mlp, adam, backward, forward, loss_grad, minibatches
from .numerics import spd_solve


@dataclass(frozen=True)
class OneStepConfig:
    m: float = 1.0
    lam: float = 0.1
    mu: float = 0.01
    rounds: int = 10
    loss_ub: Loss = field(default_factory=lambda: Loss("squared"))
    epochs_g: int = 5
    epochs_f: int = 10
    minibatch: int = 64
    pretrain_g: bool = False
    pretrain_epochs: int = 5
    lr_f: float = 1e-3
    lr_g: float = 1e-3
    tukey_scale: Any = "none"

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0):
            raise ValueError("lam and mu must be positive")
        if self.rounds < 1:
            raise ValueError("need at least one round")
        if self.m <= 0:
            raise ValueError("m must be positive")
        if min(self.epochs_g, self.epochs_f, self.minibatch) < 1:
            raise ValueError("epochs and minibatch size must be positive")


@dataclass
class JointModel:
    f: Any
    g: Any
    trace: list = field(default_factory=list)

    def weights(self, x):
        return clamp_weights(self.g, x)


def outputs(model, x):
    """Scores of a LinearPredictor or Mlp (1-column outputs are flattened)."""
    out = np.asarray(model(x), dtype=float)
    if out.ndim == 2 and out.shape[1] == 1:
        out = out[:, 0]
    return out


def clamp_weights(g, x):
    return np.maximum(outputs(g, x), 0.0)


def jub_terms(g_tr, losses, g_te, m):
    """Both terms of the C-dropped objective from raw vectors."""
    first = np.mean(g_tr * losses) ** 2
    second = m * m * (np.mean(g_tr**2) - 2.0 * np.mean(g_te))
    return first, second


def jub_empirical(jm: JointModel, train: Dataset, test_x, cfg: OneStepConfig) -> float:
    g_tr = clamp_weights(jm.g, train.x)
    g_te = clamp_weights(jm.g, test_x)
    losses = loss_eval(cfg.loss_ub, outputs(jm.f, train.x), train.y)
    first, second = jub_terms(g_tr, losses, g_te, cfg.m)
    return float(first + second)


# --------------------------------------------------------------------------
# Upper-bound check on data with a known density ratio


@dataclass(frozen=True)
class BoundCheck:
    lhs: float  # R(f)^2 / 2
    j: float
    j_ub: float
    lhs_se: float
    j_se: float
    j_ub_se: float


def _se_of_square(values):
    """Delta-method standard error of ``mean(values)**2``."""
    n = values.size
    return abs(2.0 * values.mean()) * values.std(ddof=1) / np.sqrt(n)


def upper_bound_check(f, g, oracle, loss: Loss, loss_ub: Loss, m: float, n_mc: int, rng) -> BoundCheck:
    """Monte-Carlo estimates of ``R(f)^2/2``, ``J(f, g)`` and ``J_ub(f, g)``.

    ``oracle`` must provide ``sample_train(n, rng)``, ``sample_test(n, rng)``
    (each returning ``(x, y)``) and ``ratio(x)``. The test risk is
    estimated from an independent test sample; ``g`` is clamped at zero.
    """
    for attr in ("sample_train", "sample_test", "ratio"):
        if not hasattr(oracle, attr):
            raise RequiresOracle(f"oracle lacks {attr}()")
    x_tr, y_tr = oracle.sample_train(n_mc, rng)
    x_te, y_te = oracle.sample_test(n_mc, rng)
    w = oracle.ratio(x_tr)
    g_tr = clamp_weights(g, x_tr)
    f_tr = outputs(f, x_tr)
    l_te = loss_eval(loss, outputs(f, x_te), y_te)
    l_tr = loss_eval(loss, f_tr, y_tr)
    lub_tr = loss_eval(loss_ub, f_tr, y_tr)

    gap = (g_tr - w) ** 2
    gap_se = gap.std(ddof=1) / np.sqrt(n_mc)
    lhs = 0.5 * l_te.mean() ** 2
    j = np.mean(g_tr * l_tr) ** 2 + m * m * gap.mean()
    j_ub = np.mean(g_tr * lub_tr) ** 2 + m * m * gap.mean()
    return BoundCheck(
        lhs=float(lhs),
        j=float(j),
        j_ub=float(j_ub),
        lhs_se=float(0.5 * _se_of_square(l_te)),
        j_se=float(np.hypot(_se_of_square(g_tr * l_tr), m * m * gap_se)),
        j_ub_se=float(np.hypot(_se_of_square(g_tr * lub_tr), m * m * gap_se)),
    )


# --------------------------------------------------------------------------
# Alternating minimization with linear-in-parameter models


def beta_step(psi_tr, psi_te, losses, m: float, lam: float):
    """Exact minimizer in ``beta`` of ``J_ub + lam ||beta||^2`` for fixed losses.

    Returns ``(beta_unclamped, A, rhs)`` so callers can audit the system.
    """
    n_tr = psi_tr.shape[0]
    v = psi_tr.T @ losses
    A = psi_tr.T @ psi_tr / n_tr + np.outer(v, v) / (m * m * n_tr * n_tr)
    A = A + (lam / (m * m)) * np.eye(A.shape[0])
    rhs = psi_te.mean(axis=0)
    return spd_solve(A, rhs), A, rhs


def onestep_linear(
    train: Dataset,
    test_x,
    basis_f: GaussianBasis,
    basis_g: GaussianBasis,
    cfg: OneStepConfig,
    alpha0: Optional[np.ndarray] = None,
    test_y=None,
) -> JointModel:
    """Alternate a closed-form ``g``-step with a weighted-ERM ``f``-step.

    ``alpha0`` defaults to zeros. Each round appends a trace row with the
    C-dropped objective, the training weighted risk, the beta-system
    residual and (when ``test_y`` is given) the test MSE.
    """
    kind = cfg.loss_ub.kind
    if kind not in ("squared", "tukey"):
        raise UnsupportedLoss(f"linear one-step supports squared and tukey, not {kind}")
    x, y = train.x, train.y
    phi_tr = design_matrix(basis_f, x)
    psi_tr = design_matrix(basis_g, x)
    psi_te = design_matrix(basis_g, test_x)
    alpha = np.zeros(basis_f.size) if alpha0 is None else np.asarray(alpha0, dtype=float)
    f = LinearPredictor(basis_f, alpha)
    g = LinearPredictor(basis_g, np.zeros(basis_g.size))
    rho = cfg.loss_ub.rho
    trace = []
    for t in range(cfg.rounds):
        losses = loss_eval(Loss(kind, rho=rho), phi_tr @ f.alpha, y)
        beta_raw, A, rhs = beta_step(psi_tr, psi_te, losses, cfg.m, cfg.lam)
        residual = float(np.max(np.abs(A @ beta_raw - rhs)))
        g = LinearPredictor(basis_g, np.maximum(beta_raw, 0.0))
        w = psi_tr @ g.alpha
        if kind == "squared":
            f = weighted_krr_fit(x, y, w, basis_f, cfg.mu)
        else:
            fit = irls_tukey_fit(x, y, w, basis_f, cfg.mu, rho=cfg.loss_ub.rho, scale=cfg.tukey_scale)
            f, rho = fit.predictor, fit.rho
        losses = loss_eval(Loss(kind, rho=rho), phi_tr @ f.alpha, y)
        first, second = jub_terms(w, losses, psi_te @ g.alpha, cfg.m)
        row = {
            "round": t,
            "jub": float(first + second),
            "train_weighted_risk": float(np.mean(w * losses)),
            "beta_residual": residual,
            "beta_clamped": int(np.sum(beta_raw < 0)),
        }
        if test_y is not None:
            row["test_mse"] = float(np.mean((outputs(f, test_x) - np.ravel(test_y)) ** 2))
        trace.append(row)
    return JointModel(f, g, trace)


def write_trace(trace, path) -> None:
    """Per-round diagnostics as CSV (columns follow the first row)."""
    if not trace:
        fields = ["round", "jub", "train_weighted_risk"]
    else:
        fields = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# --------------------------------------------------------------------------
# Gradient-based alternating minimization with networks


def g_objective_grad(g: Mlp, x_tr, losses, x_te, m: float):
    """Mini-batch ``J_ub`` and its gradients with respect to ``g``'s parameters.

    ``losses`` are the (fixed) per-sample ``l_ub`` values of the frozen
    predictor on ``x_tr``. The clamp ``max(g, 0)`` passes zero gradient
    where ``g`` is negative.
    """
    out_tr, cache_tr = forward(g, x_tr)
    out_te, cache_te = forward(g, x_te)
    raw_tr, raw_te = out_tr[:, 0], out_te[:, 0]
    g_tr, g_te = np.maximum(raw_tr, 0.0), np.maximum(raw_te, 0.0)
    losses = np.asarray(losses, dtype=float).ravel()
    n, k = g_tr.size, g_te.size
    s = np.mean(g_tr * losses)
    value = s * s + m * m * (np.mean(g_tr**2) - 2.0 * np.mean(g_te))
    d_tr = (2.0 * s * losses / n + 2.0 * m * m * g_tr / n) * (raw_tr > 0)
    d_te = np.full(k, -2.0 * m * m / k) * (raw_te > 0)
    grads_tr = backward(g, cache_tr, d_tr[:, None])
    grads_te = backward(g, cache_te, d_te[:, None])
    return float(value), [a + b for a, b in zip(grads_tr, grads_te)]


def batch_weights(g_values):
    """Clamp and normalize to sum one; an all-zero batch falls back to uniform."""
    w = np.maximum(np.asarray(g_values, dtype=float).ravel(), 0.0)
    total = w.sum()
    if total <= 0:
        return np.full(w.size, 1.0 / w.size)
    return w / total


def _pretrain_discriminator(g: Mlp, x_tr, x_te, cfg: OneStepConfig, rng) -> None:
    """Logistic train-vs-test training of ``g``, then a fresh output layer."""
    x = np.vstack([x_tr, x_te])
    labels = np.concatenate([-np.ones(len(x_tr)), np.ones(len(x_te))])
    opt = adam(cfg.lr_g)
    logistic = Loss("logistic")
    for _ in range(cfg.pretrain_epochs):
        for idx in minibatches(len(x), cfg.minibatch, rng):
            out, cache = forward(g, x[idx])
            _, d = loss_grad(logistic, out, labels[idx])
            g.apply(opt, backward(g, cache, d / len(idx)))
    g.weights[-1][...] = 0.0
    g.biases[-1][...] = 1.0
    g.version += 1


def _metric(f, x, y, loss: Loss):
    out = f(x)
    if loss.kind in ("squared", "tukey"):
        return "test_mse", float(np.mean((outputs(f, x) - np.ravel(y)) ** 2))
    if out.shape[1] > 1:
        pred = np.argmax(out, axis=1)
        return "test_accuracy", float(np.mean(pred == np.asarray(y).astype(int)))
    return "test_accuracy", float(np.mean(np.where(out[:, 0] >= 0, 1.0, -1.0) == np.ravel(y)))


def onestep_gradient(
    train: Dataset,
    test_x,
    f: Mlp,
    g: Mlp,
    cfg: OneStepConfig,
    rng,
    test_y=None,
) -> JointModel:
    """Alternate gradient steps on ``J_ub`` (for ``g``) and weighted risk (for ``f``).

    ``f`` and ``g`` are trained in place. ``g`` must have one output; its
    output bias is set to one before training so that initial weights are
    uniform. With ``cfg.pretrain_g`` the network is first trained as a
    train-vs-test discriminator and its first layer is then kept fixed.
    """
    if g.layer_sizes[-1] != 1:
        raise ValueError("g must have a single output")
    x_tr = np.asarray(train.x, dtype=float)
    x_te = np.asarray(test_x, dtype=float)
    if x_te.ndim == 1:
        x_te = x_te[:, None]
    y = train.y
    loss = cfg.loss_ub
    frozen = 0
    g.biases[-1][...] = 1.0
    g.version += 1
    if cfg.pretrain_g:
        _pretrain_discriminator(g, x_tr, x_te, cfg, rng)
        frozen = 1 if g.n_layers > 1 else 0
    opt_f, opt_g = adam(cfg.lr_f), adam(cfg.lr_g)
    n_tr, n_te = len(x_tr), len(x_te)
    n_batches = max(1, int(np.ceil(n_tr / cfg.minibatch)))
    te_size = max(1, int(np.ceil(n_te / n_batches)))
    trace = []
    for t in range(cfg.rounds):
        for _ in range(cfg.epochs_g):
            te_order = rng.permutation(n_te)
            for b, idx in enumerate(minibatches(n_tr, cfg.minibatch, rng)):
                jdx = te_order[(b * te_size) % n_te :][:te_size]
                losses = loss_eval(loss, f(x_tr[idx]) if loss.kind == "softmax_ce" else outputs(f, x_tr[idx]), y[idx])
                _, grads = g_objective_grad(g, x_tr[idx], losses, x_te[jdx], cfg.m)
                g.apply(opt_g, grads, frozen_layers=frozen)
        for _ in range(cfg.epochs_f):
            for idx in minibatches(n_tr, cfg.minibatch, rng):
                w = batch_weights(outputs(g, x_tr[idx]))
                out, cache = forward(f, x_tr[idx])
                _, d = loss_grad(loss, out, y[idx])
                f.apply(opt_f, backward(f, cache, d * w.reshape(-1, *([1] * (d.ndim - 1)))))
        pred_tr = f(x_tr) if loss.kind == "softmax_ce" else outputs(f, x_tr)
        l_all = loss_eval(loss, pred_tr, y)
        g_tr, g_te = clamp_weights(g, x_tr), clamp_weights(g, x_te)
        first, second = jub_terms(g_tr, l_all, g_te, cfg.m)
        row = {"round": t, "jub": float(first + second), "train_weighted_risk": float(np.mean(g_tr * l_all))}
        if test_y is not None:
            name, value = _metric(f, x_te, test_y, loss)
            row[name] = value
        trace.append(row)
    return JointModel(f, g, trace)


def erm_gradient(train: Dataset, f: Mlp, loss: Loss, epochs: int, minibatch: int, lr: float, rng) -> Mlp:
    """Uniformly weighted mini-batch training of ``f`` in place (baseline)."""
    x, y = np.asarray(train.x, dtype=float), train.y
    opt = adam(lr)
    for _ in range(epochs):
        for idx in minibatches(len(x), minibatch, rng):
            out, cache = forward(f, x[idx])
            _, d = loss_grad(loss, out, y[idx])
            f.apply(opt, backward(f, cache, d / len(idx)))
    return f
