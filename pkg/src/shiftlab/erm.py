"""Losses and (importance-)weighted empirical risk minimizers.

The fitters work with linear-in-parameter models ``f(x) = alpha' phi(x)``
on a Gaussian basis. EIWERM and RIWERM are not separate fitters: flatten
the weights with :func:`flatten_weights`, or pass relative-ratio weights,
and call :func:`iwerm_fit`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import TaskMismatch, UnsupportedLoss
from .kernels import GaussianBasis, design_matrix
from .numerics import spd_solve

TUKEY_RHO = 4.685
MAD_TO_SIGMA = 1.4826

LOSS_KINDS = ("squared", "tukey", "hinge", "softmax_ce", "zero_one", "logistic")


@dataclass(frozen=True)
class Loss:
    kind: str
    rho: float = TUKEY_RHO
    bound: Optional[float] = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.kind == "tukey" and not self.rho > 0:
            raise ValueError("Tukey rho must be positive")
        if self.bound is None and self.kind in ("tukey", "zero_one"):
            # the rescaled Tukey loss and the 0-1 loss never exceed one
            object.__setattr__(self, "bound", 1.0)


def tukey_weight(r, rho: float):
    """IRLS factor ``[1 - r^2/rho^2]_+^2`` of the Tukey bisquare loss."""
    u = 1.0 - (np.asarray(r, dtype=float) / rho) ** 2
    return np.where(u > 0, u * u, 0.0)


def tukey_loss(r, rho: float):
    u = 1.0 - (np.asarray(r, dtype=float) / rho) ** 2
    return np.minimum(1.0 - u**3, 1.0)


def _labels(y):
    return np.asarray(y).astype(int)


def loss_eval(loss: Loss, pred, y):
    """Per-sample loss values.

    ``pred`` is a vector of scores, or an ``n x k`` logit matrix for
    ``softmax_ce`` (and multiclass ``zero_one``). Binary labels are +-1,
    multiclass labels are 0-based. Scalars in, scalar out.
    """
    scalar = np.ndim(pred) == 0 or (loss.kind == "softmax_ce" and np.ndim(pred) == 1)
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    kind = loss.kind
    if kind == "softmax_ce":
        logits = np.atleast_2d(pred)
        if logits.shape[1] < 2:
            raise TaskMismatch("softmax_ce needs at least two logits per sample")
        yi = np.atleast_1d(_labels(y))
        out = logsumexp(logits, axis=1) - logits[np.arange(logits.shape[0]), yi]
    elif kind == "zero_one" and pred.ndim == 2:
        out = (np.argmax(pred, axis=1) != _labels(y)).astype(float)
    else:
        if pred.ndim > 1:
            raise TaskMismatch(f"{kind} expects one score per sample")
        if kind == "squared":
            out = (pred - y) ** 2
        elif kind == "tukey":
            out = tukey_loss(pred - y, loss.rho)
        elif kind == "hinge":
            out = np.maximum(0.0, 1.0 - y * pred)
        elif kind == "zero_one":
            out = (decide(pred) != y).astype(float)
        else:  # logistic on the margin y * f
            out = np.logaddexp(0.0, -y * pred)
    if scalar:
        return float(np.ravel(out)[0])
    return out


def decide(scores):
    """Binary decisions ``sign(f)`` with ties at zero mapped to +1."""
    return np.where(np.asarray(scores) >= 0, 1.0, -1.0)


@dataclass(frozen=True)
class LinearPredictor:
    basis: GaussianBasis
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        if alpha.size != self.basis.size:
            raise ValueError(f"{alpha.size} coefficients for {self.basis.size} basis functions")
        object.__setattr__(self, "alpha", alpha)

    def __call__(self, x):
        return predict(self, x)


def predict(p: LinearPredictor, x):
    return design_matrix(p.basis, x) @ p.alpha


def _weighted_system(phi, y, w, mu):
    n = phi.shape[0]
    pw = phi * w[:, None]
    A = phi.T @ pw + mu * n * np.eye(phi.shape[1])
    return A, pw.T @ y


def weighted_krr_fit(x, y, w, basis: GaussianBasis, mu: float) -> LinearPredictor:
    """``alpha = (Phi' W Phi + mu n I)^{-1} Phi' W y``.

    This minimizes ``(1/n) sum_i w_i (f(x_i) - y_i)^2 + mu alpha'alpha``.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    w = np.asarray(w, dtype=float).ravel()
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    phi = design_matrix(basis, x)
    A, rhs = _weighted_system(phi, np.asarray(y, dtype=float).ravel(), w, mu)
    return LinearPredictor(basis, spd_solve(A, rhs))


def tukey_objective(alpha, phi, y, w, mu, rho) -> float:
    r = phi @ alpha - y
    return float(np.mean(w * tukey_loss(r, rho)) + mu * alpha @ alpha)


def residual_scale(r) -> float:
    """Robust residual scale ``1.4826 * MAD``."""
    r = np.asarray(r, dtype=float)
    mad = np.median(np.abs(r - np.median(r)))
    return float(MAD_TO_SIGMA * mad) if mad > 0 else 1.0


class IrlsResult(NamedTuple):
    predictor: LinearPredictor
    converged: bool
    iterations: int
    objectives: list
    rho: float


def irls_tukey_fit(
    x,
    y,
    w,
    basis: GaussianBasis,
    mu: float,
    rho: float = TUKEY_RHO,
    scale="none",
    max_iter: int = 100,
    tol: float = 1e-8,
    init: Optional[np.ndarray] = None,
) -> IrlsResult:
    """Weighted ridge regression under the rescaled Tukey bisquare loss.

    Each step solves a weighted ridge problem with effective weights
    ``w_i * 3 omega(r_i) / rho^2``; ``omega`` is :func:`tukey_weight` and the
    ``3 / rho^2`` factor is the slope of the loss in ``r^2``, which makes
    the step a majorize-minimize update (objective never increases).

    ``scale="mad"`` multiplies ``rho`` by the robust scale of the
    squared-loss residuals; ``"none"`` uses ``rho`` as given.
    """
    y = np.asarray(y, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    phi = design_matrix(basis, x)
    if init is None:
        A, rhs = _weighted_system(phi, y, w, mu)
        alpha = spd_solve(A, rhs)
    else:
        alpha = np.asarray(init, dtype=float).copy()
    if scale == "mad":
        rho = rho * residual_scale(phi @ alpha - y)
    elif scale != "none":
        rho = rho * float(scale)

    objectives = [tukey_objective(alpha, phi, y, w, mu, rho)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = phi @ alpha - y
        eff = w * 3.0 * tukey_weight(r, rho) / rho**2
        A, rhs = _weighted_system(phi, y, eff, mu)
        new = spd_solve(A, rhs)
        step = float(np.max(np.abs(new - alpha)))
        alpha = new
        objectives.append(tukey_objective(alpha, phi, y, w, mu, rho))
        if step <= tol:
            converged = True
            break
    return IrlsResult(LinearPredictor(basis, alpha), converged, it, objectives, rho)


def iwerm_fit(pair, weights, loss: Loss, basis: GaussianBasis, mu: float, **tukey) -> LinearPredictor:
    """Importance-weighted ERM on the training half of ``pair``."""
    weights = np.asarray(weights, dtype=float).ravel()
    if weights.size != pair.train.n:
        raise ValueError(f"{weights.size} weights for {pair.train.n} training samples")
    x, y = pair.train.x, pair.train.y
    if loss.kind == "squared":
        return weighted_krr_fit(x, y, weights, basis, mu)
    if loss.kind == "tukey":
        tukey.setdefault("rho", loss.rho)
        return irls_tukey_fit(x, y, weights, basis, mu, **tukey).predictor
    raise UnsupportedLoss(f"iwerm_fit handles squared and tukey losses, not {loss.kind}")


def flatten_weights(w, gamma: float):
    """Exponentially flattened weights ``w**gamma`` (``0**0 == 1``)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    return np.power(w, gamma)


def loo_residuals(x, y, basis: GaussianBasis, mu: float, w=None):
    """Closed-form leave-one-out residuals of weighted ridge regression.

    Uses ``e_i = r_i / (1 - H_ii)`` with the hat matrix
    ``H = Phi A^{-1} Phi' W``; the penalty ``mu n I`` is held fixed.
    """
    y = np.asarray(y, dtype=float).ravel()
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float).ravel()
    phi = design_matrix(basis, x)
    A, rhs = _weighted_system(phi, y, w, mu)
    alpha = spd_solve(A, rhs)
    Ainv_phiT = spd_solve(A, phi.T)
    h = np.einsum("ij,ji->i", phi, Ainv_phiT) * w
    return (phi @ alpha - y) / (1.0 - h)
