"""Direct density-ratio estimation.

``kmm_weights`` returns model-free weights on the training points. The
least-squares fitters return a :class:`RatioModel` ``g(x) = beta' psi(x)``
that can be evaluated anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import GaussianBasis, _as_2d, design_matrix, kernel_matrix
from .numerics import QpProblem, box_qp_solve, spd_solve

# LSIF only imposes beta >= 0; the QP solver wants a finite box
LSIF_UPPER = 1e12


@dataclass(frozen=True)
class RatioModel:
    basis: GaussianBasis
    beta: np.ndarray
    eta: float = 0.0

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).ravel()
        if beta.size != self.basis.size:
            raise ValueError(f"{beta.size} coefficients for {self.basis.size} basis functions")
        object.__setattr__(self, "beta", beta)

    def __call__(self, x):
        return evaluate_ratio(self, x)


@dataclass(frozen=True)
class KmmConfig:
    B: float = 1000.0
    eps: float | None = None
    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.B > 0:
            raise ValueError("B must be positive")
        if self.eps is not None and self.eps < 0:
            raise ValueError("eps must be non-negative")

    def slack(self, n_tr: int) -> float:
        if self.eps is None:
            return (np.sqrt(n_tr) - 1.0) / np.sqrt(n_tr)
        return self.eps


def kmm_qp(K, kappa, B: float, eps: float, tol: float = 1e-8, max_iter: int = 10_000):
    """Solve ``min 0.5 w'Kw - kappa'w`` s.t. ``0 <= w <= B``, ``|mean(w) - 1| <= eps``.

    The search starts from uniform weights, the no-shift solution.
    """
    n = len(kappa)
    problem = QpProblem(K, kappa, lower=0.0, upper=B, sum_target=float(n), sum_slack=n * eps)
    return box_qp_solve(problem, tol=tol, max_iter=max_iter, x0=np.ones(n))


def kmm_weights(train_x, test_x, cfg: KmmConfig, **solver) -> np.ndarray:
    """Kernel mean matching weights for the training points."""
    train_x, test_x = _as_2d(train_x), _as_2d(test_x)
    n_tr, n_te = train_x.shape[0], test_x.shape[0]
    K = kernel_matrix(cfg.bandwidth, train_x, train_x)
    kappa = (n_tr / n_te) * kernel_matrix(cfg.bandwidth, train_x, test_x).sum(axis=1)
    return kmm_qp(K, kappa, cfg.B, cfg.slack(n_tr), **solver)


def lsif_moments(train_x, test_x, basis: GaussianBasis):
    """Empirical ``H`` (train second moment) and ``h`` (test mean) of the basis."""
    psi_tr = design_matrix(basis, train_x)
    psi_te = design_matrix(basis, test_x)
    H = psi_tr.T @ psi_tr / psi_tr.shape[0]
    h = psi_te.mean(axis=0)
    return H, h


def lsif_fit(train_x, test_x, basis: GaussianBasis, lam: float, **solver) -> RatioModel:
    """Constrained LSIF: ``min 0.5 b'Hb - h'b + lam 1'b`` over ``b >= 0``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    H, h = lsif_moments(train_x, test_x, basis)
    problem = QpProblem(H, h - lam, lower=0.0, upper=LSIF_UPPER)
    beta = box_qp_solve(problem, **solver)
    return RatioModel(basis, beta)


def ulsif_solve(H, h, lam: float):
    """Unclamped uLSIF coefficients ``(H + lam I)^{-1} h``."""
    return spd_solve(H + lam * np.eye(H.shape[0]), h)


def ulsif_fit(train_x, test_x, basis: GaussianBasis, lam: float) -> RatioModel:
    return rulsif_fit(train_x, test_x, basis, lam, eta=0.0)


def rulsif_fit(train_x, test_x, basis: GaussianBasis, lam: float, eta: float) -> RatioModel:
    """Relative uLSIF for ``p_te / (eta p_te + (1 - eta) p_tr)``.

    Minimizes ``0.5 b'(eta H_te + (1-eta) H_tr)b - h'b + 0.5 lam b'b`` and
    rounds negative coefficients up to zero. ``eta = 0`` is plain uLSIF.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    psi_tr = design_matrix(basis, train_x)
    psi_te = design_matrix(basis, test_x)
    H = psi_tr.T @ psi_tr / psi_tr.shape[0]
    if eta > 0:
        H = (1.0 - eta) * H + eta * (psi_te.T @ psi_te / psi_te.shape[0])
    h = psi_te.mean(axis=0)
    beta = np.maximum(0.0, ulsif_solve(H, h, lam))
    return RatioModel(basis, beta, eta=eta)


def evaluate_ratio(model: RatioModel, x) -> np.ndarray:
    return np.maximum(0.0, design_matrix(model.basis, x) @ model.beta)


def _fold_ids(n: int, folds: int, rng):
    return rng.permutation(n) % folds


def cv_scores(train_x, test_x, basis: GaussianBasis, grid, folds: int, rng, eta: float = 0.0):
    """Held-out squared-error criterion for every ``lambda`` in ``grid``.

    The score of a fitted ``g`` on held-out data is
    ``0.5 * mean(g^2 over mixture) - mean(g over test)``, where the mixture
    is ``(1 - eta) * train + eta * test``.
    """
    if folds < 2:
        raise ValueError("need at least two folds")
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    psi_tr = design_matrix(basis, train_x)
    psi_te = design_matrix(basis, test_x)
    f_tr = _fold_ids(psi_tr.shape[0], folds, rng)
    f_te = _fold_ids(psi_te.shape[0], folds, rng)
    scores = np.zeros(grid.size)
    for k in range(folds):
        a_tr, a_te = psi_tr[f_tr != k], psi_te[f_te != k]
        b_tr, b_te = psi_tr[f_tr == k], psi_te[f_te == k]
        H = a_tr.T @ a_tr / a_tr.shape[0]
        if eta > 0:
            H = (1.0 - eta) * H + eta * (a_te.T @ a_te / a_te.shape[0])
        h = a_te.mean(axis=0)
        for i, lam in enumerate(grid):
            beta = np.maximum(0.0, ulsif_solve(H, h, lam))
            g_tr, g_te = b_tr @ beta, b_te @ beta
            sq = (1.0 - eta) * np.mean(g_tr**2) + eta * np.mean(g_te**2)
            scores[i] += 0.5 * sq - np.mean(g_te)
    return scores / folds


def select_lambda(train_x, test_x, basis: GaussianBasis, grid, folds: int, rng, eta: float = 0.0) -> float:
    """Cross-validated ``lambda`` for (R)uLSIF; ties go to the first grid entry."""
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    scores = cv_scores(train_x, test_x, basis, grid, folds, rng, eta=eta)
    return float(grid[int(np.argmin(scores))])
