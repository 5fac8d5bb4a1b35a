"""Linear algebra, box-constrained QP and seeded random streams.

Every estimator in the package funnels through three primitives here:
``spd_solve`` for ridge-type normal equations, ``box_qp_solve`` for the
kernel-mean-matching and LSIF programs, and ``seeded_rng`` for
reproducible randomness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import DimensionMismatch, Infeasible, MaxIterExceeded, NotSpd

RandomStream = np.random.Generator

_JITTER_DOUBLINGS = 4


def seeded_rng(seed: int, *path: int) -> RandomStream:
    """Return a Philox (counter-based) generator keyed by ``seed``.

    Extra integers in ``path`` derive an independent child stream, e.g.
    ``seeded_rng(seed, trial, 2)``. Philox output is specified bit-exactly,
    so identical seeds give identical draws on every platform.
    """
    if seed < 0 or any(p < 0 for p in path):
        raise ValueError("seeds must be non-negative")
    entropy = [int(seed), *map(int, path)] if path else int(seed)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def spd_solve(A, b):
    """Solve ``A x = b`` for symmetric positive-definite ``A`` via Cholesky.

    A diagonal jitter of ``1e-10 * trace(A) / n`` is added (and doubled up
    to four times) only if the plain factorization fails.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got shape {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"b has {b.shape[0]} rows, A has {A.shape[0]}")
    n = A.shape[0]
    if n == 0:
        return np.zeros_like(b)

    jitter = 1e-10 * max(np.trace(A), 0.0) / n
    attempts = [0.0] + [jitter * 2**k for k in range(_JITTER_DOUBLINGS + 1)]
    for added in attempts:
        M = A if added == 0.0 else A + added * np.eye(n)
        try:
            factor = linalg.cho_factor(M, lower=True, check_finite=True)
        except linalg.LinAlgError:
            if jitter == 0.0:
                break
            continue
        x = linalg.cho_solve(factor, b)
        # one step of iterative refinement against the un-jittered system
        x = x + linalg.cho_solve(factor, b - A @ x)
        return x
    raise NotSpd(f"matrix of size {n} is not positive definite after jitter")


@dataclass(frozen=True)
class QpProblem:
    """``min 0.5 w'Qw - c'w`` s.t. ``lower <= w <= upper`` and optionally
    ``|sum(w) - sum_target| <= sum_slack``."""

    Q: np.ndarray
    c: np.ndarray
    lower: float = 0.0
    upper: float = np.inf
    sum_target: Optional[float] = None
    sum_slack: float = 0.0

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        c = np.asarray(self.c, dtype=float).ravel()
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] != c.size:
            raise DimensionMismatch(f"Q {Q.shape} incompatible with c ({c.size},)")
        if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-10):
            raise ValueError("Q must be symmetric")
        if self.upper < self.lower:
            raise ValueError("upper bound below lower bound")
        if self.sum_slack < 0:
            raise ValueError("sum_slack must be non-negative")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, w) -> float:
        return float(0.5 * w @ self.Q @ w - self.c @ w)

    def sum_bounds(self):
        if self.sum_target is None:
            return None
        return self.sum_target - self.sum_slack, self.sum_target + self.sum_slack

    def project(self, v):
        """Euclidean projection onto the feasible set (exact, not iterative)."""
        lo, hi = self.lower, self.upper
        bounds = self.sum_bounds()
        w = np.clip(v, lo, hi)
        if bounds is None:
            return w
        s = w.sum()
        if bounds[0] <= s <= bounds[1]:
            return w
        target = bounds[1] if s > bounds[1] else bounds[0]
        return _shift_project(v, lo, hi, target)


def _shift_project(v, lo, hi, target):
    # projection onto box ∩ {sum = target} is clip(v - tau) for a scalar tau;
    # s(tau) is piecewise linear and non-increasing with kinks at v-hi, v-lo
    kinks = np.concatenate([v - hi, v - lo])
    kinks = np.unique(kinks[np.isfinite(kinks)])

    def total(tau):
        return np.clip(v - tau, lo, hi).sum()

    if kinks.size == 0:
        probe = 0.0
    elif total(kinks[0]) < target:
        probe = kinks[0] - 1.0
    elif total(kinks[-1]) > target:
        probe = kinks[-1] + 1.0
    else:
        i, j = 0, kinks.size - 1
        while j - i > 1:
            mid = (i + j) // 2
            if total(kinks[mid]) >= target:
                i = mid
            else:
                j = mid
        probe = 0.5 * (kinks[i] + kinks[j])
    # s is affine in tau on the segment containing probe: solve it exactly
    free = (v - probe > lo) & (v - probe < hi)
    if not free.any():
        return np.clip(v - probe, lo, hi)
    fixed_sum = np.clip(v - probe, lo, hi)[~free].sum()
    tau = (v[free].sum() - (target - fixed_sum)) / free.sum()
    return np.clip(v - tau, lo, hi)


def _check_feasible(p: QpProblem):
    bounds = p.sum_bounds()
    if bounds is None:
        return
    smin, smax = p.n * p.lower, p.n * p.upper
    if smax < bounds[0] - 1e-12 * (1 + abs(bounds[0])) or smin > bounds[1] + 1e-12 * (1 + abs(bounds[1])):
        raise Infeasible(
            f"box sums [{smin}, {smax}] miss the sum band [{bounds[0]}, {bounds[1]}]"
        )


def kkt_residual(p: QpProblem, w) -> float:
    """Projected-gradient fixed-point residual ``||w - P(w - grad)||_inf``."""
    grad = p.Q @ w - p.c
    return float(np.max(np.abs(w - p.project(w - grad)), initial=0.0))


def _polish(p: QpProblem, w):
    """Solve the equality-constrained KKT system on the current active set."""
    at_lo = w <= p.lower
    at_hi = w >= p.upper
    free = ~(at_lo | at_hi)
    bounds = p.sum_bounds()
    sum_active = None
    if bounds is not None:
        s = w.sum()
        scale = 1e-9 * (1.0 + abs(s))
        if abs(s - bounds[1]) <= scale:
            sum_active = bounds[1]
        elif abs(s - bounds[0]) <= scale:
            sum_active = bounds[0]
    x = w.copy()
    if not free.any():
        return x
    F = np.flatnonzero(free)
    fixed = ~free
    rhs = p.c[F] - p.Q[np.ix_(F, np.flatnonzero(fixed))] @ w[fixed]
    QFF = p.Q[np.ix_(F, F)]
    if sum_active is None:
        M, r = QFF, rhs
    else:
        k = F.size
        M = np.zeros((k + 1, k + 1))
        M[:k, :k] = QFF
        M[:k, k] = 1.0
        M[k, :k] = 1.0
        r = np.append(rhs, sum_active - w[fixed].sum())
    sol = np.linalg.lstsq(M, r, rcond=None)[0]
    x[F] = sol[: F.size]
    return x


def box_qp_solve(p: QpProblem, tol: float = 1e-8, max_iter: int = 10_000, x0=None):
    """Minimize ``0.5 w'Qw - c'w`` over box (and optional sum band) constraints.

    Accelerated projected gradient (FISTA with adaptive restart) on the
    exact projection onto box ∩ slab; every few iterations the current
    active set is polished with an equality-constrained Newton solve,
    which makes small instances terminate at the exact optimum.

    Returns the iterate once ``kkt_residual <= tol``. Raises
    ``MaxIterExceeded`` (carrying ``best``) otherwise.
    """
    _check_feasible(p)
    n = p.n
    if n == 0:
        return np.zeros(0)
    x = p.project(np.zeros(n) if x0 is None else np.asarray(x0, dtype=float))
    L = float(np.max(np.linalg.eigvalsh(p.Q), initial=0.0))
    step = 1.0 / L if L > 0 else 1.0

    best, best_res = x, kkt_residual(p, x)
    if best_res <= tol:
        return x
    y, t = x.copy(), 1.0
    f_x = p.objective(x)
    for it in range(1, max_iter + 1):
        x_new = p.project(y - step * (p.Q @ y - p.c))
        f_new = p.objective(x_new)
        if f_new > f_x:
            # function-value restart
            y, t = x.copy(), 1.0
            x_new = p.project(x - step * (p.Q @ x - p.c))
            f_new = p.objective(x_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t, f_x = x_new, t_new, f_new

        if it % 10 == 0:
            cand = p.project(_polish(p, x))
            if p.objective(cand) <= f_x + 1e-14 * (1.0 + abs(f_x)):
                cres = kkt_residual(p, cand)
                if cres <= tol:
                    return cand
                if cres < kkt_residual(p, x):
                    x, f_x = cand, p.objective(cand)
                    y, t = x.copy(), 1.0
        res = kkt_residual(p, x)
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol:
            return x
    raise MaxIterExceeded(
        f"box_qp_solve: residual {best_res:.3e} > tol {tol:.1e} after {max_iter} iterations",
        best=best,
        residual=best_res,
    )
