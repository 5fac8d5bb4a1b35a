"""Data augmentation by transferring an invertible mixing mechanism.

Each sample is treated as a joint vector ``z = (x, y)`` generated as
``z = F(s)`` from independent components ``s``. Once ``F`` is known or
estimated from several source domains, the target sample's components are
recombined coordinate by coordinate and mapped back through ``F``, which
multiplies the effective size of a small target sample.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.special import expit

from .data import Dataset
from .erm import LinearPredictor, Loss, loo_residuals, loss_eval, weighted_krr_fit
from .errors import DimensionMismatch, NeedTwoDomains, ParseError, SingularMechanism, TooFewPoints
from .kernels import GaussianBasis, kernel_matrix, median_heuristic
from .nnet import Mlp, adam, backward, forward, minibatches, step

MAGIC = b"CMT1"
LAMBDA_GRID = tuple(2.0**p for p in range(-10, 11))


# --------------------------------------------------------------------------
# mechanisms


class Mechanism:
    """An invertible map ``F`` between components ``s`` and observations ``z``."""

    dim: int

    def forward(self, s):
        raise NotImplementedError

    def inverse(self, z):
        raise NotImplementedError


class AffineMechanism(Mechanism):
    """``F^{-1}(z) = W z + b`` and ``F(s) = W^{-1}(s - b)``."""

    def __init__(self, W, b=None):
        W = np.array(W, dtype=float, ndmin=2)
        if W.shape[0] != W.shape[1]:
            raise DimensionMismatch(f"W must be square, got {W.shape}")
        b = np.zeros(W.shape[0]) if b is None else np.array(b, dtype=float).ravel()
        if b.size != W.shape[0]:
            raise DimensionMismatch(f"b has {b.size} entries for dimension {W.shape[0]}")
        try:
            sign, logdet = np.linalg.slogdet(W)
        except np.linalg.LinAlgError as exc:
            raise SingularMechanism("W is not invertible") from exc
        if sign == 0 or logdet < math.log(1e-12):
            raise SingularMechanism(f"|det W| = {math.exp(logdet) if sign else 0.0:.3e} is too small")
        self.W, self.b = W, b
        self.dim = W.shape[0]
        self._W_inv = np.linalg.inv(W)

    def _check(self, a):
        a = np.asarray(a, dtype=float)
        if a.ndim == 1:
            a = a[None, :]
        if a.shape[1] != self.dim:
            raise DimensionMismatch(f"expected {self.dim} columns, got {a.shape[1]}")
        return a

    def inverse(self, z):
        return self._check(z) @ self.W.T + self.b

    def forward(self, s):
        return (self._check(s) - self.b) @ self._W_inv.T

    @classmethod
    def from_mixing(cls, A, c=None) -> "AffineMechanism":
        """Mechanism of the generative map ``z = A s + c``."""
        A = np.array(A, dtype=float, ndmin=2)
        W = np.linalg.inv(A)
        c = np.zeros(A.shape[0]) if c is None else np.asarray(c, dtype=float)
        return cls(W, -W @ c)


@dataclass
class OracleMechanism(Mechanism):
    """A known mechanism given as a pair of callables on ``n x D`` arrays."""

    dim: int
    fwd: Callable
    inv: Callable

    def forward(self, s):
        return np.asarray(self.fwd(np.atleast_2d(s)), dtype=float)

    def inverse(self, z):
        return np.asarray(self.inv(np.atleast_2d(z)), dtype=float)


def identity_mechanism(dim: int) -> OracleMechanism:
    return OracleMechanism(dim, lambda s: np.array(s, dtype=float), lambda z: np.array(z, dtype=float))


def save_mechanism(mech: AffineMechanism, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", mech.dim))
        fh.write(np.ascontiguousarray(mech.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(mech.b, dtype="<f8").tobytes())


def load_mechanism(path) -> AffineMechanism:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC or len(blob) < 8:
        raise ParseError("not a CMT1 checkpoint", 0)
    (d,) = struct.unpack_from("<I", blob, 4)
    if len(blob) != 8 + 8 * (d * d + d):
        raise ParseError(f"checkpoint holds {len(blob) - 8} payload bytes, dimension {d} needs {8 * (d * d + d)}", 0)
    values = np.frombuffer(blob, dtype="<f8", offset=8)
    return AffineMechanism(values[: d * d].reshape(d, d).copy(), values[d * d :].copy())


def joint(d: Dataset) -> np.ndarray:
    """``z = (x, y)`` with the label as the last column."""
    if d.y is None:
        raise ValueError("mechanism transfer needs labelled data")
    return np.column_stack([d.x, np.asarray(d.y, dtype=float)])


def split_joint(z, task: str = "regression") -> Dataset:
    z = np.asarray(z, dtype=float)
    return Dataset(z[:, :-1], z[:, -1], task=task)


# --------------------------------------------------------------------------
# generalized contrastive learning


@dataclass
class GclModel:
    mech: AffineMechanism
    phis: list
    history: list  # mean objective per epoch, entry 0 at initialization


def gcl_scores(W, b, phis, z):
    """``r(z, k) = sum_j phi_j(s_j)[k]`` for all domains ``k`` (``n x K``)."""
    s = z @ W.T + b
    return sum(phi(s[:, j : j + 1]) for j, phi in enumerate(phis))


def _contrast_pairs(labels, n_domains, rng):
    """One uniformly drawn wrong domain per sample."""
    shift = rng.integers(1, n_domains, size=labels.size)
    return (labels + shift) % n_domains


def gcl_objective(W, b, phis, z, labels, other):
    r = gcl_scores(W, b, phis, z)
    rows = np.arange(z.shape[0])
    return float(np.mean(np.logaddexp(0.0, -r[rows, labels]) + np.logaddexp(0.0, r[rows, other])))


def gcl_grad(W, b, phis, z, labels, other):
    """Objective and gradients ``(dW, db, [phi grads])`` on one batch."""
    n = z.shape[0]
    rows = np.arange(n)
    s = z @ W.T + b
    outs, caches = [], []
    for j, phi in enumerate(phis):
        o, c = forward(phi, s[:, j : j + 1])
        outs.append(o)
        caches.append(c)
    r = sum(outs)
    value = float(np.mean(np.logaddexp(0.0, -r[rows, labels]) + np.logaddexp(0.0, r[rows, other])))
    d_r = np.zeros_like(r)
    d_r[rows, labels] -= expit(-r[rows, labels]) / n
    d_r[rows, other] += expit(r[rows, other]) / n
    d_s = np.zeros_like(s)
    phi_grads = []
    for j, phi in enumerate(phis):
        grads, dx = backward(phi, caches[j], d_r, input_grad=True)
        phi_grads.append(grads)
        d_s[:, j] = dx[:, 0]
    return value, d_s.T @ z, d_s.sum(axis=0), phi_grads


def _gcl_run(zn, labels, n_domains, hidden_units, lr, epochs, rng, minibatch, weight_decay, init, eval_other=None):
    dim = zn.shape[1]
    if init == "identity":
        W = np.eye(dim) + 0.1 * rng.standard_normal((dim, dim))
    elif init == "orthogonal":
        W = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    else:
        raise ValueError(f"unknown init {init!r}")
    b = np.zeros(dim)
    phis = [Mlp.init([1, hidden_units, n_domains], rng) for _ in range(dim)]
    opt_wb = adam(lr)
    opts = [adam(lr) for _ in phis]

    if eval_other is None:
        eval_other = _contrast_pairs(labels, n_domains, rng)
    history = [gcl_objective(W, b, phis, zn, labels, eval_other)]
    for _ in range(epochs):
        for idx in minibatches(len(zn), minibatch, rng):
            other = _contrast_pairs(labels[idx], n_domains, rng)
            _, dW, db, phi_grads = gcl_grad(W, b, phis, zn[idx], labels[idx], other)
            step(opt_wb, [W, b], [dW, db])
            for phi, opt, grads in zip(phis, opts, phi_grads):
                if weight_decay > 0:
                    grads = [g + 2.0 * weight_decay * p for g, p in zip(grads, phi.params())]
                phi.apply(opt, grads)
        history.append(gcl_objective(W, b, phis, zn, labels, eval_other))
    return W, b, phis, history, eval_other


def gcl_fit(
    domains,
    hidden_units: int = 10,
    lr: float = 1e-3,
    epochs: int = 100,
    rng=None,
    minibatch: int = 256,
    weight_decay: float = 0.0,
    standardize: bool = True,
    restarts: int = 1,
) -> GclModel:
    """Estimate an affine unmixing by classifying which domain a sample came from.

    Every ``phi_j`` maps component ``j`` to one score per domain. The
    negative domain of each sample is redrawn for every mini-batch.
    ``weight_decay`` is an L2 penalty on the ``phi`` parameters. With
    ``standardize`` the pooled data are z-scored first and the returned
    mechanism is expressed in the original coordinates.

    The first run starts near the identity; each of the ``restarts - 1``
    further runs starts from a random rotation. The run with the lowest
    final objective (on one shared set of contrast pairs) is returned.
    """
    if len(domains) < 2:
        raise NeedTwoDomains(f"contrastive learning needs at least two domains, got {len(domains)}")
    if rng is None:
        raise ValueError("gcl_fit needs a random stream")
    if restarts < 1:
        raise ValueError("restarts must be at least one")
    zs = [joint(d) if isinstance(d, Dataset) else np.asarray(d, dtype=float) for d in domains]
    dim = zs[0].shape[1]
    if any(z.shape[1] != dim for z in zs):
        raise DimensionMismatch("all domains must share one dimension")
    z = np.vstack(zs)
    labels = np.concatenate([np.full(len(zi), k) for k, zi in enumerate(zs)])
    n_domains = len(zs)
    if standardize:
        mean, scale = z.mean(axis=0), z.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        mean, scale = np.zeros(dim), np.ones(dim)
    zn = (z - mean) / scale

    args = (zn, labels, n_domains, hidden_units, lr, epochs, rng, minibatch, weight_decay)
    best = _gcl_run(*args, "identity")
    for _ in range(restarts - 1):
        run = _gcl_run(*args, "orthogonal", best[4])
        if run[3][-1] < best[3][-1]:
            best = run
    W, b, phis, history, _ = best
    W_raw = W / scale[None, :]
    b_raw = b - W_raw @ mean
    return GclModel(AffineMechanism(W_raw, b_raw), phis, history)


def amari_distance(P) -> float:
    """Normalized Amari index of ``P``: zero iff ``P`` is a scaled permutation, at most one."""
    P = np.abs(np.asarray(P, dtype=float))
    d = P.shape[0]
    if P.shape != (d, d):
        raise DimensionMismatch("Amari index needs a square matrix")
    if d == 1:
        return 0.0
    rows = (P.sum(axis=1) / P.max(axis=1) - 1.0).sum()
    cols = (P.sum(axis=0) / P.max(axis=0) - 1.0).sum()
    return float((rows + cols) / (2.0 * d * (d - 1)))


# --------------------------------------------------------------------------
# inflation and synthesis


class InflationSet(NamedTuple):
    ics: np.ndarray
    combos: np.ndarray  # (m, D) 0-based row indices, one column per component
    diagonal: np.ndarray  # boolean, True for tuples (j, ..., j)


def extract_ics(mech: Mechanism, target: Dataset) -> np.ndarray:
    z = joint(target)
    if z.shape[1] != mech.dim:
        raise DimensionMismatch(f"target has {z.shape[1]} joint columns, mechanism has {mech.dim}")
    return mech.inverse(z)


def _decode(flat, n, dim):
    """Mixed-radix digits of ``flat`` (most significant first)."""
    out = np.empty((flat.size, dim), dtype=np.int64)
    rest = flat.copy()
    for j in range(dim - 1, -1, -1):
        out[:, j] = rest % n
        rest //= n
    return out


def inflate(ics, cap: int = 100_000, rng=None) -> InflationSet:
    """All ``n^D`` component-wise recombinations, or ``cap`` of them.

    A subsample always contains the ``n`` diagonal tuples and is otherwise
    drawn uniformly without replacement.
    """
    ics = np.asarray(ics, dtype=float)
    n, dim = ics.shape
    if n < 1:
        raise TooFewPoints("need at least one target sample")
    if cap < n:
        raise ValueError(f"cap {cap} cannot hold the {n} diagonal tuples")
    total = n**dim
    if total <= cap:
        combos = np.array(list(itertools.product(range(n), repeat=dim)), dtype=np.int64).reshape(-1, dim)
    else:
        if rng is None:
            raise ValueError("subsampling combinations needs a random stream")
        step_diag = sum(n**j for j in range(dim))
        diag = np.arange(n, dtype=np.int64) * step_diag
        need = cap - n
        chosen = set()
        while len(chosen) < need:
            draw = rng.integers(0, total, size=2 * (need - len(chosen)), dtype=np.int64)
            for v in draw:
                if v % step_diag == 0 and v // step_diag < n:
                    continue
                chosen.add(int(v))
                if len(chosen) == need:
                    break
        flat = np.sort(np.concatenate([diag, np.fromiter(chosen, dtype=np.int64, count=need)]))
        combos = _decode(flat, n, dim)
    diagonal = np.all(combos == combos[:, :1], axis=1)
    return InflationSet(ics, combos, diagonal)


def synthesize(mech: Mechanism, infl: InflationSet, target: Optional[Dataset] = None) -> Dataset:
    """Map every recombined component tuple back through ``F``.

    If ``target`` is given, diagonal tuples return the original rows
    verbatim, so no round-off is introduced for observed samples.
    """
    cols = np.arange(infl.ics.shape[1])
    s_bar = infl.ics[infl.combos, cols]
    z_bar = mech.forward(s_bar)
    if target is not None:
        z_bar[infl.diagonal] = joint(target)[infl.combos[infl.diagonal, 0]]
    return split_joint(z_bar)


def support_filter(synth: Dataset, source_pool: Dataset, quantile: float = 0.1, bandwidth=None, keep=None):
    """Drop the synthesized points least similar to the source pool.

    The score of a point is its mean Gaussian-kernel similarity (on the
    joint vector) to the pool; the lowest ``quantile`` fraction is removed,
    except rows flagged in ``keep``. ``bandwidth`` defaults to ``sqrt(D/2)``.
    Returns the filtered dataset and the boolean mask of kept rows.
    """
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    z, pool = joint(synth), joint(source_pool)
    sigma = math.sqrt(z.shape[1] / 2.0) if bandwidth is None else float(bandwidth)
    score = kernel_matrix(sigma, z, pool).mean(axis=1)
    n_drop = int(math.floor(quantile * z.shape[0]))
    kept = np.ones(z.shape[0], dtype=bool)
    protected = np.zeros(z.shape[0], dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    candidates = np.flatnonzero(~protected)
    order = candidates[np.argsort(score[candidates], kind="stable")]
    kept[order[:n_drop]] = False
    return synth.subset(np.flatnonzero(kept)), kept


def cmt_risk(f, infl_data: Dataset, loss: Loss) -> float:
    """Mean loss over the synthesized sample."""
    pred = np.asarray(f(infl_data.x), dtype=float).ravel()
    return float(np.mean(loss_eval(loss, pred, infl_data.y)))


# --------------------------------------------------------------------------
# full pipeline


@dataclass(frozen=True)
class CmtConfig:
    cap: int = 100_000
    filter_quantile: Optional[float] = 0.1  # None disables the support filter
    lambda_grid: tuple = LAMBDA_GRID
    bandwidth: Optional[float] = None  # KRR kernel; None uses the median heuristic on target x
    gcl_hidden: int = 10
    gcl_epochs: int = 100
    gcl_lr: float = 1e-3
    gcl_weight_decay: float = 0.0
    gcl_restarts: int = 1


def _krr_bandwidth(cfg: CmtConfig, x) -> float:
    if cfg.bandwidth is not None:
        return cfg.bandwidth
    return median_heuristic(x)


def _loo_select(x, y, basis, grid, w=None, held=None):
    best_lam, best_err = None, np.inf
    for lam in grid:
        e = loo_residuals(x, y, basis, lam, w)
        err = float(np.mean(e[held] ** 2)) if held is not None else float(np.mean(e**2))
        if err < best_err:
            best_lam, best_err = lam, err
    return best_lam


def taronly_fit(target: Dataset, cfg: CmtConfig = CmtConfig()) -> LinearPredictor:
    """Kernel ridge regression on the target sample alone, leave-one-out ``lambda``."""
    basis = GaussianBasis(target.x, _krr_bandwidth(cfg, target.x))
    lam = _loo_select(target.x, target.y, basis, cfg.lambda_grid)
    return weighted_krr_fit(target.x, target.y, np.ones(target.n), basis, lam)


def cmt_fit(domains, target: Dataset, mech_source="gcl", cfg: CmtConfig = CmtConfig(), rng=None) -> LinearPredictor:
    """Augment ``target`` through a transferred mechanism and fit kernel ridge regression.

    ``mech_source`` is ``"gcl"`` (estimate from ``domains``) or a ready
    :class:`Mechanism`. The augmented set is the original target sample
    plus the filtered off-diagonal recombinations. ``lambda`` is chosen by
    leave-one-out error on the original target points only. The kernel
    centers are the target inputs, so ``D = 1`` reproduces
    :func:`taronly_fit` exactly.
    """
    dim = target.dim + 1
    if target.n < dim:
        raise TooFewPoints(f"need at least {dim} target samples, got {target.n}")
    if isinstance(mech_source, Mechanism):
        mech = mech_source
    elif mech_source == "gcl":
        mech = gcl_fit(
            domains,
            hidden_units=cfg.gcl_hidden,
            lr=cfg.gcl_lr,
            epochs=cfg.gcl_epochs,
            rng=rng,
            weight_decay=cfg.gcl_weight_decay,
            restarts=cfg.gcl_restarts,
        ).mech
    else:
        raise ValueError(f"unknown mechanism source {mech_source!r}")
    infl = inflate(extract_ics(mech, target), cfg.cap, rng)
    off = ~infl.diagonal
    synth = synthesize(mech, InflationSet(infl.ics, infl.combos[off], infl.diagonal[off]))
    if cfg.filter_quantile is not None and synth.n > 0 and domains:
        pool = Dataset(np.vstack([d.x for d in domains]), np.concatenate([d.y for d in domains]))
        synth, _ = support_filter(synth, pool, cfg.filter_quantile)
    x = np.vstack([target.x, synth.x])
    y = np.concatenate([np.asarray(target.y, dtype=float), np.asarray(synth.y, dtype=float)])
    basis = GaussianBasis(target.x, _krr_bandwidth(cfg, target.x))
    held = np.arange(target.n)
    lam = _loo_select(x, y, basis, cfg.lambda_grid, held=held)
    return weighted_krr_fit(x, y, np.ones(len(y)), basis, lam)


# --------------------------------------------------------------------------
# synthetic multi-domain data with a shared linear mixing


def random_scales(shape, rng, low: float = 0.25, high: float = 4.0) -> np.ndarray:
    """Laplace component scales, log-uniform on ``[low, high]``."""
    if not 0 < low <= high:
        raise ValueError("need 0 < low <= high")
    return np.exp(rng.uniform(np.log(low), np.log(high), size=shape))


@dataclass(frozen=True)
class MixingFamily:
    """Domains sharing ``z = A s`` and differing in Laplace component scales.

    Inputs have ``dim - 1`` columns; the last joint coordinate is the label.
    """

    A: np.ndarray
    source_scales: np.ndarray  # (n_domains, dim)
    target_scales: np.ndarray  # (dim,)

    @classmethod
    def random(cls, dim: int, n_domains: int, rng, low: float = 0.25, high: float = 4.0) -> "MixingFamily":
        """Standard normal mixing; scales log-uniform on ``[low, high]``."""
        if dim < 2:
            raise ValueError("joint dimension must be at least two")
        A = rng.standard_normal((dim, dim))
        return cls(A, random_scales((n_domains, dim), rng, low, high), random_scales(dim, rng, low, high))

    @property
    def mechanism(self) -> AffineMechanism:
        return AffineMechanism.from_mixing(self.A)

    def _draw(self, n, scales, rng) -> Dataset:
        return split_joint(rng.laplace(0.0, scales, size=(n, self.A.shape[0])) @ self.A.T)

    def sample_sources(self, n: int, rng) -> list:
        return [self._draw(n, sc, rng) for sc in self.source_scales]

    def sample_target(self, n: int, rng) -> Dataset:
        return self._draw(n, self.target_scales, rng)
