"""Sample containers, file ingestion and distribution-shift generators.

Class labels of multiclass datasets are 0-based integers ``0..k-1``;
binary labels are ``{-1, +1}``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import (
    EmptySplit,
    InsufficientSamples,
    InvalidK,
    InvalidProjection,
    NonAscendingIndex,
    NonNumericCell,
    ParseError,
    RaggedRows,
)
from .numerics import spd_solve

TASKS = ("regression", "binary", "multiclass")

TOY_TRAIN_MEAN, TOY_TRAIN_STD = 1.0, 0.5
TOY_TEST_MEAN, TOY_TEST_STD = 2.0, 0.25
TOY_NOISE_STD = 0.1


def _readonly(a):
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: Optional[np.ndarray] = None
    domain_id: int = 0
    task: str = "regression"
    n_classes: Optional[int] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ValueError(f"x must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        object.__setattr__(self, "x", _readonly(x))
        if self.y is None:
            return
        y = np.asarray(self.y, dtype=float).ravel()
        if y.size != x.shape[0]:
            raise ValueError(f"{y.size} labels for {x.shape[0]} samples")
        if self.task == "binary" and not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("binary labels must be -1 or +1")
        if self.task == "multiclass":
            if not np.all(y == np.round(y)) or y.min(initial=0) < 0:
                raise ValueError("multiclass labels must be non-negative integers")
            k = self.n_classes if self.n_classes is not None else int(y.max(initial=-1)) + 1
            if y.size and y.max() >= k:
                raise ValueError(f"label {int(y.max())} out of range for k={k}")
            object.__setattr__(self, "n_classes", k)
        object.__setattr__(self, "y", _readonly(y))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def labels(self) -> np.ndarray:
        """Integer class labels (multiclass only)."""
        return self.y.astype(int)

    def subset(self, idx) -> "Dataset":
        return replace(self, x=self.x[idx], y=None if self.y is None else self.y[idx])

    def with_labels(self, y) -> "Dataset":
        return replace(self, y=y)

    def unlabeled(self) -> "Dataset":
        return replace(self, y=None)


@dataclass(frozen=True)
class ShiftedPair:
    train: Dataset
    test: Dataset
    true_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.train.dim != self.test.dim:
            raise ValueError("train and test feature dimensions differ")
        if self.train.task != self.test.task:
            raise ValueError("train and test tasks differ")
        if self.true_weights is not None:
            w = _readonly(np.ravel(self.true_weights))
            if w.size != self.train.n or np.any(w < 0):
                raise ValueError("true_weights must be non-negative, one per train sample")
            object.__setattr__(self, "true_weights", w)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    rate: float

    def __post_init__(self):
        if self.kind not in ("pair_flip", "symmetric_flip"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("noise rate must lie in [0, 1)")


# --------------------------------------------------------------------------
# toy regression


def sinc(x):
    """Normalized sinc, ``sin(pi x) / (pi x)`` with ``sinc(0) = 1``."""
    return np.sinc(x)


def toy_importance(x):
    """Exact density ratio ``N(x; 2, 0.25^2) / N(x; 1, 0.5^2)``."""
    x = np.asarray(x, dtype=float)
    return norm.pdf(x, TOY_TEST_MEAN, TOY_TEST_STD) / norm.pdf(x, TOY_TRAIN_MEAN, TOY_TRAIN_STD)


def gen_toy_regression(n_tr: int, n_te: int, rng) -> ShiftedPair:
    """1-D sinc regression with inputs shifted from N(1, 0.5^2) to N(2, 0.25^2)."""
    if n_tr < 1 or n_te < 1:
        raise ValueError("n_tr and n_te must be positive")
    x_tr = TOY_TRAIN_MEAN + TOY_TRAIN_STD * rng.standard_normal(n_tr)
    y_tr = sinc(x_tr) + TOY_NOISE_STD * rng.standard_normal(n_tr)
    x_te = TOY_TEST_MEAN + TOY_TEST_STD * rng.standard_normal(n_te)
    y_te = sinc(x_te) + TOY_NOISE_STD * rng.standard_normal(n_te)
    return ShiftedPair(
        train=Dataset(x_tr[:, None], y_tr, domain_id=0, task="regression"),
        test=Dataset(x_te[:, None], y_te, domain_id=1, task="regression"),
        true_weights=toy_importance(x_tr),
    )


class ToyOracle:
    """Sampler with the exact density ratio of the toy regression problem."""

    def sample_train(self, n: int, rng):
        x = TOY_TRAIN_MEAN + TOY_TRAIN_STD * rng.standard_normal(n)
        return x[:, None], sinc(x) + TOY_NOISE_STD * rng.standard_normal(n)

    def sample_test(self, n: int, rng):
        x = TOY_TEST_MEAN + TOY_TEST_STD * rng.standard_normal(n)
        return x[:, None], sinc(x) + TOY_NOISE_STD * rng.standard_normal(n)

    def ratio(self, x):
        return toy_importance(np.ravel(x))


# --------------------------------------------------------------------------
# synthetic covariate shift by logistic projection


def covariate_shift_split(pool: Dataset, proj, rng) -> ShiftedPair:
    """Assign each pool sample to train with probability ``expit(16 proj'x / sd)``.

    Features are Z-scored first. ``true_weights`` carries the oracle ratio
    ``p_te(x) / p_tr(x)`` implied by the assignment probabilities.
    """
    normed, _, _ = zscore_normalize(pool)
    proj = np.asarray(proj, dtype=float).ravel()
    if proj.size != pool.dim or not np.linalg.norm(proj) > 0:
        raise InvalidProjection("projection must be a non-zero vector of feature length")
    u = normed.x @ proj
    sd = u.std()
    if not sd > 1e-12:
        raise InvalidProjection("projected features have zero variance")
    p_train = split_probability(u / sd)
    to_train = rng.random(pool.n) < p_train
    n_train = int(to_train.sum())
    if n_train == 0 or n_train == pool.n:
        raise EmptySplit(f"split sent {n_train} of {pool.n} samples to train")
    frac_tr = n_train / pool.n
    p = p_train[to_train]
    weights = ((1.0 - p) / (1.0 - frac_tr)) / (p / frac_tr)
    return ShiftedPair(
        train=replace(normed.subset(to_train), domain_id=0),
        test=replace(normed.subset(~to_train), domain_id=1),
        true_weights=weights,
    )


def split_probability(standardized_projection):
    return expit(16.0 * np.asarray(standardized_projection, dtype=float))


def _ridge_test_error(pair: ShiftedPair, ridge: float = 1e-3) -> float:
    X = np.hstack([pair.train.x, np.ones((pair.train.n, 1))])
    coef = spd_solve(X.T @ X + ridge * X.shape[0] * np.eye(X.shape[1]), X.T @ pair.train.y)
    pred = np.hstack([pair.test.x, np.ones((pair.test.n, 1))]) @ coef
    if pair.train.task == "binary":
        return float(np.mean(np.where(pred >= 0, 1.0, -1.0) != pair.test.y))
    return float(np.mean((pred - pair.test.y) ** 2))


def adversarial_shift_split(pool: Dataset, rng, candidates: int = 10, retries: int = 20) -> ShiftedPair:
    """Draw random projection directions and keep the hardest split.

    Each candidate direction is scored by the test error of a ridge model
    fitted on its train side; the worst-generalizing split is returned.
    Empty splits are redrawn up to ``retries`` times per candidate.
    """
    best, best_err = None, -np.inf
    for _ in range(candidates):
        for _attempt in range(retries):
            direction = rng.standard_normal(pool.dim)
            try:
                pair = covariate_shift_split(pool, direction, rng)
            except EmptySplit:
                continue
            break
        else:
            raise EmptySplit(f"no usable split after {retries} random directions")
        err = _ridge_test_error(pair)
        if err > best_err:
            best, best_err = pair, err
    return best


# --------------------------------------------------------------------------
# label noise and class-prior shift


def inject_label_noise(d: Dataset, spec: NoiseSpec, k: int, rng):
    """Corrupt each label independently with probability ``spec.rate``.

    Pair flip sends class ``j`` to ``(j + 1) mod k``; symmetric flip sends it
    uniformly to one of the other ``k - 1`` classes. Returns the noisy
    dataset and a boolean mask of corrupted samples.
    """
    if k < 2:
        raise InvalidK(f"need at least two classes, got k={k}")
    if d.task not in ("multiclass", "binary") or d.y is None:
        raise ValueError("label noise needs a labelled classification dataset")
    y = d.labels.copy()
    mask = rng.random(d.n) < spec.rate
    if spec.kind == "pair_flip":
        y[mask] = (y[mask] + 1) % k
    else:
        offsets = rng.integers(1, k, size=int(mask.sum()))
        y[mask] = (y[mask] + offsets) % k
    return replace(d, y=y.astype(float), n_classes=k), mask


def class_prior_weights(mu: float, rho: float):
    """Oracle importance of majority and minority classes: ``(1-mu+mu/rho, mu+rho-mu*rho)``."""
    return 1.0 - mu + mu / rho, mu + rho - mu * rho


def class_prior_shift_sample(pool: Dataset, mu: float, rho: float, n_major: int, rng):
    """Imbalanced training sample from a balanced pool.

    A random ``floor(mu * k)``-sized subset of classes becomes the minority
    and contributes ``round(n_major / rho)`` samples each; the remaining
    classes contribute ``n_major`` each. Returns the sample and the
    per-class oracle weights against a uniform test prior.
    """
    if not 0.0 < mu < 1.0:
        raise ValueError("mu must lie in (0, 1)")
    if not rho > 1.0:
        raise ValueError("rho must exceed 1")
    k = pool.n_classes
    labels = pool.labels
    n_minor = max(1, int(round(n_major / rho)))
    minority = np.sort(rng.permutation(k)[: int(math.floor(mu * k))])
    w_major, w_minor = class_prior_weights(mu, rho)
    weights = np.full(k, w_major)
    weights[minority] = w_minor
    chosen = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        if members.size < n_major:
            raise InsufficientSamples(f"class {c} has {members.size} < {n_major} samples")
        take = n_minor if c in minority else n_major
        chosen.append(rng.choice(members, size=take, replace=False))
    idx = rng.permutation(np.concatenate(chosen))
    return pool.subset(idx), weights


# --------------------------------------------------------------------------
# ingestion


def _decode(text):
    if isinstance(text, (bytes, bytearray)):
        return text.decode("utf-8")
    if hasattr(text, "read"):
        data = text.read()
        return data.decode("utf-8") if isinstance(data, bytes) else data
    return text


def parse_libsvm(text, n_features: Optional[int] = None) -> Dataset:
    """Parse ``label idx:val ...`` lines (1-based ascending indices) densely."""
    rows, labels, width = [], [], 0
    for lineno, raw in enumerate(_decode(text).splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *pairs = line.split()
        try:
            labels.append(float(head))
        except ValueError:
            raise ParseError(f"bad label {head!r}", lineno) from None
        entries, last = {}, 0
        for pair in pairs:
            idx_s, sep, val_s = pair.partition(":")
            try:
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise ParseError(f"bad feature {pair!r}", lineno) from None
            if not sep or idx < 1:
                raise ParseError(f"bad feature {pair!r}", lineno)
            if idx <= last:
                raise NonAscendingIndex(f"index {idx} after {last}", lineno)
            entries[idx], last = val, idx
        rows.append(entries)
        width = max(width, last)
    if n_features is not None:
        width = n_features
    x = np.zeros((len(rows), width))
    for r, entries in enumerate(rows):
        for idx, val in entries.items():
            x[r, idx - 1] = val
    y = np.asarray(labels)
    if y.size and np.all(np.isin(y, (-1.0, 1.0))):
        return Dataset(x, y, task="binary")
    return Dataset(x, y, task="regression")


def write_libsvm(d: Dataset) -> str:
    """Dense LIBSVM text; every column is written so the width survives a round trip."""
    out = io.StringIO()
    for i in range(d.n):
        label = d.y[i] if d.y is not None else 0.0
        head = f"{int(label):+d}" if d.task == "binary" else repr(float(label))
        feats = " ".join(f"{j + 1}:{float(v)!r}" for j, v in enumerate(d.x[i]))
        out.write(f"{head} {feats}".rstrip() + "\n")
    return out.getvalue()


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def parse_csv(text, label_col: Optional[int] = None) -> Dataset:
    """Rectangular numeric CSV; ``label_col`` is 1-based.

    A header is assumed when any cell of the first row is non-numeric.
    """
    lines = [ln for ln in _decode(text).splitlines() if ln.strip()]
    if lines and not all(_is_number(c.strip()) for c in lines[0].split(",")):
        start = 1
    else:
        start = 0
    rows, width = [], None
    for lineno, line in enumerate(lines[start:], start=start + 1):
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise RaggedRows(f"expected {width} cells, found {len(cells)}", lineno)
        row = []
        for col, cell in enumerate(cells, start=1):
            try:
                row.append(float(cell.strip()))
            except ValueError:
                raise NonNumericCell(f"non-numeric cell {cell!r}", lineno, col) from None
        rows.append(row)
    table = np.asarray(rows, dtype=float).reshape(len(rows), width or 0)
    if label_col is None:
        return Dataset(table)
    if not 1 <= label_col <= table.shape[1]:
        raise ParseError(f"label column {label_col} outside 1..{table.shape[1]}")
    y = table[:, label_col - 1]
    x = np.delete(table, label_col - 1, axis=1)
    return Dataset(x, y)


def write_csv(d: Dataset, header: bool = True) -> str:
    """CSV with features first and the label (if any) as the last column."""
    out = io.StringIO()
    cols = [f"x{j + 1}" for j in range(d.dim)] + (["y"] if d.y is not None else [])
    if header:
        out.write(",".join(cols) + "\n")
    table = d.x if d.y is None else np.column_stack([d.x, d.y])
    for row in table:
        out.write(",".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


def zscore_normalize(d: Dataset):
    """Standardize columns to mean 0 / std 1; constant columns become 0 with std 1."""
    if d.n < 2:
        raise ValueError("need at least two samples to normalize")
    means = d.x.mean(axis=0)
    stds = d.x.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    return replace(d, x=(d.x - means) / stds), means, stds


# --------------------------------------------------------------------------
# synthetic classification pools used by the harness


def gaussian_classes(n_per_class: int, k: int, dim: int, rng, spread: float = 3.0, scale: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs with class means on a circle (dim >= 2)."""
    angles = 2 * np.pi * np.arange(k) / k
    means = np.zeros((k, dim))
    means[:, 0] = spread * np.cos(angles)
    means[:, 1] = spread * np.sin(angles)
    if dim > 2:
        means[:, 2:] = rng.standard_normal((k, dim - 2))
    x = np.concatenate([means[c] + scale * rng.standard_normal((n_per_class, dim)) for c in range(k)])
    y = np.repeat(np.arange(k), n_per_class).astype(float)
    idx = rng.permutation(x.shape[0])
    return Dataset(x[idx], y[idx], task="multiclass", n_classes=k)
