"""Seeded multi-trial experiments over every method in the package.

A configuration names one or more methods, a data generator and the
hyper-parameters of each method. ``run_experiment`` runs every trial on a
fresh random stream derived from ``seed + trial``, evaluates each method on
held-out target data and appends mean/std rows (``trial = -1``).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Annotated, List, Literal, NamedTuple, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.special import betainc
from scipy.stats import spearmanr

from . import cmt as cmt_mod
from .data import (
    Dataset,
    NoiseSpec,
    ShiftedPair,
    adversarial_shift_split,
    class_prior_shift_sample,
    gaussian_classes,
    gen_toy_regression,
    inject_label_noise,
    parse_csv,
    parse_libsvm,
    zscore_normalize,
)
from .diw import DiwConfig, diw_train
from .erm import Loss, flatten_weights, iwerm_fit
from .errors import ConfigError, LengthMismatch, ShiftLabError
from .kernels import GaussianBasis, choose_centers, median_heuristic
from .nnet import Mlp
from .numerics import seeded_rng
from .onestep import OneStepConfig, erm_gradient, onestep_gradient, onestep_linear, outputs
from .ratio import rulsif_fit, select_lambda

METHODS = ("erm", "iwerm", "eiwerm", "riwerm", "onestep_linear", "onestep_gradient", "diw", "cmt")
PRESET_DIR = Path(__file__).with_name("presets")
GAMMA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# --------------------------------------------------------------------------
# data generators


class ToyData(_Strict):
    generator: Literal["toy"]
    n_train: int = Field(150, ge=2)
    n_test: int = Field(150, ge=2)


class FileData(_Strict):
    generator: Literal["files"]
    train: str
    test: str
    format: Literal["csv", "libsvm"] = "csv"
    label_col: Optional[int] = None
    task: Literal["regression", "binary", "multiclass"] = "regression"

    @field_validator("train", "test")
    @classmethod
    def _exists(cls, path):
        if not Path(path).is_file():
            raise ValueError(f"file not found: {path}")
        return path


class CovshiftData(_Strict):
    generator: Literal["covshift"]
    n_pool: int = Field(2000, ge=10)
    dim: int = Field(5, ge=1)
    spread: float = 1.0
    candidates: int = Field(10, ge=1)


class LabelNoiseData(_Strict):
    generator: Literal["labelnoise"]
    k: int = Field(3, ge=2)
    dim: int = Field(2, ge=2)
    n_per_class: int = Field(300, ge=1)
    n_valid: int = Field(300, ge=1)
    n_test: int = Field(3000, ge=1)
    spread: float = 2.0
    noise: Literal["pair_flip", "symmetric_flip"] = "symmetric_flip"
    rate: float = Field(0.4, ge=0.0, le=1.0)


class PriorShiftData(_Strict):
    generator: Literal["priorshift"]
    k: int = Field(10, ge=2)
    dim: int = Field(5, ge=2)
    mu: float = Field(0.2, gt=0.0, lt=1.0)
    rho: float = Field(100.0, gt=1.0)
    n_major: int = Field(1247, ge=1)
    n_valid: int = Field(500, ge=1)
    n_test: int = Field(5000, ge=1)
    spread: float = 3.0


class MixingData(_Strict):
    generator: Literal["mixing"]
    dim: int = Field(3, ge=2)
    n_domains: int = Field(3, ge=2)
    n_source: int = Field(1000, ge=2)
    n_target: int = Field(10, ge=2)
    n_test: int = Field(2000, ge=1)


DataSpec = Annotated[
    Union[ToyData, FileData, CovshiftData, LabelNoiseData, PriorShiftData, MixingData],
    Field(discriminator="generator"),
]

REGRESSION_DATA = ("toy", "files")
COMPATIBLE = {
    "erm": ("toy", "files", "covshift", "labelnoise", "priorshift"),
    "iwerm": REGRESSION_DATA,
    "eiwerm": REGRESSION_DATA,
    "riwerm": REGRESSION_DATA,
    "onestep_linear": REGRESSION_DATA,
    "onestep_gradient": ("toy", "files", "covshift"),
    "diw": ("labelnoise", "priorshift"),
    "cmt": ("mixing",),
}


# --------------------------------------------------------------------------
# method settings


class KernelSettings(_Strict):
    b: int = Field(50, ge=1)
    sigma_f: Optional[float] = Field(None, gt=0)  # None: median heuristic on test inputs
    sigma_g: Optional[float] = Field(None, gt=0)
    mu: float = Field(0.01, gt=0)
    lambda_grid: List[float] = [1e-3, 1e-2, 1e-1, 1.0, 10.0]
    folds: int = Field(5, ge=2)
    loss: Literal["squared", "tukey"] = "squared"


class EiwermSettings(_Strict):
    gamma: Union[float, Literal["select"]] = 0.5

    @field_validator("gamma")
    @classmethod
    def _unit(cls, v):
        if v != "select" and not 0.0 <= v <= 1.0:
            raise ValueError("gamma must lie in [0, 1] or be 'select'")
        return v


class RiwermSettings(_Strict):
    eta: float = Field(0.5, ge=0.0, le=1.0)


class OnestepSettings(_Strict):
    m: float = Field(1.0, gt=0)
    lam: float = Field(0.1, gt=0)
    rounds: int = Field(10, ge=1)
    hidden: int = Field(16, ge=1)
    epochs_g: int = Field(5, ge=1)
    epochs_f: int = Field(10, ge=1)
    minibatch: int = Field(32, ge=1)
    lr: float = Field(1e-2, gt=0)
    pretrain_g: bool = False


class NetSettings(_Strict):
    hidden: int = Field(16, ge=1)
    epochs: int = Field(20, ge=1)
    minibatch: int = Field(128, ge=1)
    lr: float = Field(1e-2, gt=0)


class DiwSettings(_Strict):
    transform: Literal["loss_value", "hidden"] = "loss_value"
    B: float = Field(10.0, gt=0)
    eps: float = Field(0.01, ge=0)
    bandwidth: Optional[float] = Field(None, gt=0)
    pretrain_epochs: int = Field(1, ge=0)


class CmtSettings(_Strict):
    mechanism: Literal["gcl", "oracle"] = "gcl"
    cap: int = Field(100_000, ge=1)
    filter_quantile: Optional[float] = Field(0.1, gt=0, lt=1)
    bandwidth: Optional[float] = Field(None, gt=0)
    gcl_hidden: int = Field(20, ge=1)
    gcl_epochs: int = Field(300, ge=1)
    gcl_lr: float = Field(1e-3, gt=0)
    gcl_restarts: int = Field(4, ge=1)


class ExperimentConfig(_Strict):
    name: str = ""
    method: Union[Literal[METHODS], List[Literal[METHODS]]]  # type: ignore[valid-type]
    data: DataSpec
    trials: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    workers: Optional[int] = Field(None, ge=1)
    kernel: KernelSettings = KernelSettings()
    eiwerm: EiwermSettings = EiwermSettings()
    riwerm: RiwermSettings = RiwermSettings()
    onestep: OnestepSettings = OnestepSettings()
    net: NetSettings = NetSettings()
    diw: DiwSettings = DiwSettings()
    cmt: CmtSettings = CmtSettings()

    @property
    def methods(self) -> tuple:
        return (self.method,) if isinstance(self.method, str) else tuple(self.method)

    @model_validator(mode="after")
    def _compatible(self):
        gen = self.data.generator
        for i, m in enumerate(self.methods):
            if gen not in COMPATIBLE[m]:
                raise ValueError(f"method {m!r} cannot run on {gen!r} data (method[{i}])")
        if not self.methods:
            raise ValueError("at least one method is required")
        return self


def _field_path(err) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def load_config(source) -> ExperimentConfig:
    """Validate a config given as a dict, a JSON string or a path to a JSON file."""
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", "<file>")
        source = path.read_text()
    if isinstance(source, str):
        try:
            source = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "<root>") from exc
    try:
        return ExperimentConfig.model_validate(source)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], _field_path(first)) from exc


def preset_names() -> list:
    return sorted(p.stem for p in PRESET_DIR.glob("*.json"))


def preset_text(name: str) -> str:
    path = PRESET_DIR / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}", "<preset>")
    return path.read_text()


def load_preset(name: str, **overrides) -> ExperimentConfig:
    raw = json.loads(preset_text(name))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return load_config(raw)


# --------------------------------------------------------------------------
# reports


class TrialReport(NamedTuple):
    trial: int
    seed: int
    metric: str
    value: float
    ms: float


HEADER = ("trial", "seed", "metric", "value", "ms")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_report(reports, path) -> None:
    """CSV with header ``trial,seed,metric,value,ms``; floats keep 17 digits."""
    with open(path, "w", newline="") as fh:
        fh.write(report_text(reports))


def report_text(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for r in reports:
        writer.writerow([r.trial, r.seed, r.metric, _fmt(r.value), _fmt(r.ms)])
    return buf.getvalue()


def read_report(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != HEADER:
        raise ShiftLabError(f"{path} is not a report file")
    return [TrialReport(int(t), int(s), m, float(v), float(ms)) for t, s, m, v, ms in rows[1:]]


def aggregate(reports, seed: int) -> list:
    """Mean and sample std (over finite values) per metric, as ``trial=-1`` rows."""
    by_metric = {}
    for r in reports:
        by_metric.setdefault(r.metric, []).append(r.value)
    out = []
    for metric in sorted(by_metric):
        values = np.array(by_metric[metric], dtype=float)
        finite = values[np.isfinite(values)]
        mean = float(finite.mean()) if finite.size else math.nan
        std = float(finite.std(ddof=1)) if finite.size > 1 else 0.0 if finite.size else math.nan
        out.append(TrialReport(-1, seed, f"{metric}:mean", mean, 0.0))
        out.append(TrialReport(-1, seed, f"{metric}:std", std, 0.0))
    return out


def metric_values(reports, metric: str) -> np.ndarray:
    """Per-trial values of one metric, ordered by trial."""
    rows = sorted((r for r in reports if r.metric == metric and r.trial >= 0), key=lambda r: r.trial)
    return np.array([r.value for r in rows], dtype=float)


# --------------------------------------------------------------------------
# statistics


class TTest(NamedTuple):
    t: float
    p: float
    significant: bool


def paired_t_test(a, b, alpha: float = 0.05) -> TTest:
    """Two-sided paired t-test through the regularized incomplete beta function.

    Zero variance of the differences gives ``t = 0, p = 1`` for identical
    samples and ``t = +-inf, p = 0`` otherwise.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"samples have {a.size} and {b.size} entries")
    if a.size < 2:
        raise LengthMismatch("need at least two pairs")
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0 or not np.isfinite(sd):
        if mean == 0.0:
            return TTest(0.0, 1.0, False)
        return TTest(math.copysign(math.inf, mean), 0.0, True)
    t = mean / (sd / math.sqrt(n))
    dof = n - 1
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return TTest(float(t), p, p < alpha)


# --------------------------------------------------------------------------
# trials
#
# Random streams are keyed by (seed + trial, stream id): stream 0 builds the
# trial's data, stream 1 + METHODS.index(m) drives method m. Experiment-wide
# state (mechanism transfer sources) uses (seed, 100 + k).

DATA_STREAM = 0
FAMILY_STREAM, SOURCE_STREAM, GCL_STREAM = 100, 101, 102


def method_stream(seed: int, method: str):
    return seeded_rng(seed, 1 + METHODS.index(method))


def _file_pair(spec: FileData) -> ShiftedPair:
    parse = parse_csv if spec.format == "csv" else parse_libsvm
    kwargs = {"label_col": spec.label_col} if spec.format == "csv" else {}
    train = parse(Path(spec.train).read_text(), **kwargs)
    test = parse(Path(spec.test).read_text(), **kwargs)
    train = Dataset(train.x, train.y, domain_id=0, task=spec.task)
    test = Dataset(test.x, test.y, domain_id=1, task=spec.task)
    return ShiftedPair(train, test, None)


def _mse(f, d: Dataset) -> float:
    return float(np.mean((outputs(f, d.x) - np.asarray(d.y, dtype=float)) ** 2))


def _accuracy(scores, d: Dataset) -> float:
    scores = np.asarray(scores)
    if scores.ndim == 2 and scores.shape[1] > 1:
        return float(np.mean(np.argmax(scores, axis=1) == d.labels))
    return float(np.mean(np.where(np.ravel(scores) >= 0, 1.0, -1.0) == np.ravel(d.y)))


# regression: toy and file data --------------------------------------------


def _regression_data(cfg: ExperimentConfig, rng):
    spec = cfg.data
    pair = gen_toy_regression(spec.n_train, spec.n_test, rng) if spec.generator == "toy" else _file_pair(spec)
    k = cfg.kernel
    b = min(k.b, pair.test.n)
    cf = choose_centers(pair.test.x, b, rng)
    cg = choose_centers(pair.test.x, b, rng)
    sf = k.sigma_f if k.sigma_f is not None else median_heuristic(pair.test.x)
    sg = k.sigma_g if k.sigma_g is not None else median_heuristic(pair.test.x)
    return pair, GaussianBasis(cf, sf), GaussianBasis(cg, sg)


def _ratio_weights(cfg, pair, basis_g, eta, rng):
    k = cfg.kernel
    lam = select_lambda(pair.train.x, pair.test.x, basis_g, k.lambda_grid, k.folds, rng, eta=eta)
    return rulsif_fit(pair.train.x, pair.test.x, basis_g, lam, eta)(pair.train.x)


def _select_gamma(cfg, pair, weights, basis_f, loss, rng) -> float:
    """Importance-weighted cross-validation over the flattening grid."""
    n = pair.train.n
    folds = rng.permutation(n) % cfg.kernel.folds
    scores = []
    for gamma in GAMMA_GRID:
        w = flatten_weights(weights, gamma)
        total = 0.0
        for k in range(cfg.kernel.folds):
            fit_rows, held = folds != k, folds == k
            sub = ShiftedPair(pair.train.subset(np.flatnonzero(fit_rows)), pair.test, None)
            f = iwerm_fit(sub, w[fit_rows], loss, basis_f, cfg.kernel.mu)
            r = f(pair.train.x[held]) - pair.train.y[held]
            total += float(np.mean(weights[held] * r * r))
        scores.append(total)
    return GAMMA_GRID[int(np.argmin(scores))]


def _onestep_gradient_fit(cfg, pair, loss, rng):
    o = cfg.onestep
    dim = pair.train.dim
    f = Mlp.init([dim, o.hidden, 1], rng)
    g = Mlp.init([dim, o.hidden, 1], rng)
    osc = OneStepConfig(
        m=o.m,
        lam=o.lam,
        rounds=o.rounds,
        loss_ub=loss,
        epochs_g=o.epochs_g,
        epochs_f=o.epochs_f,
        minibatch=o.minibatch,
        pretrain_g=o.pretrain_g,
        lr_f=o.lr,
        lr_g=o.lr,
    )
    return onestep_gradient(pair.train, pair.test.x, f, g, osc, rng).f


def _regression_method(cfg, data, m, rng) -> dict:
    pair, basis_f, basis_g = data
    loss = Loss(cfg.kernel.loss)
    mu = cfg.kernel.mu
    out = {}
    if m == "erm":
        f = iwerm_fit(pair, np.ones(pair.train.n), loss, basis_f, mu)
    elif m in ("iwerm", "eiwerm"):
        w = _ratio_weights(cfg, pair, basis_g, 0.0, rng)
        if m == "eiwerm":
            gamma = cfg.eiwerm.gamma
            if gamma == "select":
                gamma = _select_gamma(cfg, pair, w, basis_f, loss, rng)
                out["eiwerm/gamma"] = gamma
            w = flatten_weights(w, gamma)
        f = iwerm_fit(pair, w, loss, basis_f, mu)
    elif m == "riwerm":
        w = _ratio_weights(cfg, pair, basis_g, cfg.riwerm.eta, rng)
        f = iwerm_fit(pair, w, loss, basis_f, mu)
    elif m == "onestep_linear":
        o = cfg.onestep
        osc = OneStepConfig(m=o.m, lam=o.lam, mu=mu, rounds=o.rounds, loss_ub=loss)
        f = onestep_linear(pair.train, pair.test.x, basis_f, basis_g, osc).f
    else:
        f = _onestep_gradient_fit(cfg, pair, Loss("squared"), rng)
    out[f"{m}/mse"] = _mse(f, pair.test)
    return out


# binary classification under an adversarial covariate-shift split ----------


def _covshift_data(cfg, rng):
    spec = cfg.data
    pool = gaussian_classes(spec.n_pool // 2, 2, max(2, spec.dim), rng, spread=spec.spread)
    y = np.where(pool.labels == 1, 1.0, -1.0)
    pool = zscore_normalize(Dataset(pool.x, y, task="binary"))[0]
    return adversarial_shift_split(pool, rng, candidates=spec.candidates)


def _covshift_method(cfg, pair, m, rng) -> dict:
    n = cfg.net
    if m == "erm":
        f = Mlp.init([pair.train.dim, n.hidden, 1], rng)
        erm_gradient(pair.train, f, Loss("logistic"), n.epochs, n.minibatch, n.lr, rng)
    else:
        f = _onestep_gradient_fit(cfg, pair, Loss("logistic"), rng)
    return {f"{m}/accuracy": _accuracy(f(pair.test.x), pair.test)}


# multiclass: label noise and class-prior shift ----------------------------


def _classification_data(cfg, rng):
    spec = cfg.data
    if spec.generator == "labelnoise":
        clean = gaussian_classes(spec.n_per_class, spec.k, spec.dim, rng, spread=spec.spread)
        train, mask = inject_label_noise(clean, NoiseSpec(spec.noise, spec.rate), spec.k, rng)
        extra = {"mask": mask}
    else:
        pool = gaussian_classes(spec.n_major, spec.k, spec.dim, rng, spread=spec.spread)
        train, oracle = class_prior_shift_sample(pool, spec.mu, spec.rho, spec.n_major, rng)
        extra = {"oracle": oracle}
    valid = gaussian_classes(max(1, spec.n_valid // spec.k), spec.k, spec.dim, rng, spread=spec.spread)
    test = gaussian_classes(max(1, spec.n_test // spec.k), spec.k, spec.dim, rng, spread=spec.spread)
    f0 = Mlp.init([train.dim, cfg.net.hidden, spec.k], rng)
    return train, valid, test, extra, f0


def _classification_method(cfg, data, m, rng) -> dict:
    train, valid, test, extra, f0 = data
    k = cfg.data.k
    n = cfg.net
    loss = Loss("softmax_ce")
    f = f0.clone()
    out = {}
    if m == "erm":
        # same number of passes as DIW's pretraining plus weighted epochs
        erm_gradient(train, f, loss, n.epochs + cfg.diw.pretrain_epochs, n.minibatch, n.lr, rng)
    else:
        d = cfg.diw
        dcfg = DiwConfig(
            transform=d.transform,
            B=d.B,
            eps=d.eps,
            bandwidth=d.bandwidth,
            pretrain_epochs=d.pretrain_epochs,
            epochs=n.epochs,
            minibatch=n.minibatch,
            lr=n.lr,
        )
        f, w = diw_train(train, valid, f, dcfg, loss, rng, noise_mask=extra.get("mask"))
        if "mask" in extra:
            bad = extra["mask"]
            if bad.any() and (~bad).any():
                out["diw/weight_ratio_corrupted"] = float(w[bad].mean() / w[~bad].mean())
        if "oracle" in extra:
            per_class = np.array([w[train.labels == c].mean() for c in range(k)])
            for c in range(k):
                out[f"diw/class_weight_{c}"] = float(per_class[c])
            out["diw/spearman"] = float(spearmanr(per_class, extra["oracle"]).statistic)
    out[f"{m}/accuracy"] = _accuracy(f(test.x), test)
    return out


# mechanism transfer -------------------------------------------------------


def _shared_state(cfg):
    """Source domains and mechanism, fixed for the whole experiment."""
    if cfg.data.generator != "mixing":
        return None
    spec = cfg.data
    family = cmt_mod.MixingFamily.random(spec.dim, spec.n_domains, seeded_rng(cfg.seed, FAMILY_STREAM))
    sources = family.sample_sources(spec.n_source, seeded_rng(cfg.seed, SOURCE_STREAM))
    c = cfg.cmt
    if c.mechanism == "oracle":
        mech = family.mechanism
    else:
        gcl_rng = seeded_rng(cfg.seed, GCL_STREAM)
        mech = cmt_mod.gcl_fit(
            sources, hidden_units=c.gcl_hidden, lr=c.gcl_lr, epochs=c.gcl_epochs, rng=gcl_rng, restarts=c.gcl_restarts
        ).mech
    return family, sources, mech


def _mixing_data(cfg, rng, shared):
    family, sources, mech = shared
    spec = cfg.data
    # every trial is a new target domain of the family: fresh component scales
    family = replace(family, target_scales=cmt_mod.random_scales(spec.dim, rng))
    target = family.sample_target(spec.n_target, rng)
    test = family.sample_target(spec.n_test, rng)
    return sources, mech, target, test


def _cmt_method(cfg, data, m, rng) -> dict:
    sources, mech, target, test = data
    c = cfg.cmt
    ccfg = cmt_mod.CmtConfig(cap=c.cap, filter_quantile=c.filter_quantile, bandwidth=c.bandwidth)
    f = cmt_mod.cmt_fit(sources, target, mech, ccfg, rng)
    base = cmt_mod.taronly_fit(target, ccfg)
    return {"cmt/mse": _mse(f, test), "cmt/taronly_mse": _mse(base, test)}


def _trial_data(cfg, rng, shared):
    gen = cfg.data.generator
    if gen in REGRESSION_DATA:
        return _regression_data(cfg, rng), _regression_method
    if gen == "covshift":
        return _covshift_data(cfg, rng), _covshift_method
    if gen == "mixing":
        return _mixing_data(cfg, rng, shared), _cmt_method
    return _classification_data(cfg, rng), _classification_method


RECOVERABLE = (ShiftLabError, ValueError, ArithmeticError, np.linalg.LinAlgError)


def run_trial(cfg: ExperimentConfig, trial: int, shared=None, timing: bool = False) -> list:
    """Reports of one trial; a failing method yields a ``<method>/error:<Type>`` row (NaN)."""
    seed = cfg.seed + trial
    rows = []
    try:
        data, method_fn = _trial_data(cfg, seeded_rng(seed, DATA_STREAM), shared)
    except RECOVERABLE as exc:
        return [TrialReport(trial, seed, f"data/error:{type(exc).__name__}", math.nan, 0.0)]
    for m in cfg.methods:
        start = time.perf_counter()
        try:
            values = method_fn(cfg, data, m, method_stream(seed, m))
        except RECOVERABLE as exc:
            values = {f"{m}/error:{type(exc).__name__}": math.nan}
        ms = (time.perf_counter() - start) * 1000.0 if timing else 0.0
        for name, value in values.items():
            rows.append(TrialReport(trial, seed, name, float(value), ms))
    return rows


def _run_chunk(args):
    cfg_json, trials, timing = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    shared = _shared_state(cfg)
    return [run_trial(cfg, t, shared, timing) for t in trials]


def run_experiment(cfg: ExperimentConfig, timing: bool = False) -> list:
    """All trial rows (ordered by trial) followed by the aggregate rows.

    Every method in a trial sees the same data and draws its own
    randomness from a dedicated stream, so adding a method leaves the
    others' results unchanged. ``timing=False`` writes zeros to the ``ms``
    column, keeping reports byte-identical across runs.
    """
    workers = cfg.workers or os.cpu_count() or 1
    workers = max(1, min(workers, cfg.trials))
    if workers == 1:
        shared = _shared_state(cfg)
        per_trial = [run_trial(cfg, t, shared, timing) for t in range(cfg.trials)]
    else:
        chunks = [list(range(i, cfg.trials, workers)) for i in range(workers)]
        payload = cfg.model_dump_json()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, [(payload, c, timing) for c in chunks]))
        per_trial = [None] * cfg.trials
        for chunk, res in zip(chunks, results):
            for t, rows in zip(chunk, res):
                per_trial[t] = rows
    rows = [r for trial_rows in per_trial for r in trial_rows]
    return rows + aggregate(rows, cfg.seed)


def failed(reports) -> bool:
    return any("/error:" in r.metric for r in reports if r.trial >= 0)
