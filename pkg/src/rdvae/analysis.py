"""Post-training statistics: unit-norm check, variance estimates, density estimators.

Everything here is read-only over a frozen :class:`~rdvae.vae.VaeModel`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import SCALED_TAGS, coding_loss, convex_scale, kl_divergence
from .nn import DivergenceError
from .vae import PosteriorStats, VaeModel

INFORMATIVE_THRESHOLD = 1.5
DEFAULT_EPS = 1e-2
ESTIMATOR_NAMES = ("est_i", "est_ii", "est_iii", "est_iv")


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def coding_second_derivative(model: VaeModel, z, j: int, eps: float = DEFAULT_EPS, kind=None):
    """``D(Dec(z), Dec(z + eps u_j)) / eps^2``; ``z`` may be a single point or a batch."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    kind = model.config.loss if kind is None else kind
    z = np.asarray(z, dtype=np.float64)
    zb = np.atleast_2d(z)
    shifted = zb.copy()
    shifted[:, j] += eps
    base, moved = model.decode(zb), model.decode(shifted)
    if not (np.all(np.isfinite(base)) and np.all(np.isfinite(moved))):
        raise DivergenceError("decoder produced non-finite output")
    val = np.atleast_1d(coding_loss(base, moved, kind)) / (eps * eps)
    return val[0] if z.ndim == 1 else val


def informative_mask(stats: PosteriorStats, threshold: float = INFORMATIVE_THRESHOLD):
    return np.mean(stats.sigma ** -2.0, axis=0) >= threshold


def norm_statistic(model: VaeModel, x, beta: float | None = None, eps: float = DEFAULT_EPS,
                   stats: PosteriorStats | None = None, chunk: int = 8192):
    """Per-sample ``(2/beta) sigma_j^2 D'_j(mu)`` as an ``(N, n)`` array plus per-dim mean and SD."""
    beta = model.config.beta if beta is None else beta
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    stats = model.posterior_stats(x) if stats is None else stats
    n = stats.mu.shape[1]
    d2 = np.empty_like(stats.mu)
    for sl in _chunks(x.shape[0], chunk):
        for j in range(n):
            d2[sl, j] = coding_second_derivative(model, stats.mu[sl], j, eps)
    values = (2.0 / beta) * stats.sigma ** 2 * d2
    return values, values.mean(axis=0), values.std(axis=0), d2


def estimated_variance(stats: PosteriorStats, beta: float, threshold: float = INFORMATIVE_THRESHOLD):
    """Simple variance estimate ``(beta/2) E[sigma^-2]``.

    Returns ``(variance, mean_inv_sigma2, ratio, informative)``; ratios are
    taken against the smallest informative dimension and are NaN elsewhere.
    """
    inv = np.mean(stats.sigma ** -2.0, axis=0)
    informative = inv >= threshold
    ratio = np.full(inv.shape, np.nan)
    if informative.any():
        ratio[informative] = inv[informative] / inv[informative].min()
    return 0.5 * beta * inv, inv, ratio, informative


def accurate_variance(stats: PosteriorStats, beta: float):
    """Sign-corrected variance estimate; returns ``(variance, correction)`` with correction >= 0."""
    inv = np.mean(stats.sigma ** -2.0, axis=0)
    signed = np.mean(np.sign(stats.mu) / stats.sigma, axis=0)
    correction = (2.0 / math.pi) * signed ** 2
    return 0.5 * beta * (inv - correction), 0.5 * beta * correction


def elbo_at_point(model: VaeModel, x, stats: PosteriorStats | None = None):
    """Deterministic per-sample cost ``lam * E_q[D] + KL`` with E_q[D] from the +/- sigma pair."""
    cfg = model.config
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    stats = model.posterior_stats(x) if stats is None else stats
    plus = coding_loss(x, model.decode(stats.mu + stats.sigma), cfg.loss)
    minus = coding_loss(x, model.decode(stats.mu - stats.sigma), cfg.loss)
    _, kl = kl_divergence(stats.mu, stats.sigma)
    return cfg.lam * 0.5 * (plus + minus) + kl


def _metric_scale(x, kind):
    if kind.tag in SCALED_TAGS:
        return convex_scale(x, kind)
    # no scalar metric for bce/ssim: a_x = 1, so iii is prior times prod(sigma) and iv equals ii
    return np.ones(np.atleast_2d(x).shape[0])


def log_probability_estimates(model: VaeModel, x, informative=None, stats: PosteriorStats | None = None,
                              l_x=None):
    """Log of the four density estimators, up to additive constants.

    i: prior density at mu; ii: ``-L_x``; iii: i plus ``(n/2) log a_x + sum log sigma``;
    iv: ii plus ``(n/2) log a_x``. Products run over informative dims only.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    stats = model.posterior_stats(x) if stats is None else stats
    if informative is None:
        informative = informative_mask(stats)
    informative = np.asarray(informative, dtype=bool)
    k = int(informative.sum())
    mu, sigma = stats.mu[:, informative], stats.sigma[:, informative]
    l_x = elbo_at_point(model, x, stats) if l_x is None else l_x
    log_a = np.log(_metric_scale(x, model.config.loss))
    log_prior = -0.5 * np.sum(mu * mu, axis=1) - 0.5 * k * math.log(2.0 * math.pi)
    return {
        "est_i": log_prior,
        "est_ii": -l_x,
        "est_iii": 0.5 * k * log_a + log_prior + np.sum(np.log(sigma), axis=1),
        "est_iv": 0.5 * k * log_a - l_x,
    }


def _exp_rescaled(log_values):
    # Pearson is scale invariant, so shifting the log before exponentiating is harmless
    log_values = np.asarray(log_values, dtype=np.float64)
    return np.exp(log_values - np.max(log_values))


def probability_estimates(model: VaeModel, x, informative=None, stats=None, l_x=None):
    """Linear-scale estimators, each rescaled so its maximum is 1."""
    logs = log_probability_estimates(model, x, informative, stats, l_x)
    return {name: _exp_rescaled(v) for name, v in logs.items()}


def pearson(a, b) -> float:
    """Sample Pearson correlation coefficient."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length vectors with at least 2 entries")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(np.dot(da, da)), math.sqrt(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        raise ValueError("zero variance input")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def _pearson_or_nan(a, b) -> float:
    # a constant estimator (e.g. no informative dims yet) has no defined correlation
    try:
        return pearson(a, b)
    except ValueError:
        return float("nan")


def order_latents(variance_estimates) -> np.ndarray:
    """Indices sorted by descending variance; ties keep original order."""
    v = np.asarray(variance_estimates, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("variance estimates must be finite")
    return np.argsort(-v, kind="stable")


def traverse(model: VaeModel, j: int, lo: float = -2.0, hi: float = 2.0, steps: int = 9):
    """Decode ``steps`` latent points with ``z_j`` swept over ``[lo, hi]`` and other dims at 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    values = np.array([0.0]) if steps == 1 else np.linspace(lo, hi, steps)
    z = np.zeros((values.size, model.config.latent_dim))
    z[:, j] = values
    return model.decode(z)


def traversal_displacement(outputs) -> float:
    """Largest pairwise Euclidean distance between traversal outputs."""
    out = np.atleast_2d(outputs)
    diff = out[:, None, :] - out[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=-1))))


@dataclass
class PropertyReport:
    beta: float
    eps: float
    threshold: float
    norm_mean: np.ndarray
    norm_sd: np.ndarray
    d_prime_mean: np.ndarray
    mean_inv_sigma2: np.ndarray
    ratio: np.ndarray
    var_simple: np.ndarray
    var_accurate: np.ndarray
    informative: np.ndarray
    order: np.ndarray
    l_x: np.ndarray
    estimates: dict
    p_true: np.ndarray | None = None
    pearson: dict = field(default_factory=dict)
    pearson_log: dict = field(default_factory=dict)
    traversals: list = field(default_factory=list)
    config_hash: str | None = None

    @property
    def latent_dim(self) -> int:
        return int(self.norm_mean.size)

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]

        return {
            "beta": self.beta,
            "eps": self.eps,
            "threshold": self.threshold,
            "config_hash": self.config_hash,
            "per_dim": {
                "norm_mean": arr(self.norm_mean),
                "norm_sd": arr(self.norm_sd),
                "d_prime_mean": arr(self.d_prime_mean),
                "mean_inv_sigma2": arr(self.mean_inv_sigma2),
                "ratio": arr(self.ratio),
                "var_simple": arr(self.var_simple),
                "var_accurate": arr(self.var_accurate),
                "informative": [bool(v) for v in self.informative],
                "order": [int(v) for v in self.order],
            },
            "pearson": self.pearson,
            "pearson_log": self.pearson_log,
            "per_sample": {
                "l_x": arr(self.l_x),
                "p_true": arr(self.p_true),
                **{k: arr(v) for k, v in self.estimates.items()},
            },
        }


def property_report(model: VaeModel, x, p_true=None, eps: float = DEFAULT_EPS,
                    threshold: float = INFORMATIVE_THRESHOLD, traverse_steps: int = 9,
                    config_hash: str | None = None) -> PropertyReport:
    """Compute every statistic over the full evaluation set ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    beta = model.config.beta
    stats = model.posterior_stats(x)
    _, norm_mean, norm_sd, d2 = norm_statistic(model, x, beta, eps, stats)
    var_simple, inv, ratio, informative = estimated_variance(stats, beta, threshold)
    var_acc, _ = accurate_variance(stats, beta)
    l_x = elbo_at_point(model, x, stats)
    logs = log_probability_estimates(model, x, informative, stats, l_x)
    estimates = {k: _exp_rescaled(v) for k, v in logs.items()}
    r, r_log = {}, {}
    if p_true is not None:
        p_true = np.asarray(p_true, dtype=np.float64)
        for name in ESTIMATOR_NAMES:
            r[name] = _pearson_or_nan(estimates[name], p_true)
            r_log[name] = _pearson_or_nan(logs[name], np.log(p_true))
    traversals = [traverse(model, j, steps=traverse_steps) for j in range(stats.mu.shape[1])]
    return PropertyReport(
        beta=beta, eps=eps, threshold=threshold,
        norm_mean=norm_mean, norm_sd=norm_sd, d_prime_mean=d2.mean(axis=0),
        mean_inv_sigma2=inv, ratio=ratio, var_simple=var_simple, var_accurate=var_acc,
        informative=informative, order=order_latents(var_simple),
        l_x=l_x, estimates=estimates, p_true=p_true, pearson=r, pearson_log=r_log,
        traversals=traversals, config_hash=config_hash,
    )


def _fmt(v) -> str:
    return repr(float(v))


def write_report(report: PropertyReport, out_dir) -> Path:
    """Write report.json, perdim.csv, scatter.csv and traverse.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    with open(out / "perdim.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", "mean_norm_stat", "sd_norm_stat", "mean_inv_sigma2", "ratio",
                    "var_simple", "var_accurate", "informative"])
        for j in range(report.latent_dim):
            w.writerow([j, _fmt(report.norm_mean[j]), _fmt(report.norm_sd[j]),
                        _fmt(report.mean_inv_sigma2[j]), _fmt(report.ratio[j]),
                        _fmt(report.var_simple[j]), _fmt(report.var_accurate[j]),
                        int(report.informative[j])])
    with open(out / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "p_true", *ESTIMATOR_NAMES])
        p = report.p_true if report.p_true is not None else np.full(report.l_x.shape, np.nan)
        cols = [report.estimates[k] for k in ESTIMATOR_NAMES]
        for i in range(report.l_x.size):
            w.writerow([i, _fmt(p[i]), *(_fmt(c[i]) for c in cols)])
    with open(out / "traverse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        m = report.traversals[0].shape[1] if report.traversals else 0
        w.writerow(["dim", "step", *(f"out_{k}" for k in range(m))])
        for j, rows in enumerate(report.traversals):
            for s, row in enumerate(rows):
                w.writerow([j, s, *(_fmt(v) for v in row)])
    return out
