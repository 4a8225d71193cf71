"""Sampler-quality summaries: moments, Gaussian error, ESS, NLL traces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError


@dataclass(frozen=True)
class SamplePool:
    """Retained samples (S, n) with per-sample worker, step and time."""

    samples: np.ndarray
    workers: np.ndarray | None = None
    steps: np.ndarray | None = None
    times: np.ndarray | None = None
    burn_in: int = 0
    thin: int = 1
    seed: int | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2:
            raise ContractError("samples must be a (S, n) array")
        object.__setattr__(self, "samples", samples)
        size = samples.shape[0]
        for name in ("workers", "steps", "times"):
            value = getattr(self, name)
            if value is not None and np.asarray(value).shape != (size,):
                raise ContractError(f"{name} must have one entry per sample")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def provenance(self, i: int):
        """``(seed, worker, step)`` of sample ``i``."""
        w = None if self.workers is None else int(self.workers[i])
        s = None if self.steps is None else int(self.steps[i])
        return self.seed, w, s

    def for_worker(self, worker: int) -> np.ndarray:
        if self.workers is None:
            raise ContractError("pool has no worker provenance")
        return self.samples[self.workers == worker]


def _as_samples(pool):
    if isinstance(pool, SamplePool):
        return pool.samples
    x = np.asarray(pool, dtype=float)
    return x[:, None] if x.ndim == 1 else x


@dataclass
class MomentReport:
    mean: np.ndarray
    covariance: np.ndarray | None
    count: int
    mean_error: float | None = None
    cov_rel_error: float | None = None


def moments(pool, reference_mean=None, reference_cov=None) -> MomentReport:
    """Sample mean and unbiased covariance (two-pass).

    A single sample gives a mean but raises on covariance: use
    ``moments(pool).mean`` only after checking ``len(pool) >= 2``.
    """
    x = _as_samples(pool)
    count = x.shape[0]
    if count == 0:
        raise ContractError("empty sample pool")
    mean = x.mean(axis=0)
    if count < 2:
        raise ContractError("covariance needs at least two samples", mean)
    centred = x - mean
    cov = centred.T @ centred / (count - 1)
    cov = 0.5 * (cov + cov.T)
    report = MomentReport(mean, cov, count)
    if reference_mean is not None:
        report.mean_error = float(np.linalg.norm(mean - np.asarray(reference_mean, dtype=float)))
    if reference_cov is not None:
        ref = np.asarray(reference_cov, dtype=float)
        report.cov_rel_error = float(np.linalg.norm(cov - ref) / np.linalg.norm(ref))
    return report


def sample_mean(pool) -> np.ndarray:
    x = _as_samples(pool)
    if x.shape[0] == 0:
        raise ContractError("empty sample pool")
    return x.mean(axis=0)


@dataclass
class GaussianError:
    mean_error: float
    cov_rel_error: float


def gaussian_error(pool, target) -> GaussianError:
    """``||mu_hat - mu||_2`` and ``||Sigma_hat - Sigma||_F / ||Sigma||_F``."""
    rep = moments(pool, target.mean, target.cov)
    return GaussianError(rep.mean_error, rep.cov_rel_error)


@dataclass
class EssReport:
    value: float
    per_coordinate: np.ndarray
    degenerate: bool


def ess(series) -> EssReport:
    """Effective sample size with initial-positive-sequence truncation.

    ``series`` is (n,) or (n, d); the reported value is the minimum over
    coordinates. Constant coordinates give ESS 1 and set ``degenerate``.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 10:
        raise ContractError("ess needs at least 10 points")
    values = np.empty(x.shape[1])
    degenerate = False
    for j in range(x.shape[1]):
        col = np.ascontiguousarray(x[:, j] - x[:, j].mean())
        tau, _ = kernels.ips_tau(col)
        if not np.isfinite(tau) or np.all(x[:, j] == x[0, j]):
            values[j] = 1.0
            degenerate = True
            continue
        values[j] = float(np.clip(n / tau, 1.0, n)) if tau > 0 else float(n)
    return EssReport(float(values.min()), values, degenerate)


def nll_trace(model, thetas, steps=None, eval_set=None) -> np.ndarray:
    """Mean per-example negative log likelihood at each recorded parameter.

    Returns an (m, 2) array of ``(step, nll)``.
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim == 1:
        thetas = thetas[None, :]
    if thetas.shape[1] != model.dim:
        raise ContractError("trace dimension does not match the model")
    if eval_set is not None and eval_set.size == 0:
        raise ContractError("evaluation set is empty")
    steps = np.arange(thetas.shape[0]) if steps is None else np.asarray(steps)
    values = np.array([model.mean_nll(th, eval_set) for th in thetas])
    return np.column_stack([steps, values])


def predictive_nll_curve(model, samples, times, eval_set, grid, start: float = 0.0) -> np.ndarray:
    """Held-out NLL of the running posterior predictive.

    At each ``grid`` time ``g`` the predictive is the average of
    ``model.predict_proba`` over all samples with ``start < time <= g``.
    Grid points with no sample yet give ``nan``.
    """
    samples = np.asarray(samples, dtype=float)
    times = np.asarray(times, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if samples.ndim != 2 or times.shape != (samples.shape[0],):
        raise ContractError("need (S, n) samples with one time each")
    if eval_set is None or eval_set.y is None or eval_set.size == 0:
        raise ContractError("evaluation set must be labelled and non-empty")
    if np.any(np.diff(grid) < 0):
        raise ContractError("grid must be non-decreasing")
    keep = times > start
    order = np.argsort(times[keep], kind="stable")
    samples, times = samples[keep][order], times[keep][order]
    rows = np.arange(eval_set.size)
    total = np.zeros(eval_set.size)
    count = 0
    out = np.full(grid.shape[0], np.nan)
    i = 0
    for j, g in enumerate(grid):
        while i < times.shape[0] and times[i] <= g:
            total += model.predict_proba(samples[i], eval_set.x)[rows, eval_set.y]
            count += 1
            i += 1
        if count:
            out[j] = -float(np.mean(np.log(total / count)))
    return out


def mahalanobis_fraction(distances, threshold: float) -> float:
    """Fraction of entries strictly above ``threshold``."""
    d = np.asarray(distances, dtype=float)
    return float(np.mean(d > threshold))
