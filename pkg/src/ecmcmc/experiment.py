"""Turn validated configs into models, runs, trace rows and aligned series."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diagnostics
from .config import ExperimentConfig, ModelSpec
from .dynamics import EcConfig, ElasticOptConfig, SghmcConfig
from .harness import (
    DelayModel,
    ProtocolConfig,
    RunResult,
    run_elastic,
    run_independent,
    run_naive_async,
    run_optimizer_arm,
)
from .model import ClassifierPosterior, GaussianTarget, MinibatchSpec, load_csv, make_blobs


@dataclass
class Built:
    model: object
    eval_set: object = None


def build_model(spec: ModelSpec) -> Built:
    if spec.kind in ("gaussian", "quadratic"):
        mean = np.zeros(spec.dim) if spec.mean is None else np.asarray(spec.mean, dtype=float)
        return Built(GaussianTarget(mean, spec.cov, spec.grad_noise))
    data = spec.data
    n_features, n_classes = spec.layers[0], spec.layers[-1]
    if data.train_csv:
        train = load_csv(data.train_csv)
    else:
        train = make_blobs(data.n_train, n_features, n_classes, data.separation, seed=data.seed)
    if data.eval_csv:
        held_out = load_csv(data.eval_csv)
    else:
        held_out = make_blobs(data.n_eval, n_features, n_classes, data.separation,
                              seed=data.seed, split=1)
    model = ClassifierPosterior(train, spec.layers, spec.prior_precision,
                                MinibatchSpec(spec.batch_size), spec.activation)
    return Built(model, held_out)


def _sghmc(cfg: ExperimentConfig) -> SghmcConfig:
    s = cfg.sampler
    return SghmcConfig(s.epsilon, mass=_vec(s.mass), grad_noise=_vec(s.V),
                       noise_scaling=s.resolved_scaling)


def _vec(value):
    return np.asarray(value, dtype=float) if isinstance(value, list) else float(value)


def _protocol(cfg: ExperimentConfig) -> ProtocolConfig:
    p = cfg.protocol
    base = tuple(p.delay.base) if isinstance(p.delay.base, list) else p.delay.base
    delay = DelayModel(p.delay.kind, base, p.delay.jitter)
    return ProtocolConfig(p.scheme, p.workers, p.comm_period, p.wait_count, delay, p.latency)


def execute(cfg: ExperimentConfig, built: Built, mode: str = "virtual") -> RunResult:
    """Run the configured arm. Burn-in is applied later, in summaries."""
    s, p, r = cfg.sampler, cfg.protocol, cfg.run
    model = built.model
    if s.kind in ("ec_momentum", "eamsgd"):
        opt = ElasticOptConfig(s.epsilon, s.alpha, s.xi)
        return run_optimizer_arm(model, s.kind, opt, p.workers, r.steps, r.seed,
                                 comm_period=p.comm_period, init=r.init,
                                 init_spread=r.init_spread, threshold=r.threshold, thin=r.thin)
    base = _sghmc(cfg)
    if p.scheme == "independent":
        delay = _protocol(cfg).delay
        return run_independent(model, base, p.workers, r.steps, r.seed, init=r.init,
                               thin=r.thin, delay=delay, mode=mode)
    if p.scheme == "naive_async":
        return run_naive_async(model, base, _protocol(cfg), r.steps, r.seed, init=r.init,
                               thin=r.thin, mode=mode)
    ec = EcConfig(s.alpha, base, center_noise=_vec(s.C), workers=p.workers,
                  noise_scaling=s.resolved_scaling,
                  worker_noise_includes_center=s.worker_noise_includes_center)
    return run_elastic(model, ec, _protocol(cfg), r.steps, r.seed, init=r.init, thin=r.thin,
                       mode=mode)


def sample_metrics(cfg: ExperimentConfig, built: Built) -> dict:
    """Per-sample scalar metrics written to the trace."""
    model = built.model
    if cfg.sampler.kind in ("ec_momentum", "eamsgd"):
        return {"loss": model.potential}
    if isinstance(model, GaussianTarget):
        return {"potential": model.potential, "mahalanobis": model.mahalanobis}
    return {"nll": lambda th: model.mean_nll(th, built.eval_set)}


def summarize(cfg: ExperimentConfig, built: Built, result: RunResult) -> dict:
    model = built.model
    out = {
        "scheme": result.scheme,
        "seed": result.seed,
        "mode": result.mode,
        "counters": {k: _plain(v) for k, v in result.counters.items()},
        "retained_samples": int(result.samples.shape[0]),
    }
    if result.staleness.size:
        out["staleness"] = {"max": int(result.staleness.max()),
                            "mean": float(result.staleness.mean())}
    if cfg.sampler.kind in ("ec_momentum", "eamsgd"):
        losses = result.extras["losses"]
        out["steps_to_threshold"] = result.extras["steps_to_threshold"]
        out["threshold"] = result.extras["threshold"]
        out["final_max_loss"] = float(losses[-1].max())
        return out
    pool = result.pool(cfg.run.burn_in)
    out["pooled_samples"] = len(pool)
    if len(pool) < 2:
        return out
    if isinstance(model, GaussianTarget):
        err = diagnostics.gaussian_error(pool, model)
        rep = diagnostics.moments(pool)
        out["mean"] = rep.mean.tolist()
        out["covariance"] = rep.covariance.tolist()
        out["mean_error"] = err.mean_error
        out["cov_rel_error"] = err.cov_rel_error
    else:
        grid = np.array([np.inf])
        nll = diagnostics.predictive_nll_curve(model, pool.samples, pool.times, built.eval_set, grid,
                                               start=-np.inf)
        out["predictive_nll"] = float(nll[-1])
    workers = np.unique(pool.workers)
    per = []
    for w in workers:
        chain = pool.for_worker(w)
        if chain.shape[0] >= 10:
            per.append(diagnostics.ess(chain).value)
    if per:
        out["ess_min_over_workers"] = float(min(per))
    return out


def _plain(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def series(cfg: ExperimentConfig, built: Built, result: RunResult, grid: np.ndarray,
           burn_in_time: float) -> dict:
    """Arm-level series on a shared virtual-time grid.

    Classifier arms give the held-out NLL of the running posterior predictive;
    Gaussian arms the running moment errors; optimizer arms the worst worker
    loss (time equals the step count there).
    """
    model = built.model
    if cfg.sampler.kind in ("ec_momentum", "eamsgd"):
        losses = result.extras["losses"].max(axis=1)
        idx = np.clip(np.floor(grid).astype(int), 0, losses.shape[0] - 1)
        return {"loss": losses[idx]}
    if isinstance(model, ClassifierPosterior):
        return {"predictive_nll": diagnostics.predictive_nll_curve(
            model, result.samples, result.sample_time, built.eval_set, grid, burn_in_time)}
    return _moment_series(model, result, grid, burn_in_time)


def _moment_series(model, result, grid, burn_in_time):
    keep = result.sample_time > burn_in_time
    x = result.samples[keep]
    t = result.sample_time[keep]
    order = np.argsort(t, kind="stable")
    x, t = x[order], t[order]
    counts = np.searchsorted(t, grid, side="right")
    mean_err = np.full(grid.shape[0], np.nan)
    cov_err = np.full(grid.shape[0], np.nan)
    for j, c in enumerate(counts):
        if c >= 2:
            rep = diagnostics.moments(x[:c], model.mean, model.cov)
            mean_err[j], cov_err[j] = rep.mean_error, rep.cov_rel_error
    return {"mean_error": mean_err, "cov_rel_error": cov_err}


def first_hit(grid: np.ndarray, values: np.ndarray, threshold: float) -> float:
    """First grid time with ``values <= threshold`` (``inf`` if never)."""
    ok = np.nonzero(values <= threshold)[0]
    return float(grid[ok[0]]) if ok.size else float("inf")

