"""Parallelisation schemes run as a discrete-event simulation or with threads.

Virtual time is measured in worker gradient steps. In virtual mode every run is
a pure function of its configuration and master seed: events are ordered by
``(time, priority, worker, sequence)`` and every random draw comes from a stream
derived from ``(seed, role, index)``.

Event priorities at equal times: messages to the server first, then replies to
workers, then worker compute steps. With zero latency a worker therefore sees
the server's reply before it starts its next step.
"""

from __future__ import annotations

import heapq
import math
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import SamplePool
from .dynamics import (
    CenterState,
    ChainState,
    EcConfig,
    ElasticOptConfig,
    SghmcConfig,
    ec_center_step,
    ec_deterministic_step,
    ec_worker_step,
    eamsgd_step,
    init_center,
    init_chain,
    sghmc_step,
)
from .errors import ContractError, NonFiniteError

SCHEMES = ("independent", "naive_async", "elastic")

_ROLES = {"noise": 1, "batch": 2, "delay": 3, "server": 4, "center": 5, "init": 6}

_TO_SERVER, _TO_WORKER, _STEP = 0, 1, 2
SERVER = -1


def stream(seed: int, role: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, role, index)``.

    Roles: ``noise`` (worker momentum noise and initial momentum), ``batch``
    (minibatches / synthetic gradient noise), ``delay`` (step durations),
    ``server`` (naive-scheme server chain), ``center`` (centre variable) and
    ``init``.
    """
    if role not in _ROLES:
        raise ContractError(f"unknown stream role {role!r}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(_ROLES[role], int(index))))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DelayModel:
    """Per-step compute duration of each worker, in virtual time units.

    ``base`` is a scalar or one value per worker; ``uniform`` adds independent
    jitter drawn uniformly from ``[-jitter, jitter]``.
    """

    kind: str = "constant"
    base: float | tuple = 1.0
    jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform"):
            raise ContractError(f"delay kind must be 'constant' or 'uniform', got {self.kind!r}")
        bases = np.atleast_1d(np.asarray(self.base, dtype=float))
        if np.any(bases <= 0):
            raise ContractError("delay base must be positive")
        if self.jitter < 0 or (self.kind == "uniform" and self.jitter >= bases.min()):
            raise ContractError("jitter must be >= 0 and smaller than the base delay")
        if not isinstance(self.base, (int, float)):
            object.__setattr__(self, "base", tuple(float(b) for b in bases))

    def base_for(self, worker: int) -> float:
        if isinstance(self.base, tuple):
            if worker >= len(self.base):
                raise ContractError("delay base list shorter than the number of workers")
            return self.base[worker]
        return float(self.base)

    def max_ratio(self, workers: int) -> float:
        values = [self.base_for(k) for k in range(workers)]
        return (max(values) + self.jitter) / (min(values) - self.jitter)

    def durations(self, worker: int, count: int, rng: np.random.Generator) -> np.ndarray:
        base = self.base_for(worker)
        if self.kind == "constant" or self.jitter == 0.0:
            return np.full(count, base)
        return base + self.jitter * (2.0 * rng.random(count) - 1.0)


@dataclass(frozen=True)
class ProtocolConfig:
    scheme: str = "independent"
    workers: int = 1
    comm_period: int = 1
    wait_count: int = 1
    delay: DelayModel = field(default_factory=DelayModel)
    latency: float = 0.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractError(f"scheme must be one of {SCHEMES}")
        if self.workers < 1:
            raise ContractError("workers must be >= 1")
        if self.comm_period < 1:
            raise ContractError("comm_period must be >= 1")
        if not (1 <= self.wait_count <= self.workers):
            raise ContractError("wait_count must lie in [1, workers]")
        if self.latency < 0:
            raise ContractError("latency must be >= 0")


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    worker: int
    step: int
    virtual_time: float
    metric: str
    value: float


@dataclass
class RunResult:
    """Samples with ``(seed, worker, step)`` provenance plus counters.

    Samples are sorted by ``(worker, step)``; the naive scheme's server chain
    uses worker id ``-1``.
    """

    scheme: str
    seed: int
    mode: str
    samples: np.ndarray
    sample_worker: np.ndarray
    sample_step: np.ndarray
    sample_time: np.ndarray
    counters: dict
    staleness: np.ndarray
    final: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def pool(self, burn_in: int = 0, workers=None) -> SamplePool:
        keep = self.sample_step > burn_in
        if workers is not None:
            keep &= np.isin(self.sample_worker, list(workers))
        return SamplePool(
            self.samples[keep], self.sample_worker[keep], self.sample_step[keep],
            self.sample_time[keep], burn_in=burn_in, seed=self.seed,
        )

    def worker_trace(self, worker: int):
        keep = self.sample_worker == worker
        return self.sample_step[keep], self.sample_time[keep], self.samples[keep]

    def trace_records(self, metrics: dict | None = None):
        """Yield :class:`TraceRecord` rows: one per sample and metric."""
        metrics = metrics or {}
        for i in range(self.samples.shape[0]):
            w, s, t = int(self.sample_worker[i]), int(self.sample_step[i]), float(self.sample_time[i])
            for name, fn in metrics.items():
                yield TraceRecord(w, s, t, name, float(fn(self.samples[i])))

    def identical_to(self, other: "RunResult") -> bool:
        return (
            np.array_equal(self.samples, other.samples)
            and np.array_equal(self.sample_worker, other.sample_worker)
            and np.array_equal(self.sample_step, other.sample_step)
        )


class _Recorder:
    def __init__(self, burn_in: int, thin: int):
        if thin < 1 or burn_in < 0:
            raise ContractError("thin must be >= 1 and burn_in >= 0")
        self.burn_in, self.thin = burn_in, thin
        self.thetas, self.workers, self.steps, self.times = [], [], [], []

    def add(self, worker, step, t, theta):
        if step > self.burn_in and step % self.thin == 0:
            self.thetas.append(theta)
            self.workers.append(worker)
            self.steps.append(step)
            self.times.append(t)

    def arrays(self, dim):
        if not self.thetas:
            return np.empty((0, dim)), np.empty(0, int), np.empty(0, int), np.empty(0)
        workers = np.asarray(self.workers, dtype=np.int64)
        steps = np.asarray(self.steps, dtype=np.int64)
        order = np.lexsort((steps, workers))
        return (
            np.asarray(self.thetas)[order], workers[order], steps[order],
            np.asarray(self.times, dtype=float)[order],
        )


def _finalize(scheme, seed, mode, rec, dim, counters, staleness, final, extras=None):
    samples, workers, steps, times = rec.arrays(dim)
    return RunResult(
        scheme, int(seed), mode, samples, workers, steps, times, counters,
        np.asarray(staleness, dtype=np.int64), final, extras or {},
    )


def _grad(model, theta, rng, step, worker):
    grad = model.minibatch_grad(theta, rng)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient at step {step} (worker {worker})", step=step, worker=worker)
    return grad


def _check_state(state, step, worker):
    if not np.isfinite(state.theta.sum() + state.momentum.sum()):
        raise NonFiniteError(f"non-finite state at step {step} (worker {worker})", step=step, worker=worker)


def _ordered_mean(grads):
    total = grads[0].copy()
    for g in grads[1:]:
        total += g
    return total / len(grads)


def _initial_theta(model, init, seed):
    if init is not None:
        theta = np.array(init, dtype=float)
        if theta.shape != (model.dim,):
            raise ContractError(f"init has shape {theta.shape}, model dim is {model.dim}")
        return theta
    if hasattr(model, "init_theta"):
        return model.init_theta(stream(seed, "init"))
    return np.zeros(model.dim)


# ---------------------------------------------------------------------------
# event queue
# ---------------------------------------------------------------------------


class EventQueue:
    """Min-heap of ``(time, priority, worker, seq)`` with deterministic ties."""

    def __init__(self):
        self._heap = []
        self._seq = 0

    def push(self, t, priority, worker, payload=None):
        heapq.heappush(self._heap, (t, priority, worker, self._seq, payload))
        self._seq += 1

    def pop(self):
        t, priority, worker, _, payload = heapq.heappop(self._heap)
        return t, priority, worker, payload

    def __bool__(self):
        return bool(self._heap)


def schedule_virtual(workers: int, steps: int, delay: DelayModel, seed: int):
    """Completion order of ``steps`` compute steps on each of ``workers`` workers.

    Returns a list of ``(time, worker, step)`` with steps numbered from 1.
    """
    durations = [delay.durations(k, steps, stream(seed, "delay", k)) for k in range(workers)]
    q = EventQueue()
    clocks = [0.0] * workers
    for k in range(workers):
        clocks[k] = durations[k][0]
        q.push(clocks[k], _STEP, k, 1)
    order = []
    while q:
        t, _, k, step = q.pop()
        order.append((t, k, step))
        if step < steps:
            clocks[k] = t + durations[k][step]
            q.push(clocks[k], _STEP, k, step + 1)
    return order


# ---------------------------------------------------------------------------
# scheme II: independent chains
# ---------------------------------------------------------------------------


def run_independent(model, cfg: SghmcConfig, workers: int, steps: int, seed: int, *, init=None,
                    burn_in: int = 0, thin: int = 1, delay: DelayModel | None = None,
                    mode: str = "virtual") -> RunResult:
    """``workers`` uncoupled SGHMC chains, one noise and batch stream each."""
    if workers < 1 or steps < 1:
        raise ContractError("workers and steps must be positive")
    delay = delay or DelayModel()
    theta0 = _initial_theta(model, init, seed)
    if mode == "threads":
        return _independent_threads(model, cfg, workers, steps, seed, theta0, burn_in, thin, delay)
    _check_mode(mode)
    rec = _Recorder(burn_in, thin)
    noise = [stream(seed, "noise", k) for k in range(workers)]
    batch = [stream(seed, "batch", k) for k in range(workers)]
    states = [init_chain(theta0, cfg, noise[k]) for k in range(workers)]
    durations = [delay.durations(k, steps, stream(seed, "delay", k)) for k in range(workers)]
    q = EventQueue()
    for k in range(workers):
        q.push(0.0, _STEP, k)
    while q:
        t, _, k, _ = q.pop()
        st = states[k]
        grad = _grad(model, st.theta, batch[k], st.step + 1, k)
        st = sghmc_step(st, grad, cfg, noise[k])
        _check_state(st, st.step, k)
        states[k] = st
        t_end = t + durations[k][st.step - 1]
        rec.add(k, st.step, t_end, st.theta)
        if st.step < steps:
            q.push(t_end, _STEP, k)
    counters = {"worker_steps": workers * steps, "server_steps": 0, "messages": 0, "round_trips": 0,
                "bytes": 0}
    final = {"thetas": np.array([s.theta for s in states])}
    return _finalize("independent", seed, mode, rec, model.dim, counters, [], final)


# ---------------------------------------------------------------------------
# scheme I: naive stale-gradient parameter server
# ---------------------------------------------------------------------------


def run_naive_async(model, cfg: SghmcConfig, protocol: ProtocolConfig, steps: int, seed: int, *,
                    init=None, burn_in: int = 0, thin: int = 1, mode: str = "virtual") -> RunResult:
    """Workers evaluate gradients at stale parameter copies; the server averages.

    Each worker computes ``steps`` gradients. The server applies one SGHMC step
    per ``wait_count`` reports (arrival order, reports left over carry into the
    next batch) and broadcasts its parameters every ``comm_period`` updates.
    ``burn_in`` and ``thin`` refer to server updates.
    """
    if protocol.scheme != "naive_async":
        raise ContractError("protocol.scheme must be 'naive_async'")
    theta0 = _initial_theta(model, init, seed)
    if mode == "threads":
        return _naive_threads(model, cfg, protocol, steps, seed, theta0, burn_in, thin)
    _check_mode(mode)
    K, s, O = protocol.workers, protocol.comm_period, protocol.wait_count
    lat = protocol.latency
    rec = _Recorder(burn_in, thin)
    server_rng = stream(seed, "server")
    server = init_chain(theta0, cfg, server_rng)
    batch = [stream(seed, "batch", k) for k in range(K)]
    durations = [protocol.delay.durations(k, steps, stream(seed, "delay", k)) for k in range(K)]
    cached = [theta0.copy() for _ in range(K)]
    cached_ver = [0] * K
    done = [0] * K
    pending = []
    staleness = []
    applied_lag = []
    messages = 0
    q = EventQueue()
    for k in range(K):
        q.push(0.0, _STEP, k)
    while q:
        t, kind, k, payload = q.pop()
        if kind == _STEP:
            staleness.append(server.step - cached_ver[k])
            grad = _grad(model, cached[k], batch[k], done[k] + 1, k)
            done[k] += 1
            t_end = t + durations[k][done[k] - 1]
            q.push(t_end + lat, _TO_SERVER, k, (grad, cached_ver[k]))
            messages += 1
            if done[k] < steps:
                q.push(t_end, _STEP, k)
        elif kind == _TO_SERVER:
            pending.append(payload)
            while len(pending) >= O:
                batch_reports, pending = pending[:O], pending[O:]
                grad = _ordered_mean([g for g, _ in batch_reports])
                for _, ver in batch_reports:
                    applied_lag.append(server.step - ver)
                server = sghmc_step(server, grad, cfg, server_rng)
                _check_state(server, server.step, SERVER)
                rec.add(SERVER, server.step, t, server.theta)
                if server.step % s == 0:
                    for j in range(K):
                        q.push(t + lat, _TO_WORKER, j, (server.theta, server.step))
                    messages += K
        else:
            cached[k], cached_ver[k] = payload
    counters = {"worker_steps": K * steps, "server_steps": server.step, "messages": messages,
                "round_trips": 0, "bytes": messages * model.dim * 8, "dropped_reports": len(pending)}
    final = {"theta": server.theta, "momentum": server.momentum}
    extras = {"gradient_lag": np.asarray(applied_lag, dtype=np.int64)}
    return _finalize("naive_async", seed, mode, rec, model.dim, counters, staleness, final, extras)


# ---------------------------------------------------------------------------
# scheme IIa: elastic coupling through a centre server
# ---------------------------------------------------------------------------


def run_elastic(model, ec: EcConfig, protocol: ProtocolConfig, steps: int, seed: int, *, init=None,
                burn_in: int = 0, thin: int = 1, mode: str = "virtual") -> RunResult:
    """EC-SGHMC workers coupled through a centre variable held by a server.

    Every ``comm_period`` local steps a worker sends its position and receives
    the current centre. The centre runs on the worker clock: on each message
    the server first advances ``(c, r)`` by one step per whole time unit elapsed
    since its last advance, using the last reported worker positions, and then
    records the new position. With ``comm_period = 1`` and equal constant delays
    this reproduces the synchronous update exactly.
    """
    if protocol.scheme != "elastic":
        raise ContractError("protocol.scheme must be 'elastic'")
    if ec.workers != protocol.workers:
        raise ContractError("EcConfig.workers must equal protocol.workers")
    theta0 = _initial_theta(model, init, seed)
    if mode == "threads":
        return _elastic_threads(model, ec, protocol, steps, seed, theta0, burn_in, thin)
    _check_mode(mode)
    K, s, lat = protocol.workers, protocol.comm_period, protocol.latency
    rec = _Recorder(burn_in, thin)
    noise = [stream(seed, "noise", k) for k in range(K)]
    batch = [stream(seed, "batch", k) for k in range(K)]
    center_rng = stream(seed, "center")
    states = [init_chain(theta0, ec.base, noise[k]) for k in range(K)]
    center = init_center(theta0, ec.base, center_rng)
    last_theta = np.tile(theta0, (K, 1))
    c_est = [center.center for _ in range(K)]
    c_ver = [0] * K
    durations = [protocol.delay.durations(k, steps, stream(seed, "delay", k)) for k in range(K)]
    staleness = []
    round_trips = 0
    q = EventQueue()
    for k in range(K):
        q.push(0.0, _STEP, k)
    while q:
        t, kind, k, payload = q.pop()
        if kind == _STEP:
            staleness.append(int(math.floor(t)) - c_ver[k])
            st = states[k]
            grad = _grad(model, st.theta, batch[k], st.step + 1, k)
            st = ec_worker_step(st, grad, c_est[k], ec, noise[k])
            _check_state(st, st.step, k)
            states[k] = st
            t_end = t + durations[k][st.step - 1]
            rec.add(k, st.step, t_end, st.theta)
            if st.step % s == 0:
                q.push(t_end + lat, _TO_SERVER, k, st.theta)
            if st.step < steps:
                q.push(t_end, _STEP, k)
        elif kind == _TO_SERVER:
            target = int(math.floor(t))
            while center.version < target:
                center = ec_center_step(center, last_theta, ec, center_rng)
                _check_state_center(center)
            last_theta[k] = payload
            round_trips += 1
            q.push(t + lat, _TO_WORKER, k, (center.center, center.version))
        else:
            c_est[k], c_ver[k] = payload
    counters = {"worker_steps": K * steps, "server_steps": center.version, "messages": 2 * round_trips,
                "round_trips": round_trips, "bytes": 2 * round_trips * model.dim * 8}
    final = {"thetas": np.array([st.theta for st in states]), "center": center.center,
             "center_momentum": center.center_momentum}
    return _finalize("elastic", seed, mode, rec, model.dim, counters, staleness, final)


def _check_state_center(center):
    if not np.isfinite(center.center.sum() + center.center_momentum.sum()):
        raise NonFiniteError(f"non-finite centre at version {center.version}", step=center.version,
                             worker=SERVER)


def _check_mode(mode):
    if mode not in ("virtual", "threads"):
        raise ContractError("mode must be 'virtual' or 'threads'")


# ---------------------------------------------------------------------------
# noise-free elastic optimisers
# ---------------------------------------------------------------------------


def run_optimizer_arm(model, variant: str, cfg: ElasticOptConfig, workers: int, steps: int, seed: int,
                      *, comm_period: int = 1, init=None, init_spread: float = 1.0,
                      threshold: float = 1e-6, thin: int = 1) -> RunResult:
    """Lock-step run of the noise-free elastic dynamics with exact gradients.

    ``variant`` is ``"ec_momentum"`` (spring acts through momentum, centre has momentum)
    or ``"eamsgd"`` (spring acts on positions, centre without momentum). Workers
    start at ``init + init_spread * Normal(0, I)`` and the centre at their mean.
    Communication happens every ``comm_period`` steps: EAMSGD drops the
    coupling terms in between, the momentum variant uses the cached centre and
    cached worker positions. ``extras`` holds the per-step worker losses and
    the first step at which every worker has ``U < threshold``.
    """
    if variant not in ("ec_momentum", "eamsgd"):
        raise ContractError("variant must be 'ec_momentum' or 'eamsgd'")
    if workers < 1 or steps < 1 or comm_period < 1:
        raise ContractError("workers, steps and comm_period must be positive")
    rng = stream(seed, "init")
    base = np.zeros(model.dim) if init is None else np.asarray(init, dtype=float)
    thetas = base + init_spread * rng.standard_normal((workers, model.dim))
    vs = np.zeros_like(thetas)
    center = thetas.mean(axis=0)
    h = np.zeros(model.dim)
    c_cached = center.copy()
    theta_cached = thetas.copy()
    rec = _Recorder(0, thin)
    losses = np.empty((steps + 1, workers))
    losses[0] = [model.potential(th) for th in thetas]
    hit = None
    round_trips = 0
    for t in range(steps):
        grads = np.array([model.grad_potential(th) for th in thetas])
        communicate = t % comm_period == 0
        if communicate:
            round_trips += workers
        if variant == "eamsgd":
            thetas, vs, center = eamsgd_step(thetas, vs, center, grads, cfg, couple=communicate)
        elif comm_period == 1:
            thetas, vs, center, h = ec_deterministic_step(thetas, vs, center, h, grads, cfg)
        else:
            if communicate:
                c_cached, theta_cached = center.copy(), thetas.copy()
            new_t, new_v, _, _ = ec_deterministic_step(thetas, vs, c_cached, h, grads, cfg)
            _, _, center, h = ec_deterministic_step(theta_cached, np.zeros_like(vs), center, h,
                                                    np.zeros_like(grads), cfg)
            thetas, vs = new_t, new_v
        if not np.all(np.isfinite(thetas)):
            raise NonFiniteError(f"optimizer diverged at step {t + 1}", step=t + 1)
        losses[t + 1] = [model.potential(th) for th in thetas]
        for k in range(workers):
            rec.add(k, t + 1, float(t + 1), thetas[k])
        if hit is None and losses[t + 1].max() < threshold:
            hit = t + 1
    counters = {"worker_steps": workers * steps, "server_steps": steps, "messages": 2 * round_trips,
                "round_trips": round_trips, "bytes": 2 * round_trips * model.dim * 8}
    final = {"thetas": thetas, "center": center}
    extras = {"losses": losses, "steps_to_threshold": hit, "threshold": threshold, "variant": variant}
    return _finalize(variant, seed, "virtual", rec, model.dim, counters, [], final, extras)


# ---------------------------------------------------------------------------
# real threads
# ---------------------------------------------------------------------------


def thread_cap(workers: int) -> int:
    raw = os.environ.get("ECMCMC_THREADS")
    if not raw:
        return workers
    try:
        cap = int(raw)
    except ValueError:
        raise ContractError(f"ECMCMC_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, workers))


_STOP = object()


def _latest(inbox, current):
    while True:
        try:
            current = inbox.get_nowait()
        except queue.Empty:
            return current


def _independent_threads(model, cfg, workers, steps, seed, theta0, burn_in, thin, delay):
    recs = [_Recorder(burn_in, thin) for _ in range(workers)]
    start = time.perf_counter()

    def worker(k):
        noise, batch = stream(seed, "noise", k), stream(seed, "batch", k)
        st = init_chain(theta0, cfg, noise)
        for _ in range(steps):
            st = sghmc_step(st, _grad(model, st.theta, batch, st.step + 1, k), cfg, noise)
            _check_state(st, st.step, k)
            recs[k].add(k, st.step, time.perf_counter() - start, st.theta)
        return st.theta

    with ThreadPoolExecutor(max_workers=thread_cap(workers)) as pool:
        finals = list(pool.map(worker, range(workers)))
    rec = _merge(recs, burn_in, thin)
    counters = {"worker_steps": workers * steps, "server_steps": 0, "messages": 0, "round_trips": 0, "bytes": 0}
    return _finalize("independent", seed, "threads", rec, model.dim, counters, [],
                     {"thetas": np.array(finals)})


def _merge(recs, burn_in, thin):
    out = _Recorder(burn_in, thin)
    for r in recs:
        out.thetas += r.thetas
        out.workers += r.workers
        out.steps += r.steps
        out.times += r.times
    return out


def _elastic_threads(model, ec, protocol, steps, seed, theta0, burn_in, thin):
    K, s = protocol.workers, protocol.comm_period
    recs = [_Recorder(burn_in, thin) for _ in range(K)]
    inboxes = [queue.Queue() for _ in range(K)]
    to_server = queue.Queue()
    center_rng = stream(seed, "center")
    center0 = init_center(theta0, ec.base, center_rng)
    stats = {"round_trips": 0, "server_steps": 0}
    staleness = []
    errors = []
    start = time.perf_counter()

    def server():
        center = center0
        last = np.tile(theta0, (K, 1))
        clock = 0
        finished = 0
        while finished < K:
            msg = to_server.get()
            if msg is _STOP:
                finished += 1
                continue
            k, theta, local_step = msg
            clock = max(clock, local_step)
            try:
                while center.version < clock:
                    center = ec_center_step(center, last, ec, center_rng)
                    _check_state_center(center)
            except NonFiniteError as exc:
                errors.append(exc)
            last[k] = theta
            stats["round_trips"] += 1
            inboxes[k].put((center.center, center.version))
        stats["server_steps"] = center.version

    def worker(k):
        noise, batch = stream(seed, "noise", k), stream(seed, "batch", k)
        st = init_chain(theta0, ec.base, noise)
        est = (center0.center, 0)
        try:
            for _ in range(steps):
                est = _latest(inboxes[k], est)
                staleness.append(st.step - est[1])
                st = ec_worker_step(st, _grad(model, st.theta, batch, st.step + 1, k), est[0], ec, noise)
                _check_state(st, st.step, k)
                recs[k].add(k, st.step, time.perf_counter() - start, st.theta)
                if st.step % s == 0:
                    to_server.put((k, st.theta, st.step))
        except Exception as exc:  # surfaced after join
            errors.append(exc)
        finally:
            to_server.put(_STOP)
        return st.theta

    srv = threading.Thread(target=server, daemon=True)
    srv.start()
    with ThreadPoolExecutor(max_workers=thread_cap(K)) as pool:
        finals = list(pool.map(worker, range(K)))
    srv.join()
    if errors:
        raise errors[0]
    rec = _merge(recs, burn_in, thin)
    rt = stats["round_trips"]
    counters = {"worker_steps": K * steps, "server_steps": stats["server_steps"], "messages": 2 * rt,
                "round_trips": rt, "bytes": 2 * rt * model.dim * 8}
    return _finalize("elastic", seed, "threads", rec, model.dim, counters, staleness,
                     {"thetas": np.array(finals)})


def _naive_threads(model, cfg, protocol, steps, seed, theta0, burn_in, thin):
    K, s, O = protocol.workers, protocol.comm_period, protocol.wait_count
    rec = _Recorder(burn_in, thin)
    inboxes = [queue.Queue() for _ in range(K)]
    to_server = queue.Queue()
    server_rng = stream(seed, "server")
    state0 = init_chain(theta0, cfg, server_rng)
    stats = {"messages": 0, "server_steps": 0}
    staleness = []
    errors = []
    start = time.perf_counter()

    def server():
        st = state0
        pending = []
        finished = 0
        while finished < K:
            msg = to_server.get()
            if msg is _STOP:
                finished += 1
                continue
            pending.append(msg)
            stats["messages"] += 1
            while len(pending) >= O and not errors:
                reports, pending = pending[:O], pending[O:]
                for _, ver in reports:
                    staleness.append(st.step - ver)
                try:
                    st = sghmc_step(st, _ordered_mean([g for g, _ in reports]), cfg, server_rng)
                    _check_state(st, st.step, SERVER)
                except NonFiniteError as exc:
                    errors.append(exc)
                    break
                rec.add(SERVER, st.step, time.perf_counter() - start, st.theta)
                if st.step % s == 0:
                    for box in inboxes:
                        box.put((st.theta, st.step))
                    stats["messages"] += K
        stats["server_steps"] = st.step
        stats["final"] = st

    def worker(k):
        batch = stream(seed, "batch", k)
        view = (theta0, 0)
        try:
            for i in range(steps):
                view = _latest(inboxes[k], view)
                to_server.put((_grad(model, view[0], batch, i + 1, k), view[1]))
        except Exception as exc:
            errors.append(exc)
        finally:
            to_server.put(_STOP)

    srv = threading.Thread(target=server, daemon=True)
    srv.start()
    with ThreadPoolExecutor(max_workers=thread_cap(K)) as pool:
        list(pool.map(worker, range(K)))
    srv.join()
    if errors:
        raise errors[0]
    counters = {"worker_steps": K * steps, "server_steps": stats["server_steps"], "messages": stats["messages"],
                "round_trips": 0, "bytes": stats["messages"] * model.dim * 8}
    final = {"theta": stats["final"].theta, "momentum": stats["final"].momentum}
    return _finalize("naive_async", seed, "threads", rec, model.dim, counters, staleness, final)
