"""Single-step sampler and optimizer kernels.

All steps are pure: they take a state plus a gradient and return a new state.
Randomness comes from a caller-owned ``numpy.random.Generator``; each step draws
exactly one standard-normal vector per state vector it perturbs, in coordinate
order. Passing ``noise=`` instead of ``rng`` supplies that vector explicitly.

Matrices ``M`` (mass), ``V`` (gradient-noise friction) and ``C`` (centre
noise) are diagonal and given as scalars or length-``n`` vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import ContractError, NonFiniteError

NOISE_SCALINGS = ("linear", "quadratic")


def noise_scale(epsilon: float, scaling: str) -> float:
    """Variance multiplier of the injected noise: ``2 eps`` or ``2 eps^2``."""
    if scaling == "linear":
        return 2.0 * epsilon
    if scaling == "quadratic":
        return 2.0 * epsilon * epsilon
    raise ContractError(f"noise_scaling must be one of {NOISE_SCALINGS}, got {scaling!r}")


def _diag(value, name, allow_zero=True):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ContractError(f"{name} must be a scalar or a vector (diagonal)")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} must be finite")
    if allow_zero and np.any(arr < 0):
        raise ContractError(f"{name} entries must be >= 0")
    if not allow_zero and np.any(arr <= 0):
        raise ContractError(f"{name} entries must be > 0")
    return arr


def _broadcast(arr, n, name):
    if arr.shape[0] == n:
        return arr
    if arr.shape[0] == 1:
        return np.full(n, arr[0])
    raise ContractError(f"{name} has length {arr.shape[0]}, expected {n}")


def _draw(rng, noise, n):
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (n,):
            raise ContractError(f"noise has shape {noise.shape}, expected ({n},)")
        return noise
    if rng is None:
        raise ContractError("either rng or noise must be given")
    return rng.standard_normal(n)


def _check_grad(grad, n):
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (n,):
        raise ContractError(f"gradient has shape {grad.shape}, expected ({n},)")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    return grad


@dataclass(frozen=True)
class _Resolved:
    minv: np.ndarray
    fric: np.ndarray
    std: np.ndarray


# ---------------------------------------------------------------------------
# configs and states
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SghmcConfig:
    """Step size, diagonal mass ``M`` and gradient-noise matrix ``V``.

    ``V`` sets the friction. The injected noise uses ``injected_noise`` when
    given and ``V`` otherwise, with variance ``noise_scale(epsilon) * noise``.
    """

    epsilon: float
    mass: object = 1.0
    grad_noise: object = 1.0
    noise_scaling: str = "linear"
    injected_noise: object = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ContractError("epsilon must be a positive finite number")
        object.__setattr__(self, "mass", _diag(self.mass, "mass", allow_zero=False))
        object.__setattr__(self, "grad_noise", _diag(self.grad_noise, "grad_noise"))
        if self.injected_noise is not None:
            object.__setattr__(self, "injected_noise", _diag(self.injected_noise, "injected_noise"))
        noise_scale(self.epsilon, self.noise_scaling)

    def resolve(self, n: int) -> _Resolved:
        hit = self._cache.get(n)
        if hit is None:
            mass = _broadcast(self.mass, n, "mass")
            fric = _broadcast(self.grad_noise, n, "grad_noise")
            inj = fric if self.injected_noise is None else _broadcast(self.injected_noise, n, "injected_noise")
            std = np.sqrt(noise_scale(self.epsilon, self.noise_scaling) * inj)
            hit = _Resolved(1.0 / mass, fric, std)
            self._cache[n] = hit
        return hit


@dataclass(frozen=True, eq=False)
class EcConfig:
    """Elastic-coupling parameters on top of an :class:`SghmcConfig`.

    Defaults follow the printed discretisation: quadratic noise scaling and a
    worker noise of ``V + C``. ``worker_noise_includes_center=False`` with
    ``noise_scaling="linear"`` gives the dynamics implied by the diffusion
    ``diag(0, V, 0, C)``, which is the variant with the correct stationary
    moments on Gaussian targets.
    """

    alpha: float
    base: SghmcConfig
    center_noise: object = 1.0
    workers: int = 1
    noise_scaling: str = "quadratic"
    worker_noise_includes_center: bool = True
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ContractError("alpha must be >= 0")
        if int(self.workers) != self.workers or self.workers < 1:
            raise ContractError("workers must be a positive integer")
        object.__setattr__(self, "center_noise", _diag(self.center_noise, "center_noise"))
        noise_scale(self.base.epsilon, self.noise_scaling)

    @property
    def epsilon(self) -> float:
        return self.base.epsilon

    def worker_noise(self, n: int) -> np.ndarray:
        v = _broadcast(self.base.grad_noise, n, "grad_noise")
        if self.worker_noise_includes_center:
            return v + _broadcast(self.center_noise, n, "center_noise")
        return v

    def resolve_worker(self, n: int) -> _Resolved:
        key = ("w", n)
        hit = self._cache.get(key)
        if hit is None:
            base = self.base.resolve(n)
            std = np.sqrt(noise_scale(self.epsilon, self.noise_scaling) * self.worker_noise(n))
            hit = _Resolved(base.minv, base.fric, std)
            self._cache[key] = hit
        return hit

    def resolve_center(self, n: int) -> _Resolved:
        key = ("c", n)
        hit = self._cache.get(key)
        if hit is None:
            c = _broadcast(self.center_noise, n, "center_noise")
            std = np.sqrt(noise_scale(self.epsilon, self.noise_scaling) * c)
            hit = _Resolved(self.base.resolve(n).minv, c, std)
            self._cache[key] = hit
        return hit

    def decoupled_sghmc(self) -> SghmcConfig:
        """SGHMC config whose kernel equals a worker step at ``alpha = 0``."""
        injected = self.base.grad_noise
        if self.worker_noise_includes_center:
            n = max(self.base.grad_noise.shape[0], self.center_noise.shape[0])
            injected = self.worker_noise(n)
        return SghmcConfig(
            self.base.epsilon,
            mass=self.base.mass,
            grad_noise=self.base.grad_noise,
            noise_scaling=self.noise_scaling,
            injected_noise=injected,
        )


@dataclass(frozen=True)
class ChainState:
    theta: np.ndarray
    momentum: np.ndarray
    step: int = 0

    def __post_init__(self):
        if self.theta.shape != self.momentum.shape or self.theta.ndim != 1:
            raise ContractError("theta and momentum must be equal-length vectors")


@dataclass(frozen=True)
class CenterState:
    center: np.ndarray
    center_momentum: np.ndarray
    version: int = 0

    def __post_init__(self):
        if self.center.shape != self.center_momentum.shape or self.center.ndim != 1:
            raise ContractError("center and its momentum must be equal-length vectors")


def init_momentum(mass, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``p ~ Normal(0, M)``."""
    mass = _broadcast(_diag(mass, "mass", allow_zero=False), n, "mass")
    return np.sqrt(mass) * rng.standard_normal(n)


def init_chain(theta, cfg: SghmcConfig, rng) -> ChainState:
    theta = np.array(theta, dtype=float)
    return ChainState(theta, init_momentum(cfg.mass, theta.shape[0], rng), 0)


def init_center(center, cfg: SghmcConfig, rng) -> CenterState:
    center = np.array(center, dtype=float)
    return CenterState(center, init_momentum(cfg.mass, center.shape[0], rng), 0)


# ---------------------------------------------------------------------------
# stochastic kernels
# ---------------------------------------------------------------------------


def sghmc_step(state: ChainState, grad, cfg: SghmcConfig, rng=None, *, noise=None) -> ChainState:
    n = state.theta.shape[0]
    grad = _check_grad(grad, n)
    res = cfg.resolve(n)
    z = _draw(rng, noise, n)
    theta, p = kernels.sghmc_update(state.theta, state.momentum, grad, cfg.epsilon, res.minv, res.fric, res.std, z)
    return ChainState(theta, p, state.step + 1)


def ec_worker_step(state: ChainState, grad, center_estimate, ec: EcConfig, rng=None, *,
                   noise=None) -> ChainState:
    """Worker update driven by the local gradient and the cached centre ``c~``."""
    n = state.theta.shape[0]
    grad = _check_grad(grad, n)
    center_estimate = np.asarray(center_estimate, dtype=float)
    if center_estimate.shape != (n,):
        raise ContractError("centre estimate has the wrong dimension")
    if not np.all(np.isfinite(center_estimate)):
        raise NonFiniteError("non-finite centre estimate")
    res = ec.resolve_worker(n)
    z = _draw(rng, noise, n)
    theta, p = kernels.ec_worker_update(
        state.theta, state.momentum, grad, center_estimate, ec.epsilon, res.minv, res.fric,
        float(ec.alpha), res.std, z,
    )
    return ChainState(theta, p, state.step + 1)


def ec_center_step(center: CenterState, worker_thetas, ec: EcConfig, rng=None, *,
                   noise=None) -> CenterState:
    """Centre update; the spring averages over the workers passed in."""
    if len(worker_thetas) == 0:
        raise ContractError("ec_center_step needs at least one worker position")
    n = center.center.shape[0]
    thetas = np.ascontiguousarray(np.asarray(worker_thetas, dtype=float))
    if thetas.ndim != 2 or thetas.shape[1] != n:
        raise ContractError("worker positions must be a (K, n) array matching the centre")
    res = ec.resolve_center(n)
    z = _draw(rng, noise, n)
    c, r = kernels.ec_center_update(
        center.center, center.center_momentum, thetas, ec.epsilon, res.minv, res.fric,
        float(ec.alpha), res.std, z,
    )
    return CenterState(c, r, center.version + 1)


def sgld_step(theta, grad, epsilon: float, rng=None, *, noise=None):
    """First-order Langevin step ``theta - eps grad + Normal(0, 2 eps I)``.

    Accepts a bare vector or a :class:`ChainState` (whose momentum is ignored
    and carried through unchanged).
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    state = theta if isinstance(theta, ChainState) else None
    vec = np.asarray(state.theta if state else theta, dtype=float)
    n = vec.shape[0]
    grad = _check_grad(grad, n)
    z = _draw(rng, noise, n)
    std = np.full(n, np.sqrt(2.0 * epsilon))
    out = kernels.sgld_update(vec, grad, float(epsilon), std, z)
    if state is not None:
        return ChainState(out, state.momentum, state.step + 1)
    return out


# ---------------------------------------------------------------------------
# deterministic limits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ElasticOptConfig:
    """Learning rate ``epsilon``, coupling ``alpha`` and momentum friction ``xi``."""

    epsilon: float
    alpha: float
    xi: float

    def __post_init__(self):
        if self.epsilon <= 0 or self.alpha < 0 or not (0 <= self.xi <= 1):
            raise ContractError("need epsilon > 0, alpha >= 0 and 0 <= xi <= 1")


def _stack(arr, name):
    arr = np.ascontiguousarray(np.asarray(arr, dtype=float))
    if arr.ndim != 2:
        raise ContractError(f"{name} must be a (K, n) array")
    return arr


def ec_deterministic_step(thetas, vs, center, h, grads, cfg: ElasticOptConfig):
    """Noise-free elastic dynamics with momentum on both workers and centre.

    Returns ``(thetas, vs, center, h)``.
    """
    thetas, vs, grads = _stack(thetas, "thetas"), _stack(vs, "vs"), _stack(grads, "grads")
    center = np.asarray(center, dtype=float)
    h = np.asarray(h, dtype=float)
    if not (thetas.shape == vs.shape == grads.shape) or center.shape != (thetas.shape[1],) or h.shape != center.shape:
        raise ContractError("dimension mismatch in ec_deterministic_step")
    return kernels.ec_deterministic_update(
        thetas, vs, center, h, grads, float(cfg.epsilon), float(cfg.alpha), float(cfg.xi)
    )


def eamsgd_step(thetas, vs, center, grads, cfg: ElasticOptConfig, couple: bool = True):
    """Elastic averaging with plain momentum; the spring acts on positions.

    With ``couple=False`` (the intermittent steps of the ``s``-periodic variant)
    the centre is left untouched and workers drop the spring term.
    Returns ``(thetas, vs, center)``.
    """
    thetas, vs, grads = _stack(thetas, "thetas"), _stack(vs, "vs"), _stack(grads, "grads")
    center = np.asarray(center, dtype=float)
    if not (thetas.shape == vs.shape == grads.shape) or center.shape != (thetas.shape[1],):
        raise ContractError("dimension mismatch in eamsgd_step")
    return kernels.eamsgd_update(
        thetas, vs, center, grads, float(cfg.epsilon), float(cfg.alpha), float(cfg.xi), bool(couple)
    )


# ---------------------------------------------------------------------------
# general D/Q form
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DynamicsSpec:
    """Constant diffusion ``D``, curl ``Q`` and a drift field over ``z``.

    ``grad_h(z)`` returns the vector that ``-(D + Q)`` multiplies. For the
    elastic system the coupling forces are not the gradient of one scalar
    Hamiltonian, so this is a force field rather than a true gradient.
    ``gamma`` is ``None`` for constant matrices (the correction vanishes).
    """

    diffusion: np.ndarray
    curl: np.ndarray
    grad_h: Callable[[np.ndarray], np.ndarray]
    gamma: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "custom"

    def __post_init__(self):
        d = np.asarray(self.diffusion, dtype=float)
        q = np.asarray(self.curl, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or q.shape != d.shape:
            raise ContractError("D and Q must be square matrices of equal size")
        object.__setattr__(self, "diffusion", d)
        object.__setattr__(self, "curl", q)

    @property
    def dim(self) -> int:
        return self.diffusion.shape[0]


@dataclass
class ValidationReport:
    name: str
    skew_symmetric: bool
    skew_residual: float
    diffusion_symmetric: bool
    psd: bool
    min_eigenvalue: float
    gamma_zero: bool
    messages: list

    @property
    def ok(self) -> bool:
        return self.skew_symmetric and self.diffusion_symmetric and self.psd and self.gamma_zero

    def __str__(self):
        status = "PASS" if self.ok else "FAIL"
        detail = "; ".join(self.messages) if self.messages else "Q skew, D symmetric PSD, Gamma = 0"
        return f"{self.name}: {status} ({detail})"


def validate_dynamics(spec: DynamicsSpec, tol: float = 1e-10) -> ValidationReport:
    q, d = spec.curl, spec.diffusion
    messages = []
    skew_res = float(np.max(np.abs(q + q.T))) if q.size else 0.0
    skew = bool(np.array_equal(q, -q.T))
    if not skew:
        messages.append(f"Q is not skew-symmetric (max |Q + Q^T| = {skew_res:.3g})")
    dsym = bool(np.array_equal(d, d.T))
    if not dsym:
        messages.append("D is not symmetric")
    min_eig = float(np.linalg.eigvalsh(0.5 * (d + d.T)).min()) if d.size else 0.0
    psd = min_eig >= -tol
    if not psd:
        messages.append(f"D is not positive semi-definite (min eigenvalue {min_eig:.3g})")
    gamma_zero = spec.gamma is None
    if not gamma_zero:
        messages.append("state-dependent Gamma declared; constant-matrix check not applicable")
    return ValidationReport(spec.name, skew, skew_res, dsym, psd, min_eig, gamma_zero, messages)


def general_sgmcmc_step(z, spec: DynamicsSpec, epsilon: float, rng=None, *, noise=None) -> np.ndarray:
    """``z - eps [(D + Q) grad_h(z) - Gamma(z)] + Normal(0, 2 eps D)``.

    ``D`` is expected diagonal when noise is drawn here (its square root is
    taken element-wise); ``noise`` is the standard-normal vector over ``z``.
    """
    z = np.asarray(z, dtype=float)
    m = spec.dim
    if z.shape != (m,):
        raise ContractError(f"state has shape {z.shape}, spec expects ({m},)")
    drift = (spec.diffusion + spec.curl) @ spec.grad_h(z)
    if spec.gamma is not None:
        drift = drift - spec.gamma(z)
    xi = _draw(rng, noise, m)
    std = np.sqrt(2.0 * epsilon * np.clip(np.diag(spec.diffusion), 0.0, None))
    return z - epsilon * drift + std * xi


def _block_curl(n_pos: int) -> np.ndarray:
    # [[0, -I], [I, 0]] over (position, momentum)
    eye = np.eye(n_pos)
    zero = np.zeros((n_pos, n_pos))
    return np.block([[zero, -eye], [eye, zero]])


def sghmc_spec(model, cfg: SghmcConfig, grad_fn=None) -> DynamicsSpec:
    """SGHMC as a D/Q system over ``z = [theta, p]``.

    ``D = blockdiag(0, V)``, ``Q = [[0, -I], [I, 0]]`` and kinetic energy
    ``0.5 p^T M^-1 p``; ``grad_fn`` overrides ``model.grad_potential``.
    """
    n = model.dim
    res = cfg.resolve(n)
    grad = grad_fn or model.grad_potential
    diffusion = np.diag(np.concatenate([np.zeros(n), res.fric]))

    def grad_h(z):
        return np.concatenate([grad(z[:n]), res.minv * z[n:]])

    return DynamicsSpec(diffusion, _block_curl(n), grad_h, None, "sghmc")


def sghmc_spec_uncorrected(model, cfg: SghmcConfig) -> DynamicsSpec:
    """The curl with ``V`` in its lower-right block, ``[[0, I], [-I, V]]``.

    Kept so the validator can demonstrate it is not skew-symmetric.
    """
    n = model.dim
    res = cfg.resolve(n)
    spec = sghmc_spec(model, cfg)
    eye = np.eye(n)
    curl = np.block([[np.zeros((n, n)), eye], [-eye, np.diag(res.fric)]])
    return DynamicsSpec(spec.diffusion, curl, spec.grad_h, None, "sghmc-uncorrected")


def ec_spec(model, ec: EcConfig, grad_fn=None) -> DynamicsSpec:
    """Elastic system over ``z = [theta^1..theta^K, p^1..p^K, c, r]``.

    ``D = diag(0, V, 0, C)``; ``Q`` pairs each position block with its momentum
    through ``[[0, -I], [I, 0]]``. The drift field carries ``alpha (theta^i - c)``
    on each worker and ``alpha / K sum_i (c - theta^i)`` on the centre, so it
    matches :func:`ec_worker_step` and :func:`ec_center_step` under linear
    noise scaling with ``worker_noise_includes_center=False``.
    """
    n, k = model.dim, ec.workers
    wres = ec.resolve_worker(n)
    cres = ec.resolve_center(n)
    grad = grad_fn or model.grad_potential
    alpha = float(ec.alpha)
    diffusion = np.diag(
        np.concatenate([np.zeros(n * k), np.tile(wres.fric, k), np.zeros(n), cres.fric])
    )
    m = 2 * n * k + 2 * n
    curl = np.zeros((m, m))
    curl[: 2 * n * k, : 2 * n * k] = _block_curl(n * k)
    curl[2 * n * k :, 2 * n * k :] = _block_curl(n)

    def grad_h(z):
        thetas = z[: n * k].reshape(k, n)
        ps = z[n * k : 2 * n * k].reshape(k, n)
        c = z[2 * n * k : 2 * n * k + n]
        r = z[2 * n * k + n :]
        force = np.empty_like(z)
        for i in range(k):
            force[i * n : (i + 1) * n] = grad(thetas[i]) + alpha * (thetas[i] - c)
        force[n * k : 2 * n * k] = (wres.minv * ps).ravel()
        force[2 * n * k : 2 * n * k + n] = alpha * (kernels.spring_sum(c, np.ascontiguousarray(thetas)) / k)
        force[2 * n * k + n :] = cres.minv * r
        return force

    return DynamicsSpec(diffusion, curl, grad_h, None, "ec-sghmc")


def sgld_spec(model) -> DynamicsSpec:
    n = model.dim
    return DynamicsSpec(np.eye(n), np.zeros((n, n)), model.grad_potential, None, "sgld")


def pack_ec(workers: list[ChainState], center: CenterState) -> np.ndarray:
    return np.concatenate(
        [w.theta for w in workers] + [w.momentum for w in workers] + [center.center, center.center_momentum]
    )


def unpack_ec(z, n: int, k: int):
    thetas = z[: n * k].reshape(k, n)
    ps = z[n * k : 2 * n * k].reshape(k, n)
    return thetas, ps, z[2 * n * k : 2 * n * k + n], z[2 * n * k + n :]
