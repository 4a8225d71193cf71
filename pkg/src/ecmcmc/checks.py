"""Self-check suite: structural validity, exact-equivalence limits, gradients.

Each check returns a :class:`CheckResult`. ``expected_fail`` marks negative
demonstrations whose failure is the correct outcome; they do not count
against the overall verdict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    CenterState,
    ChainState,
    EcConfig,
    ElasticOptConfig,
    SghmcConfig,
    ec_center_step,
    ec_deterministic_step,
    ec_spec,
    ec_worker_step,
    general_sgmcmc_step,
    init_center,
    init_chain,
    pack_ec,
    sghmc_spec,
    sghmc_spec_uncorrected,
    sghmc_step,
    validate_dynamics,
)
from .harness import ProtocolConfig, run_elastic, run_independent, run_naive_async, stream
from .model import ClassifierPosterior, GaussianTarget, MinibatchSpec, check_gradient, make_blobs

TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    expected_fail: bool = False

    @property
    def counts(self) -> bool:
        return not self.expected_fail

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if self.expected_fail:
            status += " (expected)"
        return f"{status:16s} {self.name}" + (f": {self.detail}" if self.detail else "")


def _toy(dim=2):
    return GaussianTarget(np.zeros(dim), np.diag(np.linspace(0.5, 2.0, dim)))


def check_sghmc_structure() -> CheckResult:
    rep = validate_dynamics(sghmc_spec(_toy(), SghmcConfig(0.01, grad_noise=[1.0, 2.0])))
    return CheckResult("structure/sghmc", rep.ok, str(rep))


def check_ec_structure() -> CheckResult:
    ec = EcConfig(1.0, SghmcConfig(0.01), center_noise=1.0, workers=3, noise_scaling="linear",
                  worker_noise_includes_center=False)
    rep = validate_dynamics(ec_spec(_toy(), ec))
    return CheckResult("structure/ec-sghmc", rep.ok, str(rep))


def check_printed_curl() -> CheckResult:
    """The curl with V in its corner is not skew-symmetric; the validator must say so."""
    rep = validate_dynamics(sghmc_spec_uncorrected(_toy(), SghmcConfig(0.01)))
    detail = "; ".join(rep.messages) + ". Q = [[0, I], [-I, V]] breaks Q = -Q^T; " \
        "the corrected form is Q = [[0, -I], [I, 0]] with V moved to D"
    return CheckResult("structure/printed-curl", rep.ok, detail, expected_fail=True)


def check_sghmc_instantiation(steps: int = 100, seed: int = 0) -> CheckResult:
    model = _toy()
    cfg = SghmcConfig(0.05, mass=[1.0, 2.0], grad_noise=[1.0, 0.5], noise_scaling="linear")
    spec = sghmc_spec(model, cfg)
    rng = np.random.default_rng(seed)
    state = init_chain(np.array([1.0, -1.0]), cfg, rng)
    z = np.concatenate([state.theta, state.momentum])
    worst = 0.0
    for _ in range(steps):
        xi = rng.standard_normal(2 * model.dim)
        state = sghmc_step(state, model.grad_potential(state.theta), cfg, noise=xi[model.dim:])
        z = general_sgmcmc_step(z, spec, cfg.epsilon, noise=xi)
        worst = max(worst, float(np.abs(z - np.concatenate([state.theta, state.momentum])).max()))
    return CheckResult("equivalence/sghmc", worst <= TOL, f"max deviation {worst:.2e} over {steps} steps")


def check_ec_instantiation(steps: int = 100, seed: int = 0, workers: int = 3) -> CheckResult:
    model = _toy()
    n = model.dim
    base = SghmcConfig(0.05, grad_noise=[1.0, 0.5])
    ec = EcConfig(0.7, base, center_noise=[0.3, 0.8], workers=workers, noise_scaling="linear",
                  worker_noise_includes_center=False)
    spec = ec_spec(model, ec)
    rng = np.random.default_rng(seed)
    states = [init_chain(rng.standard_normal(n), base, rng) for _ in range(workers)]
    center = init_center(np.zeros(n), base, rng)
    z = pack_ec(states, center)
    worst = 0.0
    for _ in range(steps):
        xi = rng.standard_normal(z.shape[0])
        momenta = xi[n * workers: 2 * n * workers].reshape(workers, n)
        old = np.array([s.theta for s in states])
        c = center.center
        states = [
            ec_worker_step(s, model.grad_potential(s.theta), c, ec, noise=momenta[i])
            for i, s in enumerate(states)
        ]
        center = ec_center_step(center, old, ec, noise=xi[2 * n * workers + n:])
        z = general_sgmcmc_step(z, spec, ec.epsilon, noise=xi)
        worst = max(worst, float(np.abs(z - pack_ec(states, center)).max()))
    return CheckResult("equivalence/ec-sghmc", worst <= TOL, f"max deviation {worst:.2e} over {steps} steps")


def check_decoupling(steps: int = 2000, workers: int = 4, seed: int = 0,
                     mismatch_noise_scaling: bool = False) -> CheckResult:
    """``alpha = 0`` elastic run against independent chains, bit for bit.

    ``mismatch_noise_scaling`` gives the independent arm the other noise
    scaling: a negative control that must fail.
    """
    model = GaussianTarget(np.zeros(2), np.eye(2), grad_noise=0.5)
    base = SghmcConfig(0.05, grad_noise=1.0, noise_scaling="quadratic")
    ec = EcConfig(0.0, base, center_noise=1.0, workers=workers, noise_scaling="quadratic")
    ref = ec.decoupled_sghmc()
    if mismatch_noise_scaling:
        ref = SghmcConfig(ref.epsilon, mass=ref.mass, grad_noise=ref.grad_noise,
                          noise_scaling="linear", injected_noise=ref.injected_noise)
    a = run_elastic(model, ec, ProtocolConfig("elastic", workers, 1), steps, seed)
    b = run_independent(model, ref, workers, steps, seed)
    same = a.identical_to(b)
    detail = f"K={workers}, {steps} steps"
    if not same:
        diff = float(np.abs(a.samples - b.samples).max())
        detail += f", max deviation {diff:.3g}"
        if mismatch_noise_scaling:
            detail += " (independent arm uses linear noise scaling, elastic arm quadratic)"
    return CheckResult("limit/decoupling", same, detail)


def synchronous_average_oracle(model, cfg: SghmcConfig, workers: int, steps: int, seed: int, theta0):
    """Plain loop: one SGHMC step per round on the mean of ``workers`` fresh gradients."""
    server_rng = stream(seed, "server")
    batch = [stream(seed, "batch", k) for k in range(workers)]
    state = init_chain(np.asarray(theta0, dtype=float), cfg, server_rng)
    out = []
    for _ in range(steps):
        grads = [model.minibatch_grad(state.theta, batch[k]) for k in range(workers)]
        total = grads[0].copy()
        for g in grads[1:]:
            total += g
        state = sghmc_step(state, total / workers, cfg, server_rng)
        out.append(state.theta)
    return np.array(out)


def check_synchrony_limit(steps: int = 500, workers: int = 4, seed: int = 0) -> CheckResult:
    model = GaussianTarget(np.zeros(3), np.eye(3), grad_noise=1.0)
    cfg = SghmcConfig(0.05, grad_noise=1.0)
    theta0 = np.full(3, 0.5)
    proto = ProtocolConfig("naive_async", workers, comm_period=1, wait_count=workers)
    run = run_naive_async(model, cfg, proto, steps, seed, init=theta0)
    oracle = synchronous_average_oracle(model, cfg, workers, steps, seed, theta0)
    same = run.samples.shape == oracle.shape and np.array_equal(run.samples, oracle)
    return CheckResult("limit/synchrony", same, f"s=1, O=K={workers}, {steps} server steps")


def check_deterministic_limit(steps: int = 1000, workers: int = 3, seed: int = 0) -> CheckResult:
    """EC kernels with ``V = C = 0`` against the momentum optimizer.

    With ``v = eps p`` and ``h = eps r`` the sampler is the optimizer at learning
    rate ``eps^2`` and friction ``xi = eps V = 0``. A power-of-two ``eps``
    makes every rescaling exact, so the two agree to the last bit even though
    the undamped dynamics amplify any rounding difference.
    """
    model = _toy(3)
    n = model.dim
    eps, alpha = 0.125, 0.8
    base = SghmcConfig(eps, grad_noise=0.0, noise_scaling="linear")
    ec = EcConfig(alpha, base, center_noise=0.0, workers=workers, noise_scaling="linear",
                  worker_noise_includes_center=False)
    opt = ElasticOptConfig(eps * eps, alpha, 0.0)
    rng = np.random.default_rng(seed)
    thetas = rng.standard_normal((workers, n))
    ps = rng.standard_normal((workers, n))
    states = [ChainState(thetas[i].copy(), ps[i].copy()) for i in range(workers)]
    center = CenterState(thetas.mean(axis=0), np.zeros(n))
    vs, c, h = eps * ps, center.center.copy(), np.zeros(n)
    zero = np.zeros(n)
    worst = 0.0
    for _ in range(steps):
        grads = np.array([model.grad_potential(t) for t in thetas])
        thetas, vs, c, h = ec_deterministic_step(thetas, vs, c, h, grads, opt)
        old = np.array([s.theta for s in states])
        cc = center.center
        states = [ec_worker_step(s, model.grad_potential(s.theta), cc, ec, noise=zero)
                  for s in states]
        center = ec_center_step(center, old, ec, noise=zero)
        got = np.array([s.theta for s in states])
        got_v = eps * np.array([s.momentum for s in states])
        worst = max(worst, float(np.abs(got - thetas).max()), float(np.abs(got_v - vs).max()),
                    float(np.abs(center.center - c).max()),
                    float(np.abs(eps * center.center_momentum - h).max()))
    return CheckResult("limit/deterministic", worst <= TOL, f"max deviation {worst:.2e} over {steps} steps")


def shipped_models():
    """One instance of every model the package ships, for gradient checks."""
    data = make_blobs(60, 3, 3, 2.0, seed=1)
    return {
        "gaussian": GaussianTarget([0.5, -1.0, 2.0], [[2.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 0.5]]),
        "logistic": ClassifierPosterior(data, (3, 3), 1e-2, MinibatchSpec(20)),
        "mlp-relu": ClassifierPosterior(data, (3, 8, 3), 1e-2, MinibatchSpec(20)),
        "mlp-tanh": ClassifierPosterior(data, (3, 5, 4, 3), 1e-2, MinibatchSpec(20), activation="tanh"),
    }


def check_gradients(points: int = 10, seed: int = 0) -> list[CheckResult]:
    out = []
    for name, model in shipped_models().items():
        res = check_gradient(model, points=points, seed=seed)
        out.append(CheckResult(f"gradient/{name}", res.ok, f"max relative error {res.max_rel_error:.2e}"))
    return out


def run_all(mismatch_noise_scaling: bool = False) -> list[CheckResult]:
    results = [
        check_sghmc_structure(),
        check_ec_structure(),
        check_printed_curl(),
        check_sghmc_instantiation(),
        check_ec_instantiation(),
        check_decoupling(mismatch_noise_scaling=mismatch_noise_scaling),
        check_synchrony_limit(),
        check_deterministic_limit(),
    ]
    results.extend(check_gradients())
    return results


def verdict(results) -> bool:
    return all(r.passed for r in results if r.counts)
