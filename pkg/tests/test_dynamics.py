import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecmcmc import checks
from ecmcmc.dynamics import (
    CenterState,
    ChainState,
    DynamicsSpec,
    EcConfig,
    ElasticOptConfig,
    SghmcConfig,
    eamsgd_step,
    ec_center_step,
    ec_deterministic_step,
    ec_spec,
    ec_worker_step,
    general_sgmcmc_step,
    noise_scale,
    sghmc_spec,
    sghmc_spec_uncorrected,
    sghmc_step,
    sgld_spec,
    sgld_step,
    validate_dynamics,
)
from ecmcmc.errors import ContractError, NonFiniteError
from ecmcmc.model import GaussianTarget

Z2 = np.zeros(2)


def chain(theta, p):
    return ChainState(np.array(theta, dtype=float), np.array(p, dtype=float))


def center(c, r):
    return CenterState(np.array(c, dtype=float), np.array(r, dtype=float))


class TestSghmcStep:
    def test_frictionless_drift(self):
        out = sghmc_step(chain([0, 0], [1, 2]), Z2, SghmcConfig(0.1, grad_noise=0.0), noise=Z2)
        np.testing.assert_allclose(out.theta, [0.1, 0.2])
        np.testing.assert_array_equal(out.momentum, [1.0, 2.0])
        assert out.step == 1

    def test_gradient_and_friction(self):
        out = sghmc_step(chain([0, 0], [1, 0]), np.array([1.0, 0.0]), SghmcConfig(0.1), noise=Z2)
        np.testing.assert_allclose(out.momentum, [0.8, 0.0])

    def test_noise_variance_linear_and_quadratic(self):
        assert noise_scale(0.1, "linear") == pytest.approx(0.2)
        assert noise_scale(0.1, "quadratic") == pytest.approx(0.02)
        with pytest.raises(ContractError):
            noise_scale(0.1, "cubic")
        res = SghmcConfig(0.1, grad_noise=[1.0, 4.0]).resolve(2)
        np.testing.assert_allclose(res.std, np.sqrt([0.2, 0.8]))

    def test_same_rng_state_same_step(self):
        cfg = SghmcConfig(0.1)
        a = sghmc_step(chain([0, 0], [1, 0]), Z2, cfg, np.random.default_rng(3))
        b = sghmc_step(chain([0, 0], [1, 0]), Z2, cfg, np.random.default_rng(3))
        np.testing.assert_array_equal(a.momentum, b.momentum)

    def test_errors(self):
        cfg = SghmcConfig(0.1)
        with pytest.raises(ContractError):
            sghmc_step(chain([0, 0], [1, 0]), np.zeros(3), cfg, noise=Z2)
        with pytest.raises(NonFiniteError):
            sghmc_step(chain([0, 0], [1, 0]), np.array([np.nan, 0.0]), cfg, noise=Z2)
        with pytest.raises(ContractError):
            SghmcConfig(0.0)
        with pytest.raises(ContractError):
            ChainState(np.zeros(2), np.zeros(3))

    def test_long_run_moments_one_dimensional(self):
        model = GaussianTarget([0.0], [[1.0]])
        cfg = SghmcConfig(1e-2)
        rng = np.random.default_rng(0)
        state = chain([0.0], [0.0])
        xs = np.empty(200_000)
        for t in range(220_000):
            state = sghmc_step(state, model.grad_potential(state.theta), cfg, rng)
            if t >= 20_000:
                xs[t - 20_000] = state.theta[0]
        assert abs(xs.mean()) < 0.05
        assert abs(xs.var() - 1.0) < 0.1


class TestElasticKernels:
    def test_pure_spring_force(self):
        ec = EcConfig(1.0, SghmcConfig(0.1, grad_noise=0.0), center_noise=0.0, workers=1)
        out = ec_worker_step(chain([1, 0], [0, 0]), Z2, Z2, ec, noise=Z2)
        np.testing.assert_allclose(out.momentum, [-0.1, 0.0])

    def test_decoupled_worker_equals_sghmc_with_v_plus_c(self):
        base = SghmcConfig(0.05, grad_noise=[1.0, 2.0])
        ec = EcConfig(0.0, base, center_noise=[0.5, 0.5], workers=2)
        ref = SghmcConfig(0.05, grad_noise=[1.0, 2.0], noise_scaling="quadratic",
                          injected_noise=[1.5, 2.5])
        s = chain([0.3, -0.2], [0.1, 0.4])
        g = np.array([0.7, -0.1])
        a = ec_worker_step(s, g, np.array([5.0, 5.0]), ec, np.random.default_rng(1))
        b = sghmc_step(s, g, ref, np.random.default_rng(1))
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.momentum, b.momentum)

    def test_center_equilibrium(self):
        ec = EcConfig(1.0, SghmcConfig(0.1), center_noise=0.0, workers=2)
        out = ec_center_step(center([1, 2], [0, 0]), np.array([[1.0, 2.0], [1.0, 2.0]]), ec, noise=Z2)
        np.testing.assert_array_equal(out.center, [1.0, 2.0])
        np.testing.assert_array_equal(out.center_momentum, [0.0, 0.0])
        assert out.version == 1

    def test_symmetric_workers_cancel(self):
        ec = EcConfig(1.0, SghmcConfig(0.1), center_noise=0.5, workers=2)
        out = ec_center_step(center([0, 0], [1, 0]), np.array([[1.0, 0.0], [-1.0, 0.0]]), ec, noise=Z2)
        # friction only: r - eps C r
        np.testing.assert_allclose(out.center_momentum, [0.95, 0.0])

    def test_single_worker_pull(self):
        ec = EcConfig(1.0, SghmcConfig(0.1), center_noise=0.0, workers=1)
        out = ec_center_step(center([0, 0], [0, 0]), np.array([[1.0, 0.0]]), ec, noise=Z2)
        np.testing.assert_allclose(out.center_momentum, [0.1, 0.0])

    def test_errors(self):
        ec = EcConfig(1.0, SghmcConfig(0.1), workers=1)
        with pytest.raises(ContractError):
            ec_center_step(center([0, 0], [0, 0]), [], ec, noise=Z2)
        with pytest.raises(ContractError):
            ec_center_step(center([0, 0], [0, 0]), np.zeros((1, 3)), ec, noise=Z2)
        with pytest.raises(ContractError):
            ec_worker_step(chain([0, 0], [0, 0]), Z2, np.zeros(3), ec, noise=Z2)
        with pytest.raises(NonFiniteError):
            ec_worker_step(chain([0, 0], [0, 0]), Z2, np.array([np.inf, 0.0]), ec, noise=Z2)
        with pytest.raises(ContractError):
            EcConfig(-1.0, SghmcConfig(0.1))
        with pytest.raises(ContractError):
            EcConfig(1.0, SghmcConfig(0.1), workers=0)


class TestGeneralForm:
    def test_zero_matrices_leave_state_unchanged(self):
        spec = DynamicsSpec(np.zeros((3, 3)), np.zeros((3, 3)), lambda z: np.array([1.0, 2.0, 3.0]))
        z = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(general_sgmcmc_step(z, spec, 0.1, noise=np.ones(3)), z)

    def test_validator_accepts_shipped_specs(self):
        model = GaussianTarget(Z2, np.eye(2))
        ec = EcConfig(1.0, SghmcConfig(0.01), workers=3, noise_scaling="linear",
                      worker_noise_includes_center=False)
        for spec in (sghmc_spec(model, SghmcConfig(0.01)), ec_spec(model, ec), sgld_spec(model)):
            rep = validate_dynamics(spec)
            assert rep.ok, str(rep)
            assert rep.gamma_zero

    def test_validator_rejects_printed_curl(self):
        rep = validate_dynamics(sghmc_spec_uncorrected(GaussianTarget(Z2, np.eye(2)), SghmcConfig(0.01)))
        assert not rep.ok and not rep.skew_symmetric
        assert "skew" in str(rep)

    def test_validator_rejects_negative_diffusion(self):
        spec = DynamicsSpec(np.diag([1.0, -1.0]), np.zeros((2, 2)), lambda z: z)
        rep = validate_dynamics(spec)
        assert not rep.psd and rep.min_eigenvalue == pytest.approx(-1.0)

    def test_sghmc_instantiation(self):
        res = checks.check_sghmc_instantiation(steps=100)
        assert res.passed, res.detail

    def test_ec_instantiation(self):
        res = checks.check_ec_instantiation(steps=100)
        assert res.passed, res.detail

    def test_sgld_matches_general_form(self):
        model = GaussianTarget(Z2, np.diag([1.0, 3.0]))
        spec = sgld_spec(model)
        rng = np.random.default_rng(0)
        a = b = np.array([1.0, -1.0])
        for _ in range(100):
            xi = rng.standard_normal(2)
            a = sgld_step(a, model.grad_potential(a), 0.01, noise=xi)
            b = general_sgmcmc_step(b, spec, 0.01, noise=xi)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestSgld:
    def test_no_gradient_no_noise_is_fixed_point(self):
        theta = np.array([0.3, 0.4])
        np.testing.assert_array_equal(sgld_step(theta, Z2, 0.1, noise=Z2), theta)

    def test_chain_state_keeps_momentum(self):
        out = sgld_step(chain([1, 1], [5, 5]), Z2, 0.1, noise=Z2)
        np.testing.assert_array_equal(out.momentum, [5.0, 5.0])
        assert out.step == 1

    def test_long_run_variance(self):
        # 100 independent unit-variance coordinates stand in for one long chain
        rng = np.random.default_rng(0)
        theta = np.zeros(100)
        total = np.zeros(100)
        total_sq = np.zeros(100)
        kept = 0
        for t in range(25_000):
            theta = sgld_step(theta, theta, 1e-3, rng)
            if t >= 5000:
                total += theta
                total_sq += theta * theta
                kept += 1
        var = (total_sq / kept - (total / kept) ** 2).mean()
        assert abs(var - 1.0) < 0.1


class TestDeterministicLimit:
    def test_matches_noise_free_sampler(self):
        res = checks.check_deterministic_limit(steps=1000)
        assert res.passed, res.detail

    def test_fixed_point(self):
        cfg = ElasticOptConfig(0.1, 1.0, 0.1)
        thetas = np.array([[1.0, 2.0], [1.0, 2.0]])
        out = ec_deterministic_step(thetas, np.zeros((2, 2)), np.array([1.0, 2.0]), Z2, np.zeros((2, 2)), cfg)
        np.testing.assert_array_equal(out[0], thetas)
        np.testing.assert_array_equal(out[2], [1.0, 2.0])

    def test_decoupled_is_momentum_descent(self):
        cfg = ElasticOptConfig(0.1, 0.0, 0.2)
        theta, v = np.array([[1.0, -1.0]]), np.array([[0.5, 0.0]])
        g = np.array([[2.0, 1.0]])
        t2, v2, _, _ = ec_deterministic_step(theta, v, Z2, Z2, g, cfg)
        np.testing.assert_allclose(t2, theta + v)
        np.testing.assert_allclose(v2, v - 0.1 * g - 0.2 * v)

    def test_eamsgd_one_step_example(self):
        cfg = ElasticOptConfig(0.1, 1.0, 0.1)
        t2, v2, c2 = eamsgd_step(np.array([[1.0, 0.0]]), np.zeros((1, 2)), Z2, np.zeros((1, 2)), cfg)
        np.testing.assert_allclose(t2, [[0.9, 0.0]])
        np.testing.assert_allclose(c2, [0.1, 0.0])

    def test_eamsgd_uncoupled_freezes_centre(self):
        cfg = ElasticOptConfig(0.1, 1.0, 0.1)
        _, _, c2 = eamsgd_step(np.array([[1.0, 0.0]]), np.zeros((1, 2)), Z2, np.zeros((1, 2)), cfg,
                               couple=False)
        np.testing.assert_array_equal(c2, Z2)

    def test_dimension_mismatch(self):
        cfg = ElasticOptConfig(0.1, 1.0, 0.1)
        with pytest.raises(ContractError):
            ec_deterministic_step(np.zeros((2, 2)), np.zeros((2, 3)), Z2, Z2, np.zeros((2, 2)), cfg)
        with pytest.raises(ContractError):
            eamsgd_step(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(3), np.zeros((2, 2)), cfg)


def test_energy_drift_is_second_order():
    model = GaussianTarget(Z2, np.eye(2))

    def drift(eps, steps=50):
        cfg = SghmcConfig(eps, grad_noise=0.0)
        s = chain([1.0, 0.5], [0.0, 1.0])
        h0 = model.potential(s.theta) + 0.5 * s.momentum @ s.momentum
        for _ in range(steps):
            s = sghmc_step(s, model.grad_potential(s.theta), cfg, noise=Z2)
        h1 = model.potential(s.theta) + 0.5 * s.momentum @ s.momentum
        return (h1 - h0) / steps

    ratio = drift(1e-2) / drift(5e-3)
    assert ratio == pytest.approx(4.0, rel=0.05)
    assert drift(1e-3) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 3.0), st.integers(1, 5), st.integers(0, 2**31))
def test_ec_spec_is_always_structurally_valid(alpha, workers, seed):
    rng = np.random.default_rng(seed)
    base = SghmcConfig(0.01, grad_noise=rng.uniform(0, 2, 3))
    ec = EcConfig(alpha, base, center_noise=rng.uniform(0, 2, 3), workers=workers,
                  noise_scaling="linear", worker_noise_includes_center=False)
    rep = validate_dynamics(ec_spec(GaussianTarget(np.zeros(3), np.eye(3)), ec))
    assert rep.ok
