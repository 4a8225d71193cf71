import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ecmcmc import kernels
from ecmcmc.diagnostics import (
    SamplePool,
    ess,
    gaussian_error,
    mahalanobis_fraction,
    moments,
    nll_trace,
    predictive_nll_curve,
)
from ecmcmc.errors import ContractError
from ecmcmc.model import ClassifierPosterior, DataSet, GaussianTarget, make_blobs


def ar1(n, phi, seed):
    rng = np.random.default_rng(seed)
    x = np.empty(n)
    x[0] = rng.standard_normal() / math.sqrt(1 - phi * phi)
    eps = rng.standard_normal(n)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + eps[i]
    return x


def ess_by_lag_sum(x):
    """Direct O(n^2) initial-positive-sequence estimator."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = x.size
    var = x @ x / n
    rho = [x[: n - k] @ x[k:] / n / var for k in range(n)]
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        tau += 2 * pair
    return min(max(n / tau, 1.0), n)


class TestMoments:
    def test_two_point_example(self):
        rep = moments(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        np.testing.assert_array_equal(rep.mean, [0.0, 0.0])
        np.testing.assert_array_equal(rep.covariance, [[2.0, 0.0], [0.0, 0.0]])

    def test_iid_mean(self):
        x = np.random.default_rng(0).standard_normal((100_000, 3))
        assert np.all(np.abs(moments(x).mean) < 0.02)

    def test_single_sample(self):
        with pytest.raises(ContractError) as info:
            moments(np.array([[1.0, 2.0]]))
        assert "two samples" in str(info.value)

    def test_empty(self):
        with pytest.raises(ContractError):
            moments(np.empty((0, 2)))

    def test_reference_errors(self):
        x = np.random.default_rng(1).standard_normal((1000, 2)) + 1.0
        rep = moments(x, reference_mean=[0.0, 0.0], reference_cov=np.eye(2))
        assert rep.mean_error == pytest.approx(np.linalg.norm(x.mean(axis=0)))


class TestGaussianError:
    def test_pool_at_mean(self):
        target = GaussianTarget([1.0, -2.0], np.eye(2))
        pool = np.tile([1.0, -2.0], (5, 1))
        err = gaussian_error(pool, target)
        assert err.mean_error == 0.0 and err.cov_rel_error == pytest.approx(1.0)

    def test_shifted_mean(self):
        x = np.random.default_rng(2).standard_normal((200_000, 2)) + 1.0
        err = gaussian_error(SamplePool(x), GaussianTarget([0.0, 0.0], np.eye(2)))
        assert err.mean_error == pytest.approx(math.sqrt(2), abs=0.01)
        assert err.cov_rel_error < 0.02


class TestEss:
    def test_iid(self):
        n = 10_000
        value = ess(np.random.default_rng(0).standard_normal(n)).value
        assert 0.8 * n <= value <= 1.2 * n

    def test_alternating_is_clipped(self):
        x = np.tile([1.0, -1.0], 50)
        rep = ess(x)
        assert 1.0 <= rep.value <= 100 and not rep.degenerate

    def test_ar1(self):
        n = 100_000
        value = ess(ar1(n, 0.9, 3)).value
        assert value == pytest.approx(n * 0.1 / 1.9, rel=0.2)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_direct_lag_sum(self, seed):
        x = ar1(800, 0.7, seed)
        assert ess(x).value == pytest.approx(ess_by_lag_sum(x), rel=1e-9)

    def test_kernel_flavours_agree(self):
        x = ar1(3000, 0.8, 4)
        x -= x.mean()
        a = kernels.NUMPY.ips_tau(x)
        b = kernels.NUMBA.ips_tau(x)
        assert a[0] == pytest.approx(b[0], rel=1e-9)

    def test_constant_series_is_degenerate(self):
        rep = ess(np.full(50, 3.0))
        assert rep.value == 1.0 and rep.degenerate

    def test_minimum_over_coordinates(self):
        x = np.column_stack([np.random.default_rng(0).standard_normal(5000), ar1(5000, 0.9, 0)])
        rep = ess(x)
        assert rep.value == rep.per_coordinate.min() == ess(x[:, 1]).value

    def test_too_short(self):
        with pytest.raises(ContractError):
            ess(np.arange(9.0))

    @pytest.mark.parametrize("m", [2, 5, 10])
    def test_thinning(self, m):
        x = ar1(50_000, 0.9, 5)
        assert ess(x[::m]).value >= ess(x).value / m * 0.75


class TestNllTrace:
    def test_uniform_output_gives_log_two(self):
        data = make_blobs(20, 3, 2)
        model = ClassifierPosterior(data, (3, 4, 2))
        out = nll_trace(model, np.zeros((3, model.dim)), steps=[5, 6, 7])
        np.testing.assert_array_equal(out[:, 0], [5, 6, 7])
        np.testing.assert_allclose(out[:, 1], math.log(2), rtol=1e-14)

    def test_hand_computation(self):
        data = DataSet(np.array([[1.0], [2.0], [-1.0], [-2.0]]), np.array([1, 1, 0, 0]))
        model = ClassifierPosterior(data, (1, 2))
        theta = np.array([-3.0, 3.0, 0.0, 0.0])  # logit gap 6x
        expected = np.mean([math.log1p(math.exp(-6 * abs(v))) for v in (1.0, 2.0, 1.0, 2.0)])
        assert nll_trace(model, theta)[0, 1] == pytest.approx(expected, rel=1e-12)

    def test_decreases_under_gradient_descent(self):
        data = make_blobs(100, 2, 2, separation=3.0, seed=0)
        model = ClassifierPosterior(data, (2, 2), prior_precision=1e-5)
        theta = np.zeros(model.dim)
        path = []
        for _ in range(50):
            theta = theta - 1e-3 * model.grad_potential(theta)
            path.append(theta)
        values = nll_trace(model, np.array(path))[:, 1]
        assert np.all(np.diff(values) < 0)

    def test_repeated_theta_is_constant(self):
        data = make_blobs(30, 2, 3)
        model = ClassifierPosterior(data, (2, 5, 3))
        theta = model.init_theta(np.random.default_rng(0))
        values = nll_trace(model, np.tile(theta, (4, 1)))[:, 1]
        assert np.all(values == values[0])

    def test_dimension_mismatch(self):
        model = ClassifierPosterior(make_blobs(10, 2, 2), (2, 2))
        with pytest.raises(ContractError):
            nll_trace(model, np.zeros((2, 5)))


class TestPredictiveCurve:
    def setup_method(self):
        self.data = make_blobs(40, 2, 2, seed=1)
        self.model = ClassifierPosterior(self.data, (2, 3, 2))
        rng = np.random.default_rng(0)
        self.samples = np.array([self.model.init_theta(rng) for _ in range(6)])
        self.times = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])

    def test_running_average_by_hand(self):
        grid = np.array([0.5, 2.0, 6.0])
        out = predictive_nll_curve(self.model, self.samples, self.times, self.data, grid, start=1.0)
        assert math.isnan(out[0])
        rows = np.arange(40)
        p2 = self.model.predict_proba(self.samples[1], self.data.x)[rows, self.data.y]
        assert out[1] == pytest.approx(-np.mean(np.log(p2)), rel=1e-12)
        mix = np.mean([self.model.predict_proba(s, self.data.x)[rows, self.data.y] for s in self.samples[1:]],
                      axis=0)
        assert out[2] == pytest.approx(-np.mean(np.log(mix)), rel=1e-12)

    def test_sample_order_does_not_matter(self):
        grid = np.array([3.0, 6.0])
        perm = np.array([5, 0, 3, 1, 4, 2])
        a = predictive_nll_curve(self.model, self.samples, self.times, self.data, grid)
        b = predictive_nll_curve(self.model, self.samples[perm], self.times[perm], self.data, grid)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_errors(self):
        with pytest.raises(ContractError):
            predictive_nll_curve(self.model, self.samples, self.times[:3], self.data, [1.0])
        with pytest.raises(ContractError):
            predictive_nll_curve(self.model, self.samples, self.times, self.data, [2.0, 1.0])
        with pytest.raises(ContractError):
            predictive_nll_curve(self.model, self.samples, self.times, DataSet(self.data.x), [1.0])


def test_mahalanobis_fraction():
    assert mahalanobis_fraction([1.0, 3.0, 3.5, 4.0], 3.0) == 0.5


def test_pool_provenance_shapes():
    with pytest.raises(ContractError):
        SamplePool(np.zeros((3, 2)), workers=np.zeros(2))
    pool = SamplePool(np.arange(6.0).reshape(3, 2), workers=np.array([0, 1, 0]))
    np.testing.assert_array_equal(pool.for_worker(0), [[0.0, 1.0], [4.0, 5.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 4)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)), st.randoms(use_true_random=False))
def test_moments_are_permutation_invariant(x, rnd):
    perm = list(range(x.shape[0]))
    rnd.shuffle(perm)
    a, b = moments(x), moments(x[perm])
    scale = 1.0 + np.abs(x).max() ** 2
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(a.covariance, b.covariance, rtol=1e-9, atol=1e-9 * scale)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 400), st.integers(0, 2**31))
def test_ess_never_exceeds_length(n, seed):
    x = np.random.default_rng(seed).standard_normal(n).cumsum()
    value = ess(x).value
    assert 1.0 <= value <= n
