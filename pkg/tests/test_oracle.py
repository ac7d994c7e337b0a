import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reladiff import diffusion as D
from reladiff import tensor as T
from reladiff.errors import ConfigError, ContractError
from reladiff.oracle import (GaussianTarget, NonFiniteLossError, finite_diff_check, linear_gaussian_moments,
                             oracle_eps, oracle_sample, posterior_mean)

SCHED = D.make_schedule(50)


def test_degenerate_prior():
    x = np.array([0.3, -1.2, 2.0])
    t = 17
    ab = SCHED.alpha_bar[t - 1]
    target = GaussianTarget(0.4, 0.0)
    np.testing.assert_allclose(posterior_mean(x, t, SCHED, target), 0.4)
    np.testing.assert_allclose(oracle_eps(x, t, SCHED, target), (x - math.sqrt(ab) * 0.4) / math.sqrt(1 - ab),
                               rtol=1e-12)


def test_flat_prior_predicts_no_noise():
    x = np.linspace(-3, 3, 7)
    for t in (1, 25, 50):
        assert np.abs(oracle_eps(x, t, SCHED, GaussianTarget(0.0, 1e12))).max() < 1e-5


def test_timestep_range_enforced():
    with pytest.raises(ContractError):
        oracle_eps(np.zeros(2), 0, SCHED, GaussianTarget())
    with pytest.raises(ContractError):
        oracle_eps(np.zeros(2), 51, SCHED, GaussianTarget())


def test_negative_variance_rejected():
    with pytest.raises(ConfigError):
        GaussianTarget(0.0, -1.0)


def test_tensor_in_tensor_out():
    assert isinstance(oracle_eps(T.Tensor(np.zeros(3)), 3, SCHED, GaussianTarget()), T.Tensor)


def test_oracle_is_mse_optimal_among_tested_predictors():
    r = np.random.default_rng(0)
    n, t = 100_000, 20
    target = GaussianTarget(0.5, 0.3)
    ab = SCHED.alpha_bar[t - 1]
    x0 = r.normal(target.mu, math.sqrt(target.sigma2), n)
    eps = r.standard_normal(n)
    x_t = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
    best = oracle_eps(x_t, t, SCHED, target)
    loss = np.mean((eps - best) ** 2)
    challengers = [np.full(n, c) for c in (-0.5, 0.0, 0.5)]
    challengers += [best * (1 + d) for d in (-0.05, 0.05)] + [best + d * x_t for d in (-0.05, 0.05)]
    for g in challengers:
        assert loss <= np.mean((eps - g) ** 2)


@given(st.integers(1, 50), st.floats(-2, 2), st.floats(0.01, 4), st.integers(0, 1000))
def test_clean_estimate_with_oracle_noise_is_posterior_mean(t, mu, s2, seed):
    target = GaussianTarget(mu, s2)
    x_t = np.random.default_rng(seed).standard_normal(8)
    with T.precision(np.float64):
        est = D.estimate_x0(x_t, oracle_eps(x_t, t, SCHED, target), t, SCHED).data
    np.testing.assert_allclose(est, posterior_mean(x_t, t, SCHED, target), atol=1e-5)


def test_exact_moments_from_true_marginal_are_close():
    target = GaussianTarget(1.0, 0.5)
    ab = SCHED.alpha_bar[-1]
    m, v = linear_gaussian_moments(target, SCHED, math.sqrt(ab) * 1.0, ab * 0.5 + 1 - ab)
    assert m == pytest.approx(1.0, rel=1e-9)
    assert v == pytest.approx(0.5, rel=0.02)


def test_sampler_start_options():
    with pytest.raises(ValueError):
        oracle_sample(GaussianTarget(), SCHED, 2, start="middle")


def test_fd_quadratic():
    rep = finite_diff_check(lambda p: T.sum(p["p"] * p["p"]), {"p": np.array([1.0, 2.0, 3.0])})
    assert rep.max_rel_err < 1e-6
    assert rep.n_checked == 3 and rep.passed


def test_fd_catches_wrong_gradient():
    def bad_square(a):
        a = T._t(a)
        return T._make(a.data**2, "bad_square", (a,), lambda g: (g * a * 3.0,))

    rep = finite_diff_check(lambda p: T.sum(bad_square(p["p"])), {"p": np.array([1.0, 2.0])})
    assert not rep.passed and rep.worst[0] == "p"


def test_fd_samples_coordinates_of_large_parameters():
    p = {"a": np.ones(1000), "b": np.ones(10)}
    rep = finite_diff_check(lambda q: T.sum(q["a"] * 2) + T.sum(q["b"]), p, max_coords=50)
    assert rep.n_checked <= 52 and rep.passed


@pytest.mark.filterwarnings("ignore:invalid value encountered in log")
def test_fd_non_finite_loss_is_diagnosed():
    with pytest.raises(NonFiniteLossError):
        finite_diff_check(lambda p: T.sum(T.log(p["p"])), {"p": np.array([-1.0])})
