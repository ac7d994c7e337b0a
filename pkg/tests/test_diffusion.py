import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reladiff import diffusion as D
from reladiff import nn
from reladiff import tensor as T
from reladiff.errors import ConfigError, ContractError
from reladiff.oracle import GaussianTarget, linear_gaussian_moments, oracle_eps, oracle_sample


def test_paper_endpoints():
    s = D.make_schedule(1000, 0.0005, 0.0195)
    assert s.beta[0] == 0.0005 and s.beta[999] == 0.0195
    assert np.all(np.diff(s.beta) > 0)


def test_two_step_alpha_bar():
    np.testing.assert_allclose(D.make_schedule(2, 0.1, 0.1).alpha_bar, [0.9, 0.81], rtol=1e-12)


def test_single_step():
    s = D.make_schedule(1, 0.02, 0.02)
    assert s.alpha_bar[0] == pytest.approx(0.98)


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_bad_schedule_bounds(args):
    with pytest.raises(ConfigError):
        D.make_schedule(*args)


def test_bad_sigma_kind():
    with pytest.raises(ConfigError, match="sigma_kind"):
        D.make_schedule(10, sigma_kind="learned")


@given(st.integers(1, 400), st.floats(1e-4, 0.05), st.floats(0, 0.5), st.sampled_from(D.SIGMA_KINDS))
def test_schedule_invariants(steps, b1, extra, kind):
    s = D.make_schedule(steps, b1, min(b1 + extra, 0.9), kind)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] == pytest.approx(1 - s.beta[0])
    assert np.all(s.sigma >= 0)


def test_timestep_indexing_is_one_based():
    s = D.make_schedule(5)
    assert s.index(1) == 0 and s.index(5) == 4
    for bad in (0, 6, -1):
        with pytest.raises(ContractError):
            s.index(bad)


def test_q_sample_examples():
    s = D.make_schedule(2, 0.1, 0.1)
    eps = np.array([0.3, -1.2])
    x_t = D.q_sample(np.zeros(2), 1, eps, s).data
    np.testing.assert_allclose(x_t, math.sqrt(0.1) * eps, rtol=1e-6)
    x0 = np.array([1.0, -0.5])
    np.testing.assert_allclose(D.q_sample(x0, 2, np.zeros(2), s).data, 0.9 * x0, rtol=1e-6)
    with pytest.raises(ContractError):
        D.q_sample(x0, 3, eps, s)


def test_q_sample_monte_carlo_marginal():
    s = D.make_schedule(200)
    t, x0 = 80, 0.7
    eps = np.random.default_rng(0).standard_normal(100_000)
    with T.precision(np.float64):
        x_t = D.q_sample(np.full(eps.shape, x0), t, eps, s).data
    ab = s.alpha_bar[t - 1]
    mean, sd = math.sqrt(ab) * x0, math.sqrt(1 - ab)
    n = x_t.size
    assert abs(x_t.mean() - mean) < 3 * sd / math.sqrt(n)
    assert abs(x_t.std() - sd) < 3 * sd / math.sqrt(2 * n)


def test_variance_preservation():
    s = D.make_schedule(50)
    r = np.random.default_rng(1)
    n, var0 = 100_000, 0.3
    x0 = r.normal(0.2, math.sqrt(var0), n)
    for t in (1, 25, 50):
        with T.precision(np.float64):
            x_t = D.q_sample(x0, t, r.standard_normal(n), s).data
        ab = s.alpha_bar[t - 1]
        want = ab * var0 + 1 - ab
        assert abs(x_t.var() - want) < 3 * want * math.sqrt(2 / n)


def test_estimate_x0_examples():
    s = D.make_schedule(20)
    x_t = np.array([0.4, -1.0])
    np.testing.assert_allclose(D.estimate_x0(x_t, np.zeros(2), 7, s).data,
                               x_t / math.sqrt(s.alpha_bar[6]), rtol=1e-6)
    # a schedule with alpha_bar = 0.25 at t = 1
    quarter = D.make_schedule(1, 0.75, 0.75)
    val = D.estimate_x0(np.array([1.0]), np.array([0.5]), 1, quarter).item()
    assert val == pytest.approx(2 - math.sqrt(0.75), abs=1e-6)


def test_estimate_x0_is_differentiable_in_eps_hat():
    s = D.make_schedule(10)
    e = T.parameter(np.zeros(3))
    (g,) = T.grad(T.sum(D.estimate_x0(np.ones(3), e, 4, s)), [e])
    np.testing.assert_allclose(g.data, -math.sqrt(1 - s.alpha_bar[3]) / math.sqrt(s.alpha_bar[3]), rtol=1e-6)


@given(st.sampled_from([2, 50, 1000]), st.sampled_from([0.0, 0.25, 0.5, 1.0]), st.integers(0, 2**16))
def test_round_trip(steps, frac, seed):
    s = D.make_schedule(steps)
    t = max(1, int(steps * frac))
    r = np.random.default_rng(seed)
    x0, eps = r.uniform(-1, 1, 16), r.standard_normal(16)
    with T.precision(np.float64):
        back = D.estimate_x0(D.q_sample(x0, t, eps, s), eps, t, s).data
    assert np.abs(back - x0).max() <= 1e-5


def test_single_step_chain_reconstructs():
    s = D.make_schedule(1, 0.0005, 0.0005)
    x_t = D.q_sample(np.array([1.0]), 1, np.array([0.2]), s)
    out = D.p_sample_step(x_t, np.array([0.2]), 1, None, s)
    assert out.item() == pytest.approx(1.0, abs=1e-6)


def test_reverse_step_without_noise_prediction():
    s = D.make_schedule(10)
    x = np.array([0.3, -2.0])
    np.testing.assert_allclose(D.p_sample_step(x, np.zeros(2), 5, np.zeros(2), s).data,
                               x / math.sqrt(s.alpha[4]), rtol=1e-6)


def test_nonzero_noise_at_last_step_rejected():
    s = D.make_schedule(10)
    with pytest.raises(ContractError):
        D.p_sample_step(np.zeros(2), np.zeros(2), 1, np.ones(2), s)
    D.p_sample_step(np.zeros(2), np.zeros(2), 1, np.zeros(2), s)


@given(st.integers(2, 200), st.floats(-2, 2), st.floats(-2, 2))
def test_reverse_step_mean_equals_forward_posterior_mean(t, x0, eps):
    s = D.make_schedule(200)
    i = t - 1
    ab, ab_prev, a, b = s.alpha_bar[i], s.alpha_bar[i - 1], s.alpha[i], s.beta[i]
    with T.precision(np.float64):
        x_t = D.q_sample(np.array([x0]), t, np.array([eps]), s)
        step = D.p_sample_step(x_t, np.array([eps]), t, np.zeros(1), s).item()
    post = math.sqrt(ab_prev) * b / (1 - ab) * x0 + math.sqrt(a) * (1 - ab_prev) / (1 - ab) * x_t.item()
    assert step == pytest.approx(post, rel=1e-9, abs=1e-9)


def test_posterior_sigma():
    s = D.make_schedule(10, sigma_kind="posterior")
    i = 4
    want = math.sqrt(s.beta[i] * (1 - s.alpha_bar[i - 1]) / (1 - s.alpha_bar[i]))
    assert s.sigma[i] == pytest.approx(want)
    assert np.all(D.make_schedule(10).sigma == np.sqrt(D.make_schedule(10).beta))


def test_oracle_chain_matches_target():
    # endpoints scaled by 1000 / T so the chain starts from (nearly) pure noise
    s = D.scaled_schedule(50)
    assert (s.beta[0], s.beta[-1]) == pytest.approx((0.01, 0.39))
    target = GaussianTarget(1.0, 0.5)
    x = oracle_sample(target, s, 2000)
    assert abs(x.mean() - 1.0) <= 0.05
    assert abs(x.var() - 0.5) <= 0.05 * 0.5


@pytest.mark.parametrize("steps", [20, 50, 200, 1000])
def test_scaled_schedule_ends_near_pure_noise(steps):
    s = D.scaled_schedule(steps)
    assert s.alpha_bar[-1] < 1e-4
    assert np.sum(s.beta) == pytest.approx(10.0, rel=1e-12)


def test_scaled_schedule_is_identity_at_reference_length():
    a, b = D.scaled_schedule(1000), D.make_schedule(1000)
    assert np.array_equal(a.beta, b.beta) and (a.beta[0], a.beta[-1]) == (0.0005, 0.0195)


def test_scaled_schedule_rejects_too_few_steps():
    with pytest.raises(ConfigError, match="beta_ref_steps"):
        D.scaled_schedule(19)


def test_fixed_endpoint_chain_from_true_marginal_matches_target():
    s = D.make_schedule(50)
    target = GaussianTarget(1.0, 0.5)
    x = oracle_sample(target, s, 2000, start="marginal")
    assert abs(x.mean() - 1.0) <= 0.05
    assert abs(x.var() - 0.5) <= 0.05 * 0.5


def test_fixed_endpoint_chain_from_noise_agrees_with_exact_recursion():
    # short schedules keep alpha_bar_T far from 0, so an N(0, I) start is biased;
    # the sampler must reproduce exactly the bias the linear recursion predicts
    s = D.make_schedule(50)
    target = GaussianTarget(1.0, 0.5)
    m, v = linear_gaussian_moments(target, s)
    x = oracle_sample(target, s, 2000)
    n = x.size
    assert abs(x.mean() - m) < 4 * math.sqrt(v / n) + 1e-4
    assert abs(x.var() - v) < 4 * v * math.sqrt(2 / n)
    assert abs(m - 1.0) > 0.05  # the bias is real


def test_sample_is_deterministic_and_shaped():
    cfg = nn.GeneratorConfig(base_width=4, depth=2, embed_dim=4)
    p = nn.build_generator(cfg, 0, zero_final=False)
    s = D.make_schedule(5)
    cond = np.random.default_rng(0).uniform(-1, 1, (2, 16, 16)).astype(np.float32)
    a = D.sample(p, cond, 1, s, seed=3, cfg=cfg)
    b = D.sample(p, cond, 1, s, seed=3, cfg=cfg)
    assert a.data.shape == (1, 16, 16)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.min() >= 0 and a.data.max() <= 1
    c = D.sample(p, cond, 1, s, seed=4, cfg=cfg)
    assert c.data.tobytes() != a.data.tobytes()


def test_sample_batch_returns_one_volume_per_condition():
    cfg = nn.GeneratorConfig(base_width=4, depth=2, embed_dim=4)
    p = nn.build_generator(cfg, 0)
    cond = np.zeros((3, 2, 8, 8), dtype=np.float32)
    vols = D.sample(p, cond, [0, 1, 2], D.make_schedule(3), seed=0, cfg=cfg)
    assert [v.meta["tracer"] for v in vols] == [0, 1, 2]


def test_oracle_substituted_into_ancestral_sampler():
    s = D.make_schedule(50, 0.01, 0.39)
    target = GaussianTarget(-0.5, 0.2)
    x = D.ancestral_sample(lambda x, t: oracle_eps(x, t, s, target), (2000, 4, 4), s, np.random.default_rng(1))
    assert abs(x.mean() + 0.5) <= 0.05 * 0.5
    assert abs(x.var() - 0.2) <= 0.05 * 0.2
