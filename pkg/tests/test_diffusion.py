import math

import numpy as np
import pytest

import trafficdiff.diffusion as df
from trafficdiff.diffusion import DiffusionConfig


@pytest.fixture(scope="module")
def log_sched():
    return df.build_log_schedule(DiffusionConfig())


@pytest.fixture(scope="module")
def cos_sched():
    return df.build_cosine_schedule(DiffusionConfig())


def test_log_schedule_endpoints(log_sched):
    assert log_sched.alpha_bar[0] == pytest.approx(1.0, abs=1e-12)
    assert log_sched.alpha_bar[-1] == pytest.approx(1e-9)


def test_log_schedule_midpoint(log_sched):
    # numeric oracle: ln(50.155/25.155) / ln(50.155/0.155)
    expect = math.log(50.155 / 25.155) / math.log(50.155 / 0.155)
    assert log_sched.alpha_bar[25] == pytest.approx(expect, abs=1e-12)
    assert abs(log_sched.alpha_bar[25] - 0.119) < 1e-3


def test_cosine_schedule_endpoints(cos_sched):
    assert cos_sched.alpha_bar[0] == pytest.approx(1.0, abs=1e-12)
    # raw value at K is cos(pi/2)^2 = 0 before the floor clamp
    K, s = 50, 0.008
    raw = math.cos((1 + s) / (1 + s) * math.pi / 2) ** 2
    assert raw == pytest.approx(0.0, abs=1e-12)
    assert cos_sched.alpha_bar[-1] >= 1e-9


def test_cosine_schedule_midpoint(cos_sched):
    K, s = 50, 0.008
    f = lambda k: math.cos((k / K + s) / (1 + s) * math.pi / 2) ** 2
    assert cos_sched.alpha_bar[25] == pytest.approx(f(25) / f(0), abs=1e-12)
    assert abs(cos_sched.alpha_bar[25] - 0.494) < 1e-3


def test_schedules_strictly_decreasing(log_sched, cos_sched):
    assert np.all(np.diff(log_sched.alpha_bar) < 0)
    assert np.all(np.diff(cos_sched.alpha_bar) < 0)


def test_schedule_validation_passes(log_sched, cos_sched):
    log_sched.validate()
    cos_sched.validate()


def test_beta_range(log_sched, cos_sched):
    for s in (log_sched, cos_sched):
        assert np.all(s.beta[1:] > 0)
        assert np.all(s.beta[1:] <= 0.999)


def test_q_sample_limits(log_sched):
    rng = np.random.default_rng(0)
    u = rng.normal(0, 1, (2, 5, 2))
    eps = rng.normal(0, 1, u.shape)
    np.testing.assert_allclose(df.q_sample(u, 0, eps, log_sched), u)  # abar_0 = 1
    almost_eps = df.q_sample(u, 50, eps, log_sched)
    np.testing.assert_allclose(almost_eps, eps, atol=1e-3)  # abar_K ~ 0


def test_q_sample_arithmetic():
    sched = df.build_log_schedule(DiffusionConfig())
    sched.alpha_bar[3] = 0.25  # direct arithmetic check
    out = df.q_sample(np.array(1.0), 3, np.array(0.0), sched)
    assert float(out) == pytest.approx(0.5)


def test_q_sample_rejects_bad_k(log_sched):
    with pytest.raises(df.ScheduleError):
        df.q_sample(np.zeros(2), 51, np.zeros(2), log_sched)


def test_q_sample_moments(log_sched):
    rng = np.random.default_rng(1)
    u = np.full((20000,), 2.0)
    k = 25
    out = df.q_sample(u, k, rng.standard_normal(u.shape), log_sched)
    ab = log_sched.alpha_bar[k]
    assert out.mean() == pytest.approx(math.sqrt(ab) * 2.0, abs=0.02)
    assert out.var() == pytest.approx(1 - ab, rel=0.05)


def test_posterior_mean_k1_returns_clean(log_sched):
    rng = np.random.default_rng(2)
    u_noised = rng.normal(0, 1, (3, 4))
    u_hat = rng.normal(0, 1, (3, 4))
    np.testing.assert_allclose(df.posterior_mean(u_noised, u_hat, 1, log_sched), u_hat, atol=1e-9)


def test_posterior_mean_rejects_k0(log_sched):
    with pytest.raises(df.ScheduleError):
        df.posterior_mean(np.zeros(2), np.zeros(2), 0, log_sched)


def test_posterior_coefficients_identity(log_sched):
    """mu when u_hat == u_noised scales by the analytic coefficient sum."""
    for k in range(1, 51):
        ab_k = log_sched.alpha_bar[k]
        ab_p = log_sched.alpha_bar[k - 1]
        beta = log_sched.beta[k]
        alpha = log_sched.alpha[k]
        csum = (math.sqrt(ab_p) * beta + math.sqrt(alpha) * (1 - ab_p)) / (1 - ab_k)
        u = np.ones((2, 2))
        np.testing.assert_allclose(df.posterior_mean(u, u, k, log_sched), csum * u, atol=1e-9)


def test_ddpm_step_sigma_zero_returns_mean(log_sched):
    rng = np.random.default_rng(3)
    u = rng.normal(0, 1, (2, 3))
    u_hat = rng.normal(0, 1, (2, 3))
    out = df.ddpm_step(u, u_hat, 1, log_sched, np.random.default_rng(0))
    np.testing.assert_allclose(out, df.posterior_mean(u, u_hat, 1, log_sched))
    assert log_sched.sigma[1] == pytest.approx(0.0, abs=1e-12)


def test_ddpm_step_seed_reproducible(log_sched):
    u = np.ones((2, 3))
    u_hat = np.zeros((2, 3))
    a = df.ddpm_step(u, u_hat, 20, log_sched, np.random.default_rng(5))
    b = df.ddpm_step(u, u_hat, 20, log_sched, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_ddpm_step_empirical_variance(log_sched):
    k = 20
    u = np.zeros(10_000)
    u_hat = np.zeros(10_000)
    out = df.ddpm_step(u, u_hat, k, log_sched, np.random.default_rng(6))
    assert out.var() == pytest.approx(log_sched.sigma[k] ** 2, rel=0.10)


def test_ddim_step_to_alpha_one_returns_clean(log_sched):
    rng = np.random.default_rng(7)
    u_hat = rng.normal(0, 1, (2, 3))
    u = rng.normal(0, 1, (2, 3))
    out = df.ddim_step(u, u_hat, 5, 0, log_sched)  # abar_0 = 1
    np.testing.assert_allclose(out, u_hat, atol=1e-9)


def test_ddim_reproduces_q_sample_noise(log_sched):
    """If u_k came from q_sample(u, k, eps) and the denoiser is exact, the DDIM
    step lands exactly on q_sample(u, k_prev, eps)."""
    rng = np.random.default_rng(8)
    u = rng.normal(0, 1, (3, 4))
    eps = rng.normal(0, 1, (3, 4))
    for k, k_prev in [(50, 40), (30, 10), (10, 1)]:
        u_k = df.q_sample(u, k, eps, log_sched)
        out = df.ddim_step(u_k, u, k, k_prev, log_sched)
        np.testing.assert_allclose(out, df.q_sample(u, k_prev, eps, log_sched), atol=1e-9)


def test_ddim_stride_uniform():
    pairs = df.ddim_stride(50, 5)
    assert pairs == [(50, 40), (40, 30), (30, 20), (20, 10), (10, 0)]


def test_ddim_full_stride_equals_deterministic_ddpm(log_sched):
    """DDIM with unit strides equals the sigma=0 DDPM trajectory for the same
    denoiser."""
    rng = np.random.default_rng(9)
    target = rng.normal(0, 1, (2, 4, 2))
    denoiser = lambda u, k: target
    u0 = np.random.default_rng(10).standard_normal(target.shape)
    u_ddim = u0.copy()
    for k, k_prev in df.ddim_stride(50, 50):
        u_ddim = df.ddim_step(u_ddim, denoiser(u_ddim, k), k, k_prev, log_sched)
    u_ddpm = u0.copy()
    for k in range(50, 0, -1):
        u_ddpm = df.posterior_mean(u_ddpm, denoiser(u_ddpm, k), k, log_sched)
    np.testing.assert_allclose(u_ddim, u_ddpm, atol=1e-6)


def test_sample_with_oracle_denoiser_converges(log_sched):
    target = np.full((2, 5, 2), 0.7)
    out = df.sample(lambda u, k: target, target.shape, log_sched, np.random.default_rng(11))
    np.testing.assert_allclose(out, target, atol=1e-6)


def test_sample_seed_determinism(log_sched):
    target = np.zeros((1, 4, 2))
    f = lambda u, k: 0.5 * u
    a = df.sample(f, target.shape, log_sched, np.random.default_rng(12))
    b = df.sample(f, target.shape, log_sched, np.random.default_rng(12))
    assert np.array_equal(a, b)
    c = df.sample(f, target.shape, log_sched, np.random.default_rng(12), sampler="ddim:5")
    d = df.sample(f, target.shape, log_sched, np.random.default_rng(12), sampler="ddim:5")
    assert np.array_equal(c, d)
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(c))


def test_schedule_csv_dump(log_sched):
    text = log_sched.to_csv()
    lines = text.strip().splitlines()
    assert lines[0] == "k,alpha_bar,beta,sigma"
    assert lines[1].startswith("0,1.0,")
    assert len(lines) == 52


def test_log_below_cosine_through_bulk(log_sched, cos_sched):
    """The log schedule sits at lower alpha_bar (more noise) than cosine through
    the bulk of the range; near k=K the cosine curve dives to zero faster and
    the pointwise ordering genuinely inverts (k >= 47 at the defaults)."""
    ratio = log_sched.alpha_bar[1:47] / cos_sched.alpha_bar[1:47]
    assert np.all(ratio < 1.0)
    assert np.all(log_sched.alpha_bar[47:50] > cos_sched.alpha_bar[47:50])
