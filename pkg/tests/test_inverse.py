import numpy as np
import pytest
from hypothesis import given, strategies as st

from voldiff.denoiser import AnalyticGaussianDenoiser
from voldiff.errors import InvalidArgument, ShapeError
from voldiff.inverse import (DegradationOps, estimate_sigma, init_from_observation, proximal_denoise,
                             proximal_sr, restore, rho, slab_mean)
from voldiff.schedule import cosine_schedule, t_start_for_sigma

S = cosine_schedule(1000)
MU, VAR, SIGMA = 0.3, 0.04, 0.15
BOUND = VAR * SIGMA ** 2 / (VAR + SIGMA ** 2)


class Unit:
    """Schedule stand-in whose sigma_bar is 1 at t=1 and shrinks later."""
    sigma_bar = np.array([0.0, 1.0, 0.5])
    T = 2

    def check_t(self, t, allow_zero=False):
        return int(t)


def test_rho_examples():
    assert rho(Unit(), 1, 10.0, 0.15) == pytest.approx(0.225)
    assert rho(Unit(), 2, 1.0, 0.5) == pytest.approx(1.0)
    values = [rho(S, t, 10.0, 0.15) for t in range(1000, 0, -50)]
    assert all(a < b for a, b in zip(values, values[1:]))
    with pytest.raises(InvalidArgument):
        rho(S, 10, 0.0, 0.15)


def test_proximal_denoise_examples(rng):
    y = rng.standard_normal((3, 3, 3))
    np.testing.assert_allclose(proximal_denoise(y, rng.standard_normal(y.shape), 1e-12), y, atol=1e-10)
    assert proximal_denoise(np.zeros(1), np.full(1, 2.0), 1.0)[0] == 1.0
    np.testing.assert_allclose(proximal_denoise(y, y, 3.7), y)
    with pytest.raises(ShapeError):
        proximal_denoise(y, y[:2], 1.0)


def test_sr_operator_contracts(rng):
    ops = DegradationOps("sr", sf=5, sigma_n=1.0, lam=1.0)
    y = rng.standard_normal((3, 4, 4))
    assert np.array_equal(ops.H(ops.H_up(y)), y)
    x = rng.standard_normal((15, 4, 4))
    lhs = np.sum(ops.H(x) * y)
    rhs = np.sum(x * ops.H_up(y)) / 5
    assert lhs == pytest.approx(rhs, rel=1e-6)
    assert ops.hr_shape((3, 4, 4)) == (15, 4, 4)
    with pytest.raises(ShapeError):
        slab_mean(np.zeros((7, 2, 2)), 5)
    with pytest.raises(InvalidArgument):
        DegradationOps("blur")


def test_proximal_sr_examples(rng):
    ops = DegradationOps("sr", sf=5, sigma_n=1.0, lam=1.0)
    x = rng.standard_normal((10, 3, 3))
    np.testing.assert_allclose(proximal_sr(ops.H(x), x, 0.4, ops), x, atol=1e-12)
    c, delta = 0.25, 0.1
    out = proximal_sr(np.full((2, 3, 3), c + delta), np.full((10, 3, 3), c), 0.0, ops)
    np.testing.assert_allclose(out, c + delta)
    one = DegradationOps("sr", sf=1, sigma_n=1.0, lam=1.0)
    y = rng.standard_normal(x.shape)
    np.testing.assert_allclose(proximal_sr(y, x, 0.7, one), x + (y - x) / 1.7)
    with pytest.raises(ShapeError):
        proximal_sr(np.zeros((3, 3, 3)), x, 0.1, ops)
    with pytest.raises(ShapeError):
        proximal_sr(np.zeros((2, 3, 3)), x[:7], 0.1, ops)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_h_right_inverse_property(sf, depth, seed):
    ops = DegradationOps("sr", sf=sf, sigma_n=1.0, lam=1.0)
    y = np.random.default_rng(seed).standard_normal((depth, 2, 3))
    assert np.array_equal(ops.H(ops.H_up(y)), y)


def test_init_from_observation(rng):
    y = rng.standard_normal((2, 2, 2))
    x, t = init_from_observation(y, S, 0.15)
    assert t == t_start_for_sigma(S, 0.15)
    np.testing.assert_allclose(x, y / np.sqrt(1 + S.sigma_bar[t] ** 2), rtol=1e-12)
    np.testing.assert_allclose(x, y / np.sqrt(1 + 0.15 ** 2), rtol=2e-3)
    x, t = init_from_observation(y, S, 1e6)
    assert t == S.T and np.allclose(x, np.sqrt(S.alpha_bar[S.T]) * y)
    assert not init_from_observation(np.zeros(3), S, 0.3)[0].any()


def gaussian_case(seed, shape=(16, 16, 16)):
    rng = np.random.default_rng(seed)
    x0 = MU + np.sqrt(VAR) * rng.standard_normal(shape)
    return x0, x0 + SIGMA * rng.standard_normal(shape)


@pytest.mark.parametrize("nfe", [1, 2, 3])
def test_restore_meets_posterior_bound(nfe):
    x0, y = gaussian_case(nfe)
    d = AnalyticGaussianDenoiser(MU, VAR, S)
    out = restore(d, None, y, DegradationOps(sigma_n=SIGMA, lam=10.0), S, nfe=nfe, zeta=0.0,
                  rng=np.random.default_rng(0))
    assert np.mean((out - x0) ** 2) <= 1.1 * BOUND


def test_restore_tiny_noise_returns_observation():
    x0, _ = gaussian_case(3, (6, 6, 6))
    y = x0 + 1e-4 * np.random.default_rng(4).standard_normal(x0.shape)
    d = AnalyticGaussianDenoiser(MU, VAR, S)
    out = restore(d, None, y, DegradationOps(sigma_n=1e-4, lam=10.0), S, rng=np.random.default_rng(1))
    assert np.abs(out - y).max() <= 1e-2


def test_restore_deterministic_and_validates():
    _, y = gaussian_case(5, (6, 6, 6))
    d = AnalyticGaussianDenoiser(MU, VAR, S)
    ops = DegradationOps(sigma_n=SIGMA, lam=10.0)
    a = restore(d, None, y, ops, S, nfe=5, rng=np.random.default_rng(2))
    b = restore(d, None, y, ops, S, nfe=5, rng=np.random.default_rng(2))
    assert np.array_equal(a, b)
    with pytest.raises(InvalidArgument):
        restore(d, None, y, ops, S, zeta=1.5)
    with pytest.raises(InvalidArgument):
        restore(d, None, y, ops, S, nfe=0)


def test_sr_restore_recovers_slab_means():
    s = cosine_schedule(100)
    rng = np.random.default_rng(6)
    x0 = MU + np.sqrt(VAR) * rng.standard_normal((10, 6, 6))
    ops = DegradationOps("sr", sf=5, sigma_n=0.01, lam=1.0)
    y = ops.H(x0)
    out = restore(AnalyticGaussianDenoiser(MU, VAR, s), None, y, ops, s, nfe=20, rng=rng)
    assert out.shape == x0.shape
    # data consistency pulls slab means towards the observation
    assert np.mean((ops.H(out) - y) ** 2) < np.mean((ops.H(np.full_like(x0, MU)) - y) ** 2)


@pytest.mark.xfail(strict=True, reason="full fresh-noise back-diffusion accumulates error beyond the 1.1x bound")
def test_restore_full_range_fresh_noise_within_bound():
    x0, y = gaussian_case(7)
    d = AnalyticGaussianDenoiser(MU, VAR, S)
    out = restore(d, None, y, DegradationOps(sigma_n=SIGMA, lam=10.0), S,
                  nfe=t_start_for_sigma(S, SIGMA), zeta=1.0, rng=np.random.default_rng(0))
    assert np.mean((out - x0) ** 2) <= 1.1 * BOUND


def test_estimate_sigma_on_smooth_volume():
    rng = np.random.default_rng(9)
    z, y, x = np.meshgrid(*(np.linspace(0, 1, 32),) * 3, indexing="ij")
    clean = 0.2 * np.sin(2 * z) + 0.1 * x
    assert estimate_sigma(clean + 0.15 * rng.standard_normal(clean.shape)) == pytest.approx(0.15, rel=0.1)
