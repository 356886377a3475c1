import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from voldiff.errors import InvalidArgument
from voldiff.schedule import NoiseSchedule, cosine_schedule, skip_subsequence, t_start_for_sigma

S1000 = cosine_schedule(1000)


def test_cosine_tables():
    s = S1000
    assert s.alpha_bar[0] == 1.0
    # pure-python evaluation of the clipped cosine formula at t = T
    assert s.alpha_bar[1000] == pytest.approx(2.4287669070348542e-09, rel=1e-6)
    assert s.alpha_bar[1000] < 1e-3
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(np.diff(s.sigma_bar) > 0)
    b = s.beta[1:]
    assert np.all((b > 0) & (b < 1))
    np.testing.assert_allclose(s.alpha[1:], 1 - b)


def test_cosine_rejects_zero_steps():
    with pytest.raises(InvalidArgument):
        cosine_schedule(0)


@pytest.mark.parametrize("T", [1, 10, 200, 1000])
def test_alpha_bar_sigma_identity(T):
    s = cosine_schedule(T)
    t = np.arange(1, T + 1)
    np.testing.assert_allclose(s.alpha_bar[t] * (1 + s.sigma_bar[t] ** 2), 1.0, rtol=1e-12, atol=0)


def test_t_start_examples():
    s = S1000
    assert t_start_for_sigma(s, s.sigma_bar[1000]) == 1000
    assert t_start_for_sigma(s, 1e6) == 1000
    assert t_start_for_sigma(s, s.sigma_bar[17]) == 17
    # linear scan of the table (independent pure-python schedule): smallest t with sigma_bar >= 0.15
    assert t_start_for_sigma(s, 0.15) == 88
    with pytest.raises(InvalidArgument):
        t_start_for_sigma(s, 0.0)


@pytest.mark.parametrize("T", [50, 1000])
def test_t_start_round_trips_every_table_value(T):
    s = cosine_schedule(T)
    for t in range(1, T + 1):
        assert t_start_for_sigma(s, s.sigma_bar[t]) == t


@given(st.floats(1e-6, 50.0))
def test_t_start_matches_scan(sigma):
    s = cosine_schedule(200)
    scan = next((t for t in range(1, 201) if s.sigma_bar[t] >= sigma), 200)
    assert t_start_for_sigma(s, sigma) == scan


def test_skip_examples():
    s = S1000
    assert skip_subsequence(s, 7, 7) == [7, 6, 5, 4, 3, 2, 1]
    assert skip_subsequence(s, 1, 40) == [40]
    steps = skip_subsequence(s, 5, 10)
    assert steps == [10, 8, 6, 3, 1]
    with pytest.raises(InvalidArgument):
        skip_subsequence(s, 11, 10)
    with pytest.raises(InvalidArgument):
        skip_subsequence(s, 0, 10)


@given(st.integers(1, 1000), st.data())
def test_skip_spacing_property(t_start, data):
    nfe = data.draw(st.integers(1, t_start))
    steps = skip_subsequence(S1000, nfe, t_start)
    assert len(steps) == nfe and steps[0] == t_start
    assert nfe == 1 or steps[-1] == 1
    gaps = -np.diff(steps)
    assert np.all(gaps > 0)
    if len(gaps):
        assert gaps.max() - gaps.min() <= 1
        assert abs(gaps.mean() - (t_start - 1) / (nfe - 1)) < 1e-9


def test_check_t_and_json():
    s = cosine_schedule(20)
    assert s.check_t(0, allow_zero=True) == 0
    for bad in (0, 21, -1):
        with pytest.raises(InvalidArgument):
            s.check_t(bad)
    back = NoiseSchedule.from_json(s.to_json())
    assert np.array_equal(back.alpha_bar, s.alpha_bar)
    assert math.isclose(s.sigma_bar[5], math.sqrt((1 - s.alpha_bar[5]) / s.alpha_bar[5]))
