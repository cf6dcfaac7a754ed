from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundlens.errors import ArgumentError, DimensionError
from groundlens.scheduler import NoiseSchedule, ddim_denoise_step, ddim_invert_step, make_schedule
from oracles import alpha_bar_ref


def test_single_step_linear():
    np.testing.assert_array_equal(make_schedule(1, 0.5, 0.5, "linear").alpha_bar, [1.0, 0.5])


@pytest.mark.parametrize("style", ["linear", "scaled_linear"])
def test_defaults_match_cumulative_product(style):
    s = make_schedule(style=style)
    ref = alpha_bar_ref(300, 0.0015, 0.0205, style)
    np.testing.assert_allclose(s.alpha_bar, ref, rtol=0, atol=1e-7)
    assert s.total_steps == 300


def test_default_values():
    ab = make_schedule().alpha_bar
    assert ab[0] == 1.0
    assert (np.diff(ab) < 0).all()
    assert ab[120] == pytest.approx(0.642, abs=1e-3)
    assert ab[180] == pytest.approx(0.389, abs=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.floats(1e-5, 0.2), st.floats(0, 0.5), st.sampled_from(["linear", "scaled_linear"]))
def test_any_valid_schedule_decreases(T, b0, extra, style):
    s = make_schedule(T, b0, min(b0 + extra, 0.9), style)
    assert (np.diff(s.alpha_bar) < 0).all()
    assert (s.alpha_bar > 0).all()


@pytest.mark.parametrize(
    "args",
    [(0, 0.1, 0.2, "linear"), (10, 0.0, 0.2, "linear"), (10, 0.3, 0.2, "linear"), (10, 0.1, 1.0, "linear"), (10, 0.1, 0.2, "cosine")],
)
def test_invalid_schedule(args):
    with pytest.raises(ArgumentError):
        make_schedule(*args)


def test_schedule_validation():
    with pytest.raises(ArgumentError):
        NoiseSchedule(2, np.array([1.0, 0.5]))
    with pytest.raises(ArgumentError):
        NoiseSchedule(2, np.array([1.0, 0.5, 0.6]))


def test_identity_when_alpha_bar_constant():
    flat = SimpleNamespace(total_steps=3, alpha_bar=np.array([1.0, 0.7, 0.7, 0.7]))
    rng = np.random.default_rng(0)
    z, eps = rng.normal(size=(2, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(ddim_invert_step(z, eps, 1, flat), z, atol=1e-6)
    np.testing.assert_allclose(ddim_denoise_step(z, eps, 1, flat), z, atol=1e-6)


def test_zero_noise_is_a_rescale(sched):
    z = np.random.default_rng(1).normal(size=(4, 8, 8)).astype(np.float32)
    t = 57
    expect = np.sqrt(sched.alpha_bar[t + 1] / sched.alpha_bar[t]) * z
    np.testing.assert_allclose(ddim_invert_step(z, np.zeros_like(z), t, sched), expect, rtol=1e-6)


def test_step_errors(sched):
    z = np.zeros((2, 2), np.float32)
    with pytest.raises(ArgumentError):
        ddim_invert_step(z, z, 300, sched)
    with pytest.raises(ArgumentError):
        ddim_denoise_step(z, z, -1, sched)
    with pytest.raises(DimensionError):
        ddim_invert_step(z, np.zeros((2, 3)), 0, sched)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 299), st.integers(0, 2**32 - 1))
def test_denoise_inverts_invert(sched, t, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, 6, 6)).astype(np.float32)
    eps = rng.normal(size=(4, 6, 6)).astype(np.float32)
    back = ddim_denoise_step(ddim_invert_step(z, eps, t, sched), eps, t, sched)
    assert np.abs(back - z).max() <= 1e-5
