from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from polypdiff.schedule import (
    NoiseSchedule, forward_diffuse, make_schedule, make_step_schedule, reverse_step,
)


def test_single_step_schedule():
    s = make_schedule("linear", 1, 0.01, 0.01)
    np.testing.assert_allclose(s.betas, [0.01])
    np.testing.assert_allclose(s.alpha_bars, [0.99], rtol=0, atol=1e-15)


def test_constant_beta_closed_form():
    s = make_schedule("linear", 10, 0.1, 0.1)
    assert s.alpha_bars[9] == pytest.approx(0.3486784401, abs=1e-12)


def test_linear_t1000_matches_exact_product():
    s = make_schedule("linear", 1000, 1e-4, 0.02)
    acc = Fraction(1)
    exact = []
    for b in s.betas:
        acc *= 1 - Fraction(float(b))
        exact.append(float(acc))
    np.testing.assert_allclose(s.alpha_bars, exact, rtol=1e-12)
    assert 0 < s.alpha_bars[999] < 1e-3
    np.testing.assert_allclose(s.alpha_bars[1:], s.alpha_bars[:-1] * (1 - s.betas[1:]), rtol=1e-15)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    s = make_schedule(kind, 200, 1e-4, 0.02)
    np.testing.assert_array_equal(s.alphas, 1 - s.betas)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))


@pytest.mark.parametrize("args", [("linear", 0, 1e-4, 0.02), ("linear", 10, 0.0, 0.02),
                                  ("linear", 10, 0.03, 0.02), ("linear", 10, 1e-4, 1.0),
                                  ("quadratic", 10, 1e-4, 0.02)])
def test_make_schedule_rejects(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_schedule_serialises_without_tables():
    s = make_schedule("cosine", 50, 1e-4, 0.02)
    d = s.to_dict()
    assert set(d) == {"kind", "T", "beta_start", "beta_end"}
    np.testing.assert_array_equal(NoiseSchedule.from_dict(d).alpha_bars, s.alpha_bars)


def test_forward_identity_when_betas_zero():
    s = NoiseSchedule.from_betas(np.zeros(5))
    z0 = np.random.default_rng(0).normal(size=(1, 4, 4))
    eps = np.random.default_rng(1).normal(size=z0.shape)
    for t in range(5):
        np.testing.assert_array_equal(forward_diffuse(z0, t, eps, s), z0)


def test_forward_noise_free_branch():
    s = make_schedule()
    z0 = np.linspace(-1, 1, 16).reshape(1, 4, 4)
    out = forward_diffuse(z0, 321, np.zeros_like(z0), s)
    np.testing.assert_allclose(out, np.sqrt(s.alpha_bars[321]) * z0, rtol=0, atol=1e-15)


def test_forward_errors():
    s = make_schedule()
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((1, 4, 4)), 0, np.zeros((1, 4, 5)), s)
    for t in (-1, 1000):
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros((1, 4, 4)), t, np.zeros((1, 4, 4)), s)


def test_forward_per_sample_timesteps_torch():
    s = make_schedule()
    z0 = torch.ones(3, 1, 2, 2, dtype=torch.float64)
    eps = torch.zeros_like(z0)
    out = forward_diffuse(z0, torch.tensor([0, 10, 999]), eps, s)
    for k, t in enumerate((0, 10, 999)):
        assert torch.allclose(out[k], torch.full((1, 2, 2), np.sqrt(s.alpha_bars[t]), dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), t=st.integers(0, 999), seed=st.integers(0, 2**16))
def test_forward_is_linear(a, t, seed):
    s = make_schedule()
    rng = np.random.default_rng(seed)
    z0, eps = rng.normal(size=(2, 1, 3, 3))
    lhs = forward_diffuse(a * z0, t, a * eps, s)
    np.testing.assert_allclose(lhs, a * forward_diffuse(z0, t, eps, s), rtol=1e-12, atol=1e-12)


def test_step_schedule_examples():
    np.testing.assert_array_equal(make_step_schedule(1000, 1), [999, 0])
    s10 = make_step_schedule(1000, 10)
    assert len(s10) == 11 and s10[0] == 999 and s10[-1] == 0 and np.all(np.diff(s10) < 0)
    np.testing.assert_array_equal(make_step_schedule(8, 4), [7, 5, 4, 2, 0])


@settings(max_examples=100, deadline=None)
@given(T=st.integers(2, 2000), data=st.data())
def test_step_schedule_strictly_decreasing(T, data):
    K = data.draw(st.integers(1, T - 1))
    steps = make_step_schedule(T, K)
    assert len(steps) == K + 1 and steps[0] == T - 1 and steps[-1] == 0
    assert np.all(np.diff(steps) < 0)


def test_step_schedule_rejects_too_many_steps():
    with pytest.raises(ValueError):
        make_step_schedule(10, 11)
    with pytest.raises(ValueError):
        make_step_schedule(10, 0)


@settings(max_examples=60, deadline=None)
@given(t=st.integers(1, 999), data=st.data(), seed=st.integers(0, 2**16))
def test_reverse_step_oracle_consistency(t, data, seed):
    t_prev = data.draw(st.integers(0, t - 1))
    s = make_schedule()
    rng = np.random.default_rng(seed)
    z0, eps = rng.uniform(-1, 1, size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    z_t = forward_diffuse(z0, t, eps, s)
    np.testing.assert_allclose(reverse_step(z_t, z0, t, t_prev, s), forward_diffuse(z0, t_prev, eps, s),
                               rtol=1e-9, atol=1e-9)


def test_reverse_step_terminal_and_errors():
    s = make_schedule()
    z = np.ones((1, 2, 2))
    z0_hat = np.full((1, 2, 2), 0.3)
    np.testing.assert_array_equal(reverse_step(z, z0_hat, 5, -1, s), z0_hat)
    with pytest.raises(ValueError):
        reverse_step(z, z0_hat, 5, 5, s)
    with pytest.raises(ValueError):
        reverse_step(z * np.nan, z0_hat, 5, 2, s)


def test_oracle_chain_recovers_z0():
    s = make_schedule()
    rng = np.random.default_rng(3)
    z0 = rng.choice([-1.0, 0.5, 1.0], size=(1, 8, 8))
    for K in (1, 5, 10, 50):
        steps = make_step_schedule(s.T, K)
        z = rng.normal(size=z0.shape)
        for k, t in enumerate(steps):
            z = reverse_step(z, z0, t, steps[k + 1] if k + 1 < len(steps) else -1, s)
        np.testing.assert_allclose(z, z0, rtol=1e-6)


def test_stochastic_step_needs_noise_and_eta_zero_matches():
    s = make_schedule()
    rng = np.random.default_rng(0)
    z, z0 = rng.normal(size=(2, 1, 4, 4))
    with pytest.raises(ValueError):
        reverse_step(z, z0, 500, 400, s, eta=1.0)
    out = reverse_step(z, z0, 500, 400, s, eta=1.0, noise=np.zeros_like(z))
    assert np.all(np.isfinite(out))
    assert not np.allclose(out, reverse_step(z, z0, 500, 400, s))
