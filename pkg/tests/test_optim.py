import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trunksnn.errors import NonFiniteGradientError, ShapeError
from trunksnn.optim import (
    Hyper,
    OptimizerState,
    adam_step,
    amsgrad_step,
    get_optimizer,
    lr_schedule,
    sd_amsgrad_step,
    sd_momentum_step,
    step_size_decay,
)


def scripted(grads, eta=0.01, b1=0.9, b2=0.999, b3=0.9, eps=1e-8, kind="sd-amsgrad", theta0=0.0):
    """Plain-Python scalar replay of the update rules, one step at a time."""
    theta, m, v, vmax, s = theta0, 0.0, 0.0, 0.0, 0.0
    p1 = p2 = p3 = 1.0
    out, s_hats = [], []
    for g in grads:
        p1 *= b1
        p2 *= b2
        p3 *= b3
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        g = float(g)
        sign = (g > 0) - (g < 0)
        s = b3 * s + (1 - b3) * sign
        vmax = max(vmax, v)
        m_hat, s_hat = m / (1 - p1), s / (1 - p3)
        s_hats.append(s_hat)
        if kind == "sd-amsgrad":
            theta -= eta * s_hat**2 * m_hat / (math.sqrt(vmax / (1 - p2)) + eps)
        elif kind == "amsgrad":
            theta -= eta * m_hat / (math.sqrt(vmax / (1 - p2)) + eps)
        elif kind == "adam":
            theta -= eta * m_hat / (math.sqrt(v / (1 - p2)) + eps)
        else:
            theta -= eta * s_hat**2 * m
        out.append(theta)
    return np.array(out), np.array(s_hats)


def run(step, grads, eta=0.01, theta0=0.0):
    state = OptimizerState.zeros((1,), Hyper(eta=eta))
    theta = np.array([theta0])
    out = []
    for g in grads:
        theta, state = step(theta, np.array([g]), state)
        out.append(theta[0])
    return np.array(out), state


STEPS = {"sd-amsgrad": sd_amsgrad_step, "amsgrad": amsgrad_step, "adam": adam_step, "sd-momentum": sd_momentum_step}


@pytest.mark.parametrize("kind", sorted(STEPS))
def test_matches_scripted_oracle(kind):
    grads = np.random.default_rng(0).normal(size=200) * np.linspace(3, 0.1, 200)
    mine, _ = run(STEPS[kind], grads)
    ref, _ = scripted(grads, kind=kind)
    np.testing.assert_allclose(mine, ref, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("step", [sd_amsgrad_step, adam_step])
def test_first_step_is_sign_step(step):
    g = np.array([3.0, -0.5, 1e-3])
    state = OptimizerState.zeros(3, Hyper(eta=0.1, eps=0.0))
    theta, _ = step(np.zeros(3), g, state)
    np.testing.assert_allclose(theta, -0.1 * np.sign(g), rtol=1e-12)


def test_alternating_sign_dampening():
    grads = [1.0 if t % 2 == 0 else -1.0 for t in range(100)]
    _, s_hats = scripted(grads)
    target = (1 - 0.9) / (1 + 0.9)
    assert abs(abs(s_hats[-1]) - target) < 1e-4
    assert target == pytest.approx(0.0526, abs=1e-4)
    state = OptimizerState.zeros(1)
    amsgrad_state = OptimizerState.zeros(1)
    for g in grads:
        before = 0.0
        t_sd, state = sd_amsgrad_step(np.array([before]), np.array([g]), state)
        t_ams, amsgrad_state = amsgrad_step(np.array([before]), np.array([g]), amsgrad_state)
    ratio = t_sd[0] / t_ams[0]
    assert ratio == pytest.approx(s_hats[-1] ** 2, rel=1e-9)
    assert ratio == pytest.approx(2.8e-3, rel=0.02)


def test_vmax_separates_amsgrad_from_adam():
    # large gradients, then much smaller ones: v shrinks while v_max holds
    grads = [2.0] * 200 + [0.1] * 50
    ams, s_ams = run(amsgrad_step, grads)
    adam, s_adam = run(adam_step, grads)
    assert s_ams.v_max[0] > s_ams.v[0]
    np.testing.assert_array_equal(s_ams.v, s_adam.v)
    # smaller denominator -> Adam takes the larger late steps
    assert abs(adam[-1] - adam[-2]) > abs(ams[-1] - ams[-2])


def test_errors_and_lookup():
    state = OptimizerState.zeros(3)
    with pytest.raises(NonFiniteGradientError) as info:
        sd_amsgrad_step(np.zeros(3), np.array([0.0, np.nan, 1.0]), state)
    assert list(info.value.index) == [1]
    with pytest.raises(ShapeError):
        sd_amsgrad_step(np.zeros(3), np.zeros(2), OptimizerState.zeros(3))
    assert get_optimizer("SD-AMSGrad") is sd_amsgrad_step
    with pytest.raises(ValueError):
        get_optimizer("sgd")


def test_step_size_decay_examples():
    assert step_size_decay(0.1, 0.1, 5.0, 5.0) == pytest.approx(0.1)
    assert step_size_decay(0.1, 0.1, 0.0, 5.0) == 0.0
    assert step_size_decay(1.0, 1.0, math.e - 1, math.e**2 - 1) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        step_size_decay(0.1, 0.1, 1.0, 0.0)


def test_lr_schedule():
    assert lr_schedule(0.001, 25_000) == pytest.approx(0.00025)
    assert lr_schedule(0.001, 9_999) == 0.001


# --- invariants ---------------------------------------------------------------

grad_streams = st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=1, max_size=60)


@settings(max_examples=60, deadline=None)
@given(grad_streams)
def test_sd_amsgrad_with_unit_dampening_is_amsgrad(grads):
    a, _ = run(lambda t, g, s: sd_amsgrad_step(t, g, s, sign_dampening=False), grads)
    b, _ = run(amsgrad_step, grads)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(grad_streams)
def test_state_invariants(grads):
    state = OptimizerState.zeros((1,))
    theta = np.zeros(1)
    prev_vmax = 0.0
    for g in grads:
        theta, state = sd_amsgrad_step(theta, np.array([g]), state)
        assert state.v[0] >= 0 and state.v_max[0] >= state.v[0] and state.v_max[0] >= prev_vmax
        assert abs(state.s[0] / (1 - 0.9**state.tau)) <= 1 + 1e-12
        prev_vmax = state.v_max[0]


@settings(max_examples=40, deadline=None)
@given(grad_streams, st.floats(0.01, 100.0), st.sampled_from(sorted(STEPS)))
def test_eta_scale_covariance(grads, scale, kind):
    a, _ = run(STEPS[kind], grads, eta=0.01)
    b, _ = run(STEPS[kind], grads, eta=0.01 * scale)
    np.testing.assert_allclose(b, scale * a, rtol=1e-9, atol=1e-300)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 50), st.sampled_from(sorted(STEPS)))
def test_zero_gradients_never_move(n, kind):
    out, _ = run(STEPS[kind], [0.0] * n, theta0=0.7)
    assert np.all(out == 0.7)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.001, 1.0), st.floats(0.01, 500.0), st.lists(st.floats(0.0, 1000.0), min_size=1, max_size=50))
def test_decay_is_monotone(eta0, err0, errors):
    eta, err_min = eta0, err0
    for e in errors:
        err_min = min(err_min, e)
        new = step_size_decay(eta, eta0, err_min, err0)
        assert new <= eta
        eta = new
