"""Adaptive-moment optimizers over dense numpy parameter arrays.

All update rules share one moment bookkeeping step::

    m  = b1 m + (1 - b1) g          v  = b2 v + (1 - b2) g^2
    s  = b3 s + (1 - b3) sgn(g)     v' = max(v', v)

followed by bias correction with ``1 - b^tau``. SD-AMSGrad moves by
``eta * s_hat^2 * m_hat / (sqrt(v'_hat) + eps)``; AMSGrad drops the
``s_hat^2`` factor, Adam additionally uses ``v`` in place of ``v'``, and
SD-Momentum moves by ``eta * s_hat^2 * m`` without any variance scaling.

``eta`` may be an array broadcastable against the parameters, which lets one
state drive many independent runs at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradientError, ShapeError


@dataclass
class Hyper:
    eta: float | np.ndarray = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    beta3: float = 0.9
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    v_max: np.ndarray
    s: np.ndarray
    tau: int = 0
    hyper: Hyper = field(default_factory=Hyper)

    @classmethod
    def zeros(cls, shape, hyper: Hyper | None = None) -> "OptimizerState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), np.zeros(shape), 0, hyper or Hyper())


def _advance(theta, g, state: OptimizerState):
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    if g.shape != theta.shape or g.shape != state.m.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match parameters {theta.shape}")
    finite = np.isfinite(g)
    if not finite.all():
        raise NonFiniteGradientError(np.argwhere(~finite)[0])
    hp = state.hyper
    state.tau += 1
    state.m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    state.v = hp.beta2 * state.v + (1.0 - hp.beta2) * g * g
    state.s = hp.beta3 * state.s + (1.0 - hp.beta3) * np.sign(g)
    state.v_max = np.maximum(state.v_max, state.v)
    return theta, g


def _bias(beta: float, tau: int) -> float:
    return 1.0 - beta**tau


def sd_amsgrad_step(theta, g, state: OptimizerState, sign_dampening: bool = True):
    theta, g = _advance(theta, g, state)
    hp = state.hyper
    m_hat = state.m / _bias(hp.beta1, state.tau)
    v_hat = state.v_max / _bias(hp.beta2, state.tau)
    step = m_hat / (np.sqrt(v_hat) + hp.eps)
    if sign_dampening:
        s_hat = state.s / _bias(hp.beta3, state.tau)
        step = s_hat**2 * step
    return theta - hp.eta * step, state


def amsgrad_step(theta, g, state: OptimizerState):
    return sd_amsgrad_step(theta, g, state, sign_dampening=False)


def adam_step(theta, g, state: OptimizerState):
    theta, g = _advance(theta, g, state)
    hp = state.hyper
    m_hat = state.m / _bias(hp.beta1, state.tau)
    v_hat = state.v / _bias(hp.beta2, state.tau)
    return theta - hp.eta * m_hat / (np.sqrt(v_hat) + hp.eps), state


def sd_momentum_step(theta, g, state: OptimizerState):
    """Momentum buffer (no bias correction) scaled by the squared sign average."""
    theta, g = _advance(theta, g, state)
    hp = state.hyper
    s_hat = state.s / _bias(hp.beta3, state.tau)
    return theta - hp.eta * s_hat**2 * state.m, state


OPTIMIZERS = {
    "sd-amsgrad": sd_amsgrad_step,
    "amsgrad": amsgrad_step,
    "adam": adam_step,
    "sd-momentum": sd_momentum_step,
}


def get_optimizer(name: str):
    try:
        return OPTIMIZERS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None


def step_size_decay(eta_t, eta_0, err_t, err_0):
    """Next inference step size from the smallest position error seen so far.

    ``min(eta_t, eta_0 * ln(1 + err_t) / ln(1 + err_0))``; never increases.
    """
    err_0 = np.asarray(err_0, dtype=float)
    if np.any(err_0 <= 0):
        raise ValueError("initial error must be > 0")
    ratio = np.log1p(np.asarray(err_t, dtype=float)) / np.log1p(err_0)
    out = np.minimum(eta_t, eta_0 * ratio)
    return float(out) if np.ndim(out) == 0 else out


def lr_schedule(lr0: float, step: int, factor: float = 0.5, every: int = 10_000) -> float:
    """Staircase decay: ``lr0 * factor ** (step // every)``."""
    return lr0 * factor ** (step // every)


__all__ = [
    "Hyper", "OptimizerState", "OPTIMIZERS", "get_optimizer",
    "adam_step", "amsgrad_step", "sd_amsgrad_step", "sd_momentum_step",
    "step_size_decay", "lr_schedule",
]
