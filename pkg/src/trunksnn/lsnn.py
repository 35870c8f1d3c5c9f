"""Single-layer LSNN: LIF/ALIF hidden neurons with leaky readouts.

Hidden index layout is fixed: LIF neurons occupy ``[0, n_hidden - n_alif)``
and ALIF neurons the contiguous suffix. Inputs are injected directly as
real-valued currents (no spike encoding).

Time runs over steps ``t = 0 .. T-1`` starting from an all-zero state. At
step ``t`` (ALIF columns only for ``a``)::

    a[t]   = rho * a[t-1] + z[t-1]
    thr[t] = v_thr + zeta * a[t]
    v[t]   = alpha * v[t-1] + x[t] @ w_in + z[t-1] @ w_rec - z[t-1] * reset[t-1]
    z[t]   = v[t] >= thr[t]
    y[t]   = alpha * y[t-1] + z[t] @ w_out

``reset`` is the base threshold unless ``NeuronConfig.adaptive_reset`` is set,
in which case ALIF neurons subtract their previous adaptive threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError

# zeta: threshold-increase coefficient; lambda_pd: pseudo-derivative damping.
DEFAULT_ALPHA = math.exp(-1.0 / 20.0)
DEFAULT_RHO = math.exp(-1.0 / 1200.0)


@dataclass(frozen=True)
class NeuronConfig:
    alpha: float = DEFAULT_ALPHA
    rho: float = DEFAULT_RHO
    zeta: float = 0.03
    v_thr: float = 0.61
    lambda_pd: float = 0.3
    # Steps after a spike during which the pseudo-derivative is held at 0.
    pd_dead_steps: int = 5
    adaptive_reset: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.rho < 1.0:
            raise InvalidInputError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.zeta >= 0.0:
            raise InvalidInputError(f"zeta must be >= 0, got {self.zeta}")
        if not self.v_thr > 0.0:
            raise InvalidInputError(f"v_thr must be > 0, got {self.v_thr}")
        if not self.lambda_pd > 0.0:
            raise InvalidInputError(f"lambda_pd must be > 0, got {self.lambda_pd}")
        if self.pd_dead_steps < 0:
            raise InvalidInputError("pd_dead_steps must be >= 0")


@dataclass(frozen=True)
class NetworkTopology:
    n_in: int
    n_hidden: int
    n_out: int
    n_alif: int | None = None

    def __post_init__(self):
        if self.n_alif is None:
            object.__setattr__(self, "n_alif", self.n_hidden // 2)
        for name in ("n_in", "n_hidden", "n_out"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if not 0 <= self.n_alif <= self.n_hidden:
            raise InvalidInputError("n_alif must lie in [0, n_hidden]")

    @property
    def n_lif(self) -> int:
        return self.n_hidden - self.n_alif


@dataclass
class NetworkWeights:
    w_in: np.ndarray  # (n_in, n_hidden)
    w_rec: np.ndarray  # (n_hidden, n_hidden), row = presynaptic neuron
    w_out: np.ndarray  # (n_hidden, n_out)

    def __post_init__(self):
        self.w_in = np.asarray(self.w_in, dtype=float)
        self.w_rec = np.asarray(self.w_rec, dtype=float)
        self.w_out = np.asarray(self.w_out, dtype=float)
        for name in ("w_in", "w_rec", "w_out"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"{name} contains non-finite entries")

    def check(self, topo: NetworkTopology):
        expected = {
            "w_in": (topo.n_in, topo.n_hidden),
            "w_rec": (topo.n_hidden, topo.n_hidden),
            "w_out": (topo.n_hidden, topo.n_out),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.w_in.copy(), self.w_rec.copy(), self.w_out.copy())

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w_in": self.w_in, "w_rec": self.w_rec, "w_out": self.w_out}

    @classmethod
    def zeros(cls, topo: NetworkTopology) -> "NetworkWeights":
        return cls(
            np.zeros((topo.n_in, topo.n_hidden)),
            np.zeros((topo.n_hidden, topo.n_hidden)),
            np.zeros((topo.n_hidden, topo.n_out)),
        )


def init_weights(topo: NetworkTopology, rng: np.random.Generator, zero_diagonal: bool = False, gain: float = 1.0):
    """Gaussian weights with std 1/sqrt(fan_in) for every synapse group.

    ``gain`` scales the input and recurrent groups (the ones feeding voltages).
    """
    w_in = gain * rng.standard_normal((topo.n_in, topo.n_hidden)) / math.sqrt(topo.n_in)
    w_rec = gain * rng.standard_normal((topo.n_hidden, topo.n_hidden)) / math.sqrt(topo.n_hidden)
    w_out = rng.standard_normal((topo.n_hidden, topo.n_out)) / math.sqrt(topo.n_hidden)
    if zero_diagonal:
        np.fill_diagonal(w_rec, 0.0)
    return NetworkWeights(w_in, w_rec, w_out)


@dataclass
class NetworkState:
    """Per-step trajectory. Arrays carry an optional leading batch axis."""

    v: np.ndarray  # (..., T, n_hidden)
    a: np.ndarray  # (..., T, n_alif)
    z: np.ndarray  # (..., T, n_hidden)
    y: np.ndarray  # (..., T, n_out)


@dataclass
class SpikeTape:
    inputs: np.ndarray  # (..., T, n_in)
    state: NetworkState
    h: np.ndarray  # (..., T, n_hidden)
    cfg: NeuronConfig = field(repr=False, default_factory=NeuronConfig)

    def __len__(self):
        return self.inputs.shape[-2]

    @property
    def thresholds(self) -> np.ndarray:
        """Dynamic thresholds v_thr + zeta * a (constant for LIF neurons)."""
        st = self.state
        n_alif = st.a.shape[-1]
        thr = np.full(st.v.shape, self.cfg.v_thr)
        if n_alif:
            thr[..., -n_alif:] += self.cfg.zeta * st.a
        return thr


def _check_finite(**values):
    for name, val in values.items():
        if not np.all(np.isfinite(val)):
            raise InvalidInputError(f"{name} must be finite")


def lif_step(v_prev, input_current, rec_current, z_prev, cfg: NeuronConfig):
    """One LIF update; returns ``(v, z)``. Works on scalars or arrays."""
    _check_finite(v_prev=v_prev, input_current=input_current, rec_current=rec_current, z_prev=z_prev)
    v = cfg.alpha * v_prev + input_current + rec_current - z_prev * cfg.v_thr
    z = np.where(v >= cfg.v_thr, 1.0, 0.0)
    return v, (float(z) if np.ndim(z) == 0 else z)


def alif_step(v_prev, a_prev, input_current, rec_current, z_prev, cfg: NeuronConfig):
    """One ALIF update; returns ``(v, a, z)``."""
    _check_finite(
        v_prev=v_prev, a_prev=a_prev, input_current=input_current, rec_current=rec_current, z_prev=z_prev
    )
    if np.any(np.asarray(a_prev) < 0):
        raise InvalidInputError("adaptation value must be non-negative")
    if cfg.adaptive_reset:
        reset = cfg.v_thr + cfg.zeta * a_prev
    else:
        reset = cfg.v_thr
    a = cfg.rho * a_prev + z_prev
    thr = cfg.v_thr + cfg.zeta * a
    v = cfg.alpha * v_prev + input_current + rec_current - z_prev * reset
    z = np.where(v >= thr, 1.0, 0.0)
    return v, a, (float(z) if np.ndim(z) == 0 else z)


def readout_step(y_prev, hidden_spikes, w_out, cfg: NeuronConfig):
    return cfg.alpha * y_prev + np.asarray(hidden_spikes, dtype=float) @ np.asarray(w_out, dtype=float)


def pseudo_derivative(v, v_thr_dyn, cfg: NeuronConfig):
    """lambda * max(0, 1 - |v - thr| / v_thr)."""
    return cfg.lambda_pd * np.maximum(0.0, 1.0 - np.abs(v - v_thr_dyn) / cfg.v_thr)


def forward(inputs, weights: NetworkWeights, cfg: NeuronConfig, topo: NetworkTopology) -> SpikeTape:
    """Run the network over ``inputs`` of shape (T, n_in) or (B, T, n_in)."""
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != topo.n_in:
        raise ShapeError(f"inputs must have shape (T, {topo.n_in}) or (B, T, {topo.n_in}), got {np.shape(inputs)}")
    if x.shape[1] < 1:
        raise ShapeError("input sequence must contain at least one step")
    weights.check(topo)
    _check_finite(inputs=x)

    n_b, n_t, _ = x.shape
    n_h, n_lif = topo.n_hidden, topo.n_lif
    alpha, rho, zeta, v_thr = cfg.alpha, cfg.rho, cfg.zeta, cfg.v_thr
    dead = cfg.pd_dead_steps

    v = np.empty((n_b, n_t, n_h))
    a = np.empty((n_b, n_t, topo.n_alif))
    z = np.empty((n_b, n_t, n_h))
    y = np.empty((n_b, n_t, topo.n_out))
    h = np.empty((n_b, n_t, n_h))

    i_in = x @ weights.w_in
    v_prev = np.zeros((n_b, n_h))
    z_prev = np.zeros((n_b, n_h))
    a_prev = np.zeros((n_b, topo.n_alif))
    y_prev = np.zeros((n_b, topo.n_out))
    reset = np.full((n_b, n_h), v_thr)
    thr = np.full((n_b, n_h), v_thr)
    since_spike = np.full((n_b, n_h), dead + 1)

    for t in range(n_t):
        a_t = rho * a_prev + z_prev[:, n_lif:]
        thr_alif = v_thr + zeta * a_t
        v_t = alpha * v_prev + i_in[:, t] + z_prev @ weights.w_rec - z_prev * reset
        thr[:, n_lif:] = thr_alif
        z_t = (v_t >= thr).astype(float)
        h_t = cfg.lambda_pd * np.maximum(0.0, 1.0 - np.abs(v_t - thr) / v_thr)
        if dead:
            since_spike += 1
            h_t[since_spike <= dead] = 0.0
            since_spike[z_t > 0] = 0
        y_t = alpha * y_prev + z_t @ weights.w_out

        v[:, t], a[:, t], z[:, t], y[:, t], h[:, t] = v_t, a_t, z_t, y_t, h_t
        if cfg.adaptive_reset:
            reset[:, n_lif:] = thr_alif
        v_prev, z_prev, a_prev, y_prev = v_t, z_t, a_t, y_t

    if single:
        x, v, a, z, y, h = x[0], v[0], a[0], z[0], y[0], h[0]
    return SpikeTape(inputs=x, state=NetworkState(v=v, a=a, z=z, y=y), h=h, cfg=cfg)
