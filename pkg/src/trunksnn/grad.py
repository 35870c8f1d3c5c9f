"""Reverse-mode BPTT over a recorded :class:`~trunksnn.lsnn.SpikeTape`.

Spikes are differentiated through the recorded pseudo-derivative ``h``
(ALIF spikes additionally see ``-zeta * h`` w.r.t. the adaptation value).
Walking backwards from ``t = T-1`` with ``delta[T] = 0``::

    d_out[t] = dE/dy[t] + alpha * d_out[t+1]
    dE/dz[t] = w_out @ d_out[t] + w_rec @ d_v[t+1] - reset * d_v[t+1]
               (+ d_a[t+1] for ALIF)            (+ direct dE/dz[t] if given)
    d_v[t]   = dE/dz[t] * h[t] + alpha * d_v[t+1]
    d_a[t]   = -zeta * h[t] * dE/dz[t] + rho * d_a[t+1]

and the weight gradients are ``sum_t x[t] d_v[t]`` (input),
``sum_t z[t] d_v[t+1]`` (recurrent) and ``sum_t z[t] d_out[t]`` (readout).
Batched tapes sum weight gradients over the batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GradientExplosionError, ShapeError
from .lsnn import NetworkTopology, NetworkWeights, NeuronConfig, SpikeTape


@dataclass
class DeltaState:
    delta_v: np.ndarray
    delta_a: np.ndarray
    delta_out: np.ndarray


@dataclass
class GradientSet:
    g_in: np.ndarray
    g_rec: np.ndarray
    g_out: np.ndarray
    g_x: np.ndarray  # same leading shape as the tape inputs
    deltas: DeltaState | None = None  # full histories, only with keep_deltas=True

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w_in": self.g_in, "w_rec": self.g_rec, "w_out": self.g_out}

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(self.g_in * factor, self.g_rec * factor, self.g_out * factor, self.g_x * factor)


def backward(
    tape: SpikeTape,
    weights: NetworkWeights,
    cfg: NeuronConfig,
    topo: NetworkTopology,
    loss_grad,
    spike_grad=None,
    keep_deltas: bool = False,
    weight_grads: bool = True,
) -> GradientSet:
    """Exact gradients of the surrogate graph recorded in ``tape``.

    ``loss_grad`` is dE/dy per step with the tape's leading shape; the optional
    ``spike_grad`` adds a direct dE/dz term (used by the rate regularizer).
    With ``weight_grads=False`` only ``g_x`` is computed (weight fields are 0).
    """
    x = tape.inputs
    single = x.ndim == 2
    st = tape.state
    z, h = st.z, tape.h
    dy = np.asarray(loss_grad, dtype=float)
    if dy.shape != st.y.shape:
        raise ShapeError(f"loss_grad shape {dy.shape} does not match readouts {st.y.shape}")
    if spike_grad is not None:
        spike_grad = np.asarray(spike_grad, dtype=float)
        if spike_grad.shape != z.shape:
            raise ShapeError(f"spike_grad shape {spike_grad.shape} does not match spikes {z.shape}")
    weights.check(topo)
    if single:
        x, z, h, dy = x[None], z[None], h[None], dy[None]
        a = st.a[None]
        if spike_grad is not None:
            spike_grad = spike_grad[None]
    else:
        a = st.a

    n_b, n_t, _ = x.shape
    n_lif = topo.n_lif
    alpha, rho, zeta = cfg.alpha, cfg.rho, cfg.zeta
    w_rec_t = weights.w_rec.T
    w_out_t = weights.w_out.T

    # Reset amount subtracted from v[t+1] per spike at t.
    reset = np.full((n_b, topo.n_hidden), cfg.v_thr)

    dv_next = np.zeros((n_b, topo.n_hidden))
    da_next = np.zeros((n_b, topo.n_alif))
    do_next = np.zeros((n_b, topo.n_out))
    dv_hist = np.empty((n_b, n_t, topo.n_hidden))
    if keep_deltas:
        da_hist = np.empty((n_b, n_t, topo.n_alif))
        do_hist = np.empty((n_b, n_t, topo.n_out))
    g_rec = np.zeros_like(weights.w_rec)
    g_out = np.zeros_like(weights.w_out)

    # Non-finite values are caught explicitly below, so numpy's warnings are muted.
    with np.errstate(invalid="ignore", over="ignore"):
        for t in range(n_t - 1, -1, -1):
            z_t = z[:, t]
            h_t = h[:, t]
            d_out = dy[:, t] + alpha * do_next
            if cfg.adaptive_reset:
                reset[:, n_lif:] = cfg.v_thr + zeta * a[:, t]
            dz = d_out @ w_out_t + dv_next @ w_rec_t - reset * dv_next
            dz[:, n_lif:] += da_next
            if spike_grad is not None:
                dz += spike_grad[:, t]
            dv = dz * h_t + alpha * dv_next
            da = rho * da_next - zeta * h_t[:, n_lif:] * dz[:, n_lif:]
            if cfg.adaptive_reset:
                da -= zeta * z_t[:, n_lif:] * dv_next[:, n_lif:]

            if weight_grads:
                g_rec += z_t.T @ dv_next
                g_out += z_t.T @ d_out
            # d_out and d_a feed into dv one step later, so checking dv suffices
            # apart from the final step (handled after the loop).
            if not np.isfinite(dv).all():
                raise GradientExplosionError(t)

            dv_hist[:, t] = dv
            if keep_deltas:
                da_hist[:, t] = da
                do_hist[:, t] = d_out
            dv_next, da_next, do_next = dv, da, d_out

    if not (np.isfinite(da_next).all() and np.isfinite(do_next).all()):
        raise GradientExplosionError(0)
    g_in = np.einsum("bti,btj->ij", x, dv_hist) if weight_grads else np.zeros_like(weights.w_in)
    g_x = dv_hist @ weights.w_in.T
    deltas = None
    if keep_deltas:
        deltas = DeltaState(dv_hist, da_hist, do_hist)
        if single:
            deltas = DeltaState(dv_hist[0], da_hist[0], do_hist[0])
    if single:
        g_x = g_x[0]
    return GradientSet(g_in=g_in, g_rec=g_rec, g_out=g_out, g_x=g_x, deltas=deltas)


def input_gradient(tape, weights, cfg, topo, loss_grad, spike_grad=None) -> np.ndarray:
    """dE/dx for every step and input channel (the ``g_x`` field of :func:`backward`)."""
    return backward(tape, weights, cfg, topo, loss_grad, spike_grad).g_x
