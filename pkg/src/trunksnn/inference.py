"""Goal-directed motor inference through a trained forward model.

The gears are the optimized variable. Each iteration runs the network on the
current gears, compares the predicted end-effector pose against a target,
backprojects the error through the spike tape onto the input currents and
sums it over each joint's time window to get a gradient per actuation value.

With target correction enabled the network is pulled by the *true* error::

    p_corr = p_pred + gamma1 * (p_target - p_actual) / norm
    q_corr = q_pred + gamma2 * (q_target - q_actual)

where the actual pose comes from the kinematic simulator. Without
correction the network chases ``(p_target / norm, q_target)`` directly and
inherits the model's bias.

Many targets are optimized together as one batch; every run keeps its own
optimizer moments, step size and stopping state.

The post-spike pseudo-derivative dead zone is switched off while
backprojecting by default (``pd_dead_steps=0``). Spikes and readouts are
unchanged by this; only the recorded ``h`` differs. With the dead zone in
place the input gradients of a trained model point almost at random with
respect to its own finite-difference sensitivity.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .encoding import CLOCK_START, POSE_WIDTH, WINDOW, ACTUATION_WIDTH, encode_inputs, n_inputs
from .errors import IncompatibleCheckpointError, InvalidInputError, ShapeError
from .grad import backward
from .kinematics import ArmSpec, GearState, Pose, chain_arrays, project_gears, sample_gears
from .lsnn import forward
from .optim import Hyper, OptimizerState, get_optimizer
from .training import Checkpoint

HISTORY_COLUMNS = ("pos_err_mm", "rot_err_deg", "eta")


@dataclass
class InferenceTarget:
    p_star: np.ndarray  # mm
    q_star: np.ndarray  # unit quaternion (w, x, y, z)
    gamma1: float = 1.0
    gamma2: float = 1.0

    def __post_init__(self):
        self.p_star = np.asarray(self.p_star, dtype=float).reshape(3)
        self.q_star = np.asarray(self.q_star, dtype=float).reshape(4)
        if not (np.all(np.isfinite(self.p_star)) and np.all(np.isfinite(self.q_star))):
            raise InvalidInputError("target pose must be finite")
        if abs(np.linalg.norm(self.q_star) - 1.0) > 1e-6:
            raise InvalidInputError(f"target quaternion is not unit length (|q| = {np.linalg.norm(self.q_star):.6g})")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise InvalidInputError("correction gains must be >= 0")

    @classmethod
    def from_pose(cls, pose: Pose, gamma1: float = 1.0, gamma2: float = 1.0) -> "InferenceTarget":
        return cls(pose.p, pose.q, gamma1, gamma2)


@dataclass
class InferenceOptions:
    optimizer: str = "sd-amsgrad"
    eta0: float | None = None  # None: 0.1 for <= 128 hidden neurons, else 0.01
    max_iters: int = 5000
    tol_mm: float = 1.0
    patience: int = 10
    correction: bool = True
    decay: bool = True
    early_stop: bool = True
    pd_dead_steps: int | None = 0  # None: keep the checkpoint's value
    hyper: Hyper = field(default_factory=Hyper)

    def initial_eta(self, n_hidden: int) -> float:
        if self.eta0 is not None:
            return float(self.eta0)
        return 0.1 if n_hidden <= 128 else 0.01


@dataclass
class InferenceRun:
    gears: GearState
    history: np.ndarray  # (iterations, 3): pos_err_mm, rot_err_deg, eta
    final_pos_err: float
    final_rot_err: float
    iterations: int
    stopped_early: bool
    target: InferenceTarget

    @property
    def pos_curve(self) -> np.ndarray:
        return self.history[:, 0]


def backprojection_neuron(checkpoint: Checkpoint, pd_dead_steps: int | None = 0):
    """Neuron config used for the inference tape."""
    if pd_dead_steps is None or pd_dead_steps == checkpoint.neuron.pd_dead_steps:
        return checkpoint.neuron
    return dataclasses.replace(checkpoint.neuron, pd_dead_steps=pd_dead_steps)


def check_compatible(checkpoint: Checkpoint, spec: ArmSpec):
    if checkpoint.spec_fingerprint != spec.fingerprint():
        raise IncompatibleCheckpointError(
            f"checkpoint was trained for arm {checkpoint.spec.to_dict()}, not {spec.to_dict()}"
        )
    topo = checkpoint.topology
    if topo.n_in != n_inputs(spec.n_joints) or topo.n_out != POSE_WIDTH:
        raise IncompatibleCheckpointError(
            f"checkpoint topology ({topo.n_in} in, {topo.n_out} out) does not fit a {spec.n_joints}-joint arm"
        )


def pose_metrics(actual: Pose, target: Pose) -> tuple[float, float]:
    """(position error mm, orientation error deg) between two poses."""
    pos = float(np.linalg.norm(np.asarray(actual.p) - np.asarray(target.p)))
    dot = abs(float(np.dot(actual.q, target.q)))
    return pos, float(np.degrees(np.arccos(min(1.0, dot))))


def _errors(p_act, q_act, p_star, q_star):
    pos = np.linalg.norm(p_act - p_star, axis=-1)
    dot = np.clip(np.abs(np.sum(q_act * q_star, axis=-1)), 0.0, 1.0)
    return pos, np.degrees(np.arccos(dot))


def _hemisphere(q, ref):
    """Flip ``q`` where needed so that <q, ref> >= 0."""
    sign = np.where(np.sum(q * ref, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    return q * sign


def corrected_target(pred, p_star, q_star, p_act, q_act, norm, gamma1=1.0, gamma2=1.0, correction=True):
    """Target vector (..., 7) for the end-effector readouts.

    The target orientation is moved to the hemisphere of the predicted
    quaternion and the actual orientation to that of the target, so their
    difference is always the short way round.
    """
    pred = np.asarray(pred, dtype=float)
    q_ref = pred[..., 3:]
    q_star = _hemisphere(np.asarray(q_star, dtype=float), q_ref)
    gamma1 = np.asarray(gamma1, dtype=float)[..., None] if np.ndim(gamma1) else gamma1
    gamma2 = np.asarray(gamma2, dtype=float)[..., None] if np.ndim(gamma2) else gamma2
    if not correction:
        return np.concatenate([np.asarray(p_star) / norm, q_star], axis=-1)
    q_act = _hemisphere(np.asarray(q_act, dtype=float), q_star)
    p_c = pred[..., :3] + gamma1 * (np.asarray(p_star) - np.asarray(p_act)) / norm
    q_c = q_ref + gamma2 * (q_star - q_act)
    return np.concatenate([p_c, q_c], axis=-1)


def loss_terms(pred, target) -> tuple[np.ndarray, np.ndarray]:
    """Position and orientation parts of ``0.5 * |pred - target|^2``."""
    d = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return 0.5 * np.sum(d[..., :3] ** 2, axis=-1), 0.5 * np.sum(d[..., 3:] ** 2, axis=-1)


def gear_gradient(checkpoint: Checkpoint, gears, target, neuron=None):
    """Prediction, loss and dE/dgears for gears (B, n, 3).

    ``target`` is a (B, 7) array or a callable mapping the prediction to one.
    The loss is ``0.5 * |mean end-effector readout - target|^2`` with the mean
    taken over the end-effector's output steps. ``neuron`` replaces the
    checkpoint's neuron config (see :func:`backprojection_neuron`).
    """
    g = np.asarray(gears, dtype=float)
    n = g.shape[-2]
    topo, w = checkpoint.topology, checkpoint.weights
    cfg = neuron or checkpoint.neuron
    tape = forward(encode_inputs(g), w, cfg, topo)
    first = (n - 1) * WINDOW + CLOCK_START
    pred = tape.state.y[:, first:].mean(axis=1)
    target_vec = target(pred) if callable(target) else np.asarray(target, dtype=float)
    diff = pred - target_vec
    loss_grad = np.zeros_like(tape.state.y)
    loss_grad[:, first:] = diff[:, None, :] / (WINDOW - CLOCK_START)
    gx = backward(tape, w, cfg, topo, loss_grad, weight_grads=False).g_x
    g_gears = gx.reshape(g.shape[0], n, WINDOW, -1)[..., :ACTUATION_WIDTH].sum(axis=2)
    return pred, 0.5 * np.sum(diff**2, axis=-1), g_gears


def run_batch(
    start_gears,
    targets: list[InferenceTarget],
    checkpoint: Checkpoint,
    spec: ArmSpec,
    opts: InferenceOptions | None = None,
) -> list[InferenceRun]:
    """Run one inference episode per target, all advanced in lockstep.

    ``start_gears`` is one (n, 3) configuration shared by all runs or a
    (B, n, 3) stack.
    """
    opts = opts or InferenceOptions()
    check_compatible(checkpoint, spec)
    if opts.max_iters < 0:
        raise ValueError("max_iters must be >= 0")
    n_b = len(targets)
    if n_b == 0:
        return []
    start = np.asarray(start_gears.values if isinstance(start_gears, GearState) else start_gears, dtype=float)
    if start.ndim == 2:
        start = np.broadcast_to(start, (n_b,) + start.shape)
    if start.shape != (n_b, spec.n_joints, 3):
        raise ShapeError(f"start gears must have shape ({n_b}, {spec.n_joints}, 3), got {start.shape}")
    for s in start:
        GearState(s, spec)

    step = get_optimizer(opts.optimizer)
    norm = checkpoint.normalization
    neuron = backprojection_neuron(checkpoint, opts.pd_dead_steps)
    p_star = np.stack([t.p_star for t in targets])
    q_star = np.stack([t.q_star for t in targets])
    gamma1 = np.array([t.gamma1 for t in targets])
    gamma2 = np.array([t.gamma2 for t in targets])

    eta0 = opts.initial_eta(checkpoint.topology.n_hidden)
    eta = np.full(n_b, eta0)
    hyper = Hyper(eta=eta[:, None, None].copy(), beta1=opts.hyper.beta1, beta2=opts.hyper.beta2,
                  beta3=opts.hyper.beta3, eps=opts.hyper.eps)
    state = OptimizerState.zeros(start.shape, hyper)

    gears = start.copy()
    hist = np.zeros((n_b, opts.max_iters, 3))
    length = np.full(n_b, opts.max_iters)
    active = np.ones(n_b, dtype=bool)
    stopped = np.zeros(n_b, dtype=bool)
    streak = np.zeros(n_b, dtype=int)
    err0 = None
    err_min = None

    for it in range(opts.max_iters):
        if not active.any():
            break
        pos, qs = chain_arrays(gears, spec, validate=False)
        p_act, q_act = pos[:, -1], qs[:, -1]
        pos_err, rot_err = _errors(p_act, q_act, p_star, q_star)
        if err0 is None:
            err0 = pos_err.copy()
            err_min = pos_err.copy()
        err_min = np.minimum(err_min, pos_err)
        if opts.decay and it > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(err0 > 0, np.log1p(err_min) / np.log1p(err0), 0.0)
            eta = np.where(active, np.minimum(eta, eta0 * ratio), eta)
        hist[active, it, 0] = pos_err[active]
        hist[active, it, 1] = rot_err[active]
        hist[active, it, 2] = eta[active]

        if opts.early_stop:
            streak = np.where(pos_err < opts.tol_mm, streak + 1, 0)
            done = active & (streak >= opts.patience)
            length[done] = it + 1
            stopped |= done
            active &= ~done
            if not active.any():
                break

        # Frozen runs are skipped; their (zero) gradient never moves them.
        idx = np.flatnonzero(active)
        _, _, g_active = gear_gradient(
            checkpoint, gears[idx],
            lambda pred: corrected_target(pred, p_star[idx], q_star[idx], p_act[idx], q_act[idx], norm,
                                          gamma1[idx], gamma2[idx], opts.correction),
            neuron,
        )
        grad = np.zeros_like(gears)
        grad[idx] = g_active
        state.hyper.eta = np.where(active, eta, 0.0)[:, None, None]
        moved, state = step(gears, grad, state)
        gears = np.where(active[:, None, None], project_gears(moved, spec), gears)

    pos, qs = chain_arrays(gears, spec, validate=False)
    final_pos, final_rot = _errors(pos[:, -1], qs[:, -1], p_star, q_star)
    runs = []
    for b in range(n_b):
        runs.append(InferenceRun(
            gears=GearState(gears[b], spec),
            history=hist[b, : length[b]].copy(),
            final_pos_err=float(final_pos[b]),
            final_rot_err=float(final_rot[b]),
            iterations=int(length[b]),
            stopped_early=bool(stopped[b]),
            target=targets[b],
        ))
    return runs


def infer_step(gears, target: InferenceTarget, checkpoint: Checkpoint, spec: ArmSpec, opt_state: OptimizerState,
               optimizer: str = "sd-amsgrad", correction: bool = True, pd_dead_steps: int | None = 0):
    """One update of a single run; returns (new gears, metrics dict).

    ``opt_state`` carries the step size in ``opt_state.hyper.eta`` and is
    advanced in place.
    """
    check_compatible(checkpoint, spec)
    g = np.asarray(gears.values if isinstance(gears, GearState) else gears, dtype=float)[None]
    pos, qs = chain_arrays(g, spec)
    p_act, q_act = pos[:, -1], qs[:, -1]
    _, loss, grad = gear_gradient(
        checkpoint, g,
        lambda pred: corrected_target(pred, target.p_star[None], target.q_star[None], p_act, q_act,
                                      checkpoint.normalization, target.gamma1, target.gamma2, correction),
        backprojection_neuron(checkpoint, pd_dead_steps),
    )
    moved, _ = get_optimizer(optimizer)(g[0], grad[0], opt_state)
    new = project_gears(moved, spec)
    pos_err, rot_err = _errors(p_act[0], q_act[0], target.p_star, target.q_star)
    metrics = {"pos_err_mm": float(pos_err), "rot_err_deg": float(rot_err), "loss": float(loss[0]), "gradient": grad[0]}
    return GearState(new, spec), metrics


def run_inference(start_gears, target: InferenceTarget, checkpoint: Checkpoint, spec: ArmSpec,
                  opts: InferenceOptions | None = None) -> InferenceRun:
    return run_batch(start_gears, [target], checkpoint, spec, opts)[0]


def sample_targets(spec: ArmSpec, rng: np.random.Generator, n: int, gamma1: float = 1.0, gamma2: float = 1.0):
    """Reachable targets: end-effector poses of random gear states.

    Returns (targets, gears) so callers can inspect the generating configuration.
    """
    gears = sample_gears(spec, rng, n, p_edge=0.0)
    pos, qs = chain_arrays(gears, spec)
    targets = [InferenceTarget(pos[i, -1], qs[i, -1], gamma1, gamma2) for i in range(n)]
    return targets, gears


def error_matrix(runs: list[InferenceRun], length: int | None = None, column: int = 0) -> np.ndarray:
    """(runs, iterations) error curves; a run that stopped early holds its final value."""
    if length is None:
        length = max((r.history.shape[0] for r in runs), default=0)
    out = np.zeros((len(runs), length))
    for i, r in enumerate(runs):
        h = r.history[:, column]
        k = min(len(h), length)
        out[i, :k] = h[:k]
        if k < length:
            final = r.final_pos_err if column == 0 else r.final_rot_err
            out[i, k:] = final
    return out


def median_curve(runs: list[InferenceRun], length: int | None = None, column: int = 0) -> np.ndarray:
    return np.median(error_matrix(runs, length, column), axis=0)


def compare_optimizers(
    checkpoints: list[Checkpoint],
    spec: ArmSpec,
    targets: list[InferenceTarget],
    start_gears,
    optimizers=("adam", "amsgrad", "sd-momentum", "sd-amsgrad"),
    opts: InferenceOptions | None = None,
    etas: dict | None = None,
    run=None,
) -> dict[str, list[InferenceRun]]:
    """Run every optimizer from the same start on every (checkpoint, target) pair.

    ``run`` replaces :func:`run_batch` (same signature), e.g. to spread work
    over processes.
    """
    opts = opts or InferenceOptions()
    run = run or run_batch
    result = {}
    for name in optimizers:
        runs = []
        o = InferenceOptions(**{**opts.__dict__, "optimizer": name})
        if etas and name in etas:
            o.eta0 = etas[name]
        for ck in checkpoints:
            runs.extend(run(start_gears, targets, ck, spec, o))
        result[name] = runs
    return result


def write_trajectory_csv(run: InferenceRun, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration",) + HISTORY_COLUMNS)
        for i, row in enumerate(run.history):
            w.writerow([i] + [repr(float(v)) for v in row])


def write_summary_csv(runs: list[InferenceRun], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_id", "final_pos_err_mm", "final_rot_err_deg", "iterations", "stopped_early"])
        for i, r in enumerate(runs):
            w.writerow([i, repr(r.final_pos_err), repr(r.final_rot_err), r.iterations, int(r.stopped_early)])


def write_curve_csv(curves: dict[str, np.ndarray], path):
    """Columns ``iteration`` then one column per named curve."""
    names = list(curves)
    length = max(len(c) for c in curves.values()) if curves else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + names)
        for i in range(length):
            w.writerow([i] + [repr(float(curves[n][i])) if i < len(curves[n]) else "" for n in names])


__all__ = [
    "InferenceTarget", "InferenceOptions", "InferenceRun", "pose_metrics", "corrected_target", "loss_terms",
    "gear_gradient", "infer_step", "run_inference", "run_batch", "sample_targets", "error_matrix",
    "median_curve", "compare_optimizers", "check_compatible", "backprojection_neuron",
]
