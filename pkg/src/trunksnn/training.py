"""Training of the LSNN forward model and checkpoint persistence.

Checkpoint file layout (little-endian)::

    magic  b"STRKCKPT"
    u32    format version
    u32    header length L, then L bytes of UTF-8 JSON (topology, neuron
           config, arm spec, counters, training config, metrics history)
    f64    w_in, w_rec, w_out, then per matrix the Adam m, v, v_max, s
    u32    CRC32 of every preceding byte
"""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import quaternion as quat
from .encoding import (
    POSE_WIDTH,
    Dataset,
    n_inputs,
    output_mask,
    target_sequence,
    window_means,
)
from .errors import (
    BadMagicError,
    ChecksumError,
    GradientExplosionError,
    NonFiniteGradientError,
    SpecMismatchError,
    TrainingDivergedError,
    TruncatedFileError,
    VersionMismatchError,
)
from .grad import GradientSet, backward
from .kinematics import ArmSpec
from .lsnn import NetworkTopology, NetworkWeights, NeuronConfig, forward, init_weights
from .optim import Hyper, OptimizerState, adam_step, lr_schedule

log = logging.getLogger(__name__)

CKPT_MAGIC = b"STRKCKPT"
CKPT_VERSION = 1
WEIGHT_NAMES = ("w_in", "w_rec", "w_out")
HISTORY_FIELDS = ("update", "epoch", "lr", "loss", "test_pos_mm", "test_rot_deg")


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr0: float = 0.001
    lr_decay: float = 0.5
    lr_decay_every: int = 10_000
    reg_factor: float = 0.001
    target_rate: float = 0.02
    epochs: int = 64
    seed: int = 0
    n_hidden: int = 128
    zero_self_recurrence: bool = False
    init_gain: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.n_hidden < 1:
            raise ValueError("batch_size and n_hidden must be >= 1, epochs >= 0")
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise ValueError("invalid learning-rate schedule")

    def lr_at(self, step: int) -> float:
        return lr_schedule(self.lr0, step, self.lr_decay, self.lr_decay_every)

    def reg_at(self, step: int) -> float:
        return lr_schedule(self.reg_factor, step, self.lr_decay, self.lr_decay_every)


@dataclass
class RateStats:
    rates: np.ndarray  # (n_hidden,) batch-mean firing rate per neuron
    mean_rate: float
    silent_fraction: float


@dataclass
class Checkpoint:
    weights: NetworkWeights
    topology: NetworkTopology
    neuron: NeuronConfig
    spec: ArmSpec
    normalization: float
    step: int = 0
    seed: int = 0
    train_config: TrainConfig = field(default_factory=TrainConfig)
    adam: dict[str, OptimizerState] | None = None
    history: list[dict] = field(default_factory=list)
    # running sum/count of batch losses within the current epoch
    epoch_loss: tuple[float, int] = (0.0, 0)

    @property
    def spec_fingerprint(self) -> str:
        return self.spec.fingerprint()

    def check_spec(self, spec: ArmSpec):
        if spec.fingerprint() != self.spec_fingerprint:
            raise SpecMismatchError(
                f"checkpoint was trained for arm {self.spec.to_dict()}, not {spec.to_dict()}"
            )


def loss_and_grad(
    inputs,
    targets,
    mask,
    weights: NetworkWeights,
    cfg: NeuronConfig,
    topo: NetworkTopology,
    reg_factor: float = 0.001,
    target_rate: float = 0.02,
):
    """Batch-mean loss and gradient.

    Per sample the loss is the MSE of the readouts against ``targets`` over the
    steps selected by ``mask``, plus ``reg_factor * sum_j (f_j - target_rate)^2``
    with ``f_j`` the neuron's mean spike count per step. Samples are averaged.
    """
    x = np.asarray(inputs, dtype=float)
    u = np.asarray(targets, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim == 2:
        x, u = x[None], u[None]
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    n_b, n_t, _ = x.shape
    n_mask = int(mask.sum())

    tape = forward(x, weights, cfg, topo)
    err = (tape.state.y - u) * mask[None, :, None]
    mse = np.sum(err**2, axis=(1, 2)) / (n_mask * topo.n_out)
    rates = tape.state.z.mean(axis=1)
    dev = rates - target_rate
    reg = reg_factor * np.sum(dev**2, axis=1)
    loss = float(np.mean(mse + reg))

    loss_grad = err * (2.0 / (n_b * n_mask * topo.n_out))
    spike_grad = np.broadcast_to((2.0 * reg_factor / (n_b * n_t)) * dev[:, None, :], tape.state.z.shape)
    grads = backward(tape, weights, cfg, topo, loss_grad, spike_grad)
    batch_rates = rates.mean(axis=0)
    stats = RateStats(batch_rates, float(batch_rates.mean()), float(np.mean(batch_rates == 0)))
    return loss, grads, stats


def predict(weights, cfg, topo, inputs, n_joints: int, chunk: int = 1024) -> np.ndarray:
    """Window-averaged pose predictions (N, n_joints, 7) for encoded inputs."""
    x = np.asarray(inputs, dtype=float)
    out = []
    for start in range(0, len(x), chunk):
        tape = forward(x[start:start + chunk], weights, cfg, topo)
        out.append(window_means(tape.state.y, n_joints))
    return np.concatenate(out)


def pose_errors(pred, positions_mm, quats, norm: float):
    """Per-sample, per-joint (position mm, orientation deg) errors."""
    pos_err = np.linalg.norm(pred[..., :3] * norm - positions_mm, axis=-1)
    rot_err = np.degrees(quat.angle_between(quats, pred[..., 3:7]))
    return pos_err, rot_err


def _summary(values: np.ndarray) -> dict:
    return {
        "median": float(np.median(values)),
        "q25": float(np.quantile(values, 0.25)),
        "q75": float(np.quantile(values, 0.75)),
        "mean": float(np.mean(values)),
    }


def evaluate(checkpoint: Checkpoint, dataset: Dataset) -> dict:
    """Prediction error summary over ``dataset``.

    Returns per-joint and end-effector statistics of the position error (mm and
    in units of the checkpoint's normalization) and orientation error (deg).
    """
    checkpoint.check_spec(dataset.spec)
    n = dataset.spec.n_joints
    pred = predict(checkpoint.weights, checkpoint.neuron, checkpoint.topology, dataset.inputs(), n)
    pos_err, rot_err = pose_errors(pred, dataset.positions, dataset.quats, checkpoint.normalization)
    return {
        "n_samples": len(dataset),
        "normalization_mm": checkpoint.normalization,
        "end_effector": {
            "pos_mm": _summary(pos_err[:, -1]),
            "pos_norm": _summary(pos_err[:, -1] / checkpoint.normalization),
            "rot_deg": _summary(rot_err[:, -1]),
        },
        "joints": [
            {"joint": k + 1, "pos_mm": _summary(pos_err[:, k]), "rot_deg": _summary(rot_err[:, k])}
            for k in range(n)
        ],
        "pos_err_mm": pos_err,
        "rot_err_deg": rot_err,
    }


def _check_topology(topo: NetworkTopology, spec: ArmSpec):
    if topo.n_in != n_inputs(spec.n_joints) or topo.n_out != POSE_WIDTH:
        raise SpecMismatchError(
            f"topology {topo} does not fit a {spec.n_joints}-joint arm "
            f"(needs n_in={n_inputs(spec.n_joints)}, n_out={POSE_WIDTH})"
        )


def initial_checkpoint(spec: ArmSpec, normalization: float, config: TrainConfig, neuron: NeuronConfig | None = None, topo: NetworkTopology | None = None) -> Checkpoint:
    topo = topo or NetworkTopology(n_in=n_inputs(spec.n_joints), n_hidden=config.n_hidden, n_out=POSE_WIDTH)
    _check_topology(topo, spec)
    rng = np.random.default_rng(config.seed)
    weights = init_weights(topo, rng, zero_diagonal=config.zero_self_recurrence, gain=config.init_gain)
    hyper = Hyper(eta=config.lr0)
    adam = {name: OptimizerState.zeros(w.shape, Hyper(**asdict(hyper))) for name, w in weights.as_dict().items()}
    return Checkpoint(
        weights=weights, topology=topo, neuron=neuron or NeuronConfig(), spec=spec,
        normalization=normalization, seed=config.seed, train_config=config, adam=adam,
    )


def train(
    train_set: Dataset,
    config: TrainConfig | None = None,
    test_set: Dataset | None = None,
    neuron: NeuronConfig | None = None,
    topo: NetworkTopology | None = None,
    resume: Checkpoint | None = None,
    checkpoint_every: int | None = None,
    on_checkpoint=None,
    max_updates: int | None = None,
):
    """Adam training with staircase lr/regularizer decay.

    Returns ``(checkpoint, history)``. ``history`` holds one row per completed
    epoch with the fields of ``HISTORY_FIELDS``. Runs are deterministic in
    ``config.seed``: weights come from ``default_rng(seed)`` and the sample
    order of epoch ``e`` from ``default_rng([seed, e])``, so a resumed run
    replays the uninterrupted one exactly. ``max_updates`` stops early (used
    to produce intermediate checkpoints).
    """
    if resume is not None:
        ckpt = copy.deepcopy(resume)
        config = ckpt.train_config if config is None else config
        ckpt.train_config = config
        ckpt.check_spec(train_set.spec)
    else:
        config = config or TrainConfig()
        ckpt = initial_checkpoint(train_set.spec, train_set.normalization, config, neuron, topo)
    _check_topology(ckpt.topology, train_set.spec)
    if test_set is not None:
        test_set.check_spec(train_set.spec)

    n = train_set.spec.n_joints
    n_samples = len(train_set)
    per_epoch = math.ceil(n_samples / config.batch_size)
    total = config.epochs * per_epoch
    if max_updates is not None:
        total = min(total, max_updates)
    mask = output_mask(n)
    perm_epoch, perm = -1, None
    loss_sum, loss_count = ckpt.epoch_loss
    last_good = None

    while ckpt.step < total:
        epoch, i = divmod(ckpt.step, per_epoch)
        if epoch != perm_epoch:
            perm = np.random.default_rng([config.seed, epoch]).permutation(n_samples)
            perm_epoch = epoch
        idx = np.sort(perm[i * config.batch_size:(i + 1) * config.batch_size])
        x = train_set.inputs(idx)
        u = target_sequence(train_set.targets(idx))
        lr = config.lr_at(ckpt.step)
        try:
            loss, grads, stats = loss_and_grad(
                x, u, mask, ckpt.weights, ckpt.neuron, ckpt.topology, config.reg_at(ckpt.step), config.target_rate
            )
        except (GradientExplosionError, NonFiniteGradientError):
            loss = float("nan")
        if not math.isfinite(loss):
            # the current weights already produce NaN: hand back the previous update's state
            if last_good is None:
                ckpt.epoch_loss = (loss_sum, loss_count)
                raise TrainingDivergedError(ckpt.step, ckpt)
            raise TrainingDivergedError(ckpt.step, last_good)
        # optimizer states get fresh arrays on every update, so a shallow copy is a snapshot
        last_good = copy.copy(ckpt)
        last_good.adam = {k: copy.copy(v) for k, v in ckpt.adam.items()}
        last_good.history = list(ckpt.history)
        last_good.epoch_loss = (loss_sum, loss_count)
        _apply_adam(ckpt, grads, lr)
        ckpt.step += 1
        loss_sum += loss
        loss_count += 1

        if ckpt.step % per_epoch == 0:
            row = {"update": ckpt.step, "epoch": epoch + 1, "lr": lr, "loss": loss_sum / loss_count}
            row.update(_test_metrics(ckpt, test_set))
            ckpt.history.append(row)
            log.info("epoch %d loss %.6f test %.3f mm / %.3f deg rate %.3f",
                     epoch + 1, row["loss"], row["test_pos_mm"], row["test_rot_deg"], stats.mean_rate)
            loss_sum, loss_count = 0.0, 0
        ckpt.epoch_loss = (loss_sum, loss_count)
        if checkpoint_every and on_checkpoint and ckpt.step % checkpoint_every == 0:
            on_checkpoint(copy.deepcopy(ckpt))
    return ckpt, list(ckpt.history)


def _apply_adam(ckpt: Checkpoint, grads: GradientSet, lr: float):
    new = {}
    for name, g in grads.as_dict().items():
        state = ckpt.adam[name]
        state.hyper.eta = lr
        new[name], _ = adam_step(getattr(ckpt.weights, name), g, state)
    ckpt.weights = NetworkWeights(**new)


def _test_metrics(ckpt: Checkpoint, test_set: Dataset | None) -> dict:
    if test_set is None:
        return {"test_pos_mm": float("nan"), "test_rot_deg": float("nan")}
    n = test_set.spec.n_joints
    pred = predict(ckpt.weights, ckpt.neuron, ckpt.topology, test_set.inputs(), n)
    pos_err, rot_err = pose_errors(pred[:, -1], test_set.positions[:, -1], test_set.quats[:, -1], ckpt.normalization)
    return {"test_pos_mm": float(np.median(pos_err)), "test_rot_deg": float(np.median(rot_err))}


def write_history_csv(history: list[dict], path):
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_FIELDS) + "\n")
        for row in history:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in HISTORY_FIELDS) + "\n")


# --- checkpoint persistence -------------------------------------------------

def _arrays(ckpt: Checkpoint) -> list[np.ndarray]:
    arrays = [getattr(ckpt.weights, name) for name in WEIGHT_NAMES]
    if ckpt.adam is not None:
        for name in WEIGHT_NAMES:
            st = ckpt.adam[name]
            arrays += [st.m, st.v, st.v_max, st.s]
    return arrays


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "topology": asdict(ckpt.topology),
        "neuron": asdict(ckpt.neuron),
        "spec": ckpt.spec.to_dict(),
        "spec_fingerprint": ckpt.spec_fingerprint,
        "normalization": ckpt.normalization,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "train_config": asdict(ckpt.train_config),
        "adam": None if ckpt.adam is None else {
            name: {"tau": st.tau, "hyper": asdict(st.hyper)} for name, st in ckpt.adam.items()
        },
        "history": ckpt.history,
        "epoch_loss": list(ckpt.epoch_loss),
    }
    head = json.dumps(header).encode()
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head
    body += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in _arrays(ckpt))
    return body + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadMagicError("not a trunksnn checkpoint (bad magic bytes)")
    off = len(CKPT_MAGIC)
    if len(blob) < off + 8:
        raise TruncatedFileError("checkpoint header is truncated")
    version, head_len = struct.unpack_from("<II", blob, off)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {CKPT_VERSION}")
    off += 8
    if len(blob) < off + head_len + 4:
        raise TruncatedFileError("checkpoint header is truncated")
    if zlib.crc32(blob[:-4]) != struct.unpack_from("<I", blob, len(blob) - 4)[0]:
        raise ChecksumError("checkpoint CRC32 mismatch")
    meta = json.loads(blob[off:off + head_len].decode())
    off += head_len

    topo = NetworkTopology(**meta["topology"])
    shapes = [(topo.n_in, topo.n_hidden), (topo.n_hidden, topo.n_hidden), (topo.n_hidden, topo.n_out)]
    n_arrays = 3 if meta["adam"] is None else 15
    all_shapes = shapes + ([s for s in shapes for _ in range(4)] if n_arrays == 15 else [])
    needed = sum(int(np.prod(s)) for s in all_shapes) * 8
    if len(blob) - 4 - off != needed:
        raise TruncatedFileError("checkpoint array payload has the wrong size")
    arrays = []
    for s in all_shapes:
        count = int(np.prod(s))
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(float).reshape(s))
        off += count * 8
    weights = NetworkWeights(*arrays[:3])
    adam = None
    if meta["adam"] is not None:
        adam = {}
        for i, name in enumerate(WEIGHT_NAMES):
            m, v, v_max, s = arrays[3 + 4 * i: 7 + 4 * i]
            info = meta["adam"][name]
            adam[name] = OptimizerState(m, v, v_max, s, info["tau"], Hyper(**info["hyper"]))
    spec = ArmSpec.from_dict(meta["spec"])
    if spec.fingerprint() != meta["spec_fingerprint"]:
        raise ChecksumError("arm spec fingerprint does not match the stored spec")
    return Checkpoint(
        weights=weights, topology=topo, neuron=NeuronConfig(**meta["neuron"]), spec=spec,
        normalization=meta["normalization"], step=meta["step"], seed=meta["seed"],
        train_config=TrainConfig(**meta["train_config"]), adam=adam, history=meta["history"],
        epoch_loss=tuple(meta["epoch_loss"]),
    )


def save_checkpoint(ckpt: Checkpoint, path):
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
