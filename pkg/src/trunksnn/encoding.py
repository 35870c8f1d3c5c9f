"""Sequence encoding of arm configurations and dataset persistence.

Joint ``k`` owns the steps ``[12k, 12k + 12)``. Its actuation vector is
injected on all 12 steps; clock column ``3 + k`` is 1 on window steps
5..11, which are also the steps whose readouts are supervised.

Dataset file layout (little-endian)::

    magic  b"STRK"
    u32    format version
    u32    variant (0 = three, 1 = four), u32 n_joints
    f64    tilt_max, stretch_max, base_height, gear_radius
    f64    normalization (mm)
    u64    sample count N
    f64    N records of n_joints*3 gears then n_joints*7 poses (x, y, z, qw, qx, qy, qz)
    u32    CRC32 of every preceding byte
"""
from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ShapeError,
    SpecMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .kinematics import ArmSpec, GearState, Pose, Variant, chain_arrays, sample_gears

WINDOW = 12
CLOCK_START = 5
N_OUTPUT_STEPS = WINDOW - CLOCK_START
ACTUATION_WIDTH = 3
POSE_WIDTH = 7

MAGIC = b"STRK"
VERSION = 1
_HEADER = struct.Struct("<4sIII4ddQ")
_CHUNK = 1024


def n_inputs(n_joints: int) -> int:
    return ACTUATION_WIDTH + n_joints


def sequence_length(n_joints: int) -> int:
    return WINDOW * n_joints


def output_mask(n_joints: int) -> np.ndarray:
    mask = np.zeros(sequence_length(n_joints), dtype=bool)
    for k in range(n_joints):
        mask[k * WINDOW + CLOCK_START:(k + 1) * WINDOW] = True
    return mask


def encode_inputs(gears) -> np.ndarray:
    """Input currents (..., T, 3 + n_joints) for actuation arrays (..., n_joints, 3)."""
    g = np.asarray(gears, dtype=float)
    n = g.shape[-2]
    lead = g.shape[:-2]
    x = np.zeros(lead + (n, WINDOW, n_inputs(n)))
    x[..., :ACTUATION_WIDTH] = g[..., :, None, :]
    idx = np.arange(n)
    x[..., idx, CLOCK_START:, ACTUATION_WIDTH + idx] = 1.0
    return x.reshape(lead + (n * WINDOW, n_inputs(n)))


def decode(inputs) -> np.ndarray:
    """Recover the actuation array from an encoded input sequence."""
    x = np.asarray(inputs, dtype=float)
    n = x.shape[-1] - ACTUATION_WIDTH
    if x.shape[-2] != sequence_length(n):
        raise ShapeError("input length does not match the clock width")
    return x[..., ::WINDOW, :ACTUATION_WIDTH].copy()


def pose_targets(positions, quats, norm: float) -> np.ndarray:
    """Stack (p / norm, q) into (..., n_joints, 7) targets."""
    return np.concatenate([np.asarray(positions) / norm, np.asarray(quats)], axis=-1)


def target_sequence(targets) -> np.ndarray:
    """Per-step targets (..., T, 7): each joint's target held across its window."""
    t = np.asarray(targets, dtype=float)
    return np.repeat(t, WINDOW, axis=-2)


def window_means(readouts, n_joints: int) -> np.ndarray:
    """Average readouts over each joint's output steps -> (..., n_joints, n_out)."""
    y = np.asarray(readouts, dtype=float)
    y = y.reshape(y.shape[:-2] + (n_joints, WINDOW, y.shape[-1]))
    return y[..., CLOCK_START:, :].mean(axis=-2)


@dataclass
class EncodedSample:
    inputs: np.ndarray  # (T, n_in)
    targets: np.ndarray  # (n_joints, 7)
    output_mask: np.ndarray  # (T,) bool


def encode(gears, poses, norm: float) -> EncodedSample:
    """Encode one configuration; ``poses`` is the :func:`forward_chain` output (base first)."""
    g = gears.values if isinstance(gears, GearState) else np.asarray(gears, dtype=float)
    n = g.shape[0]
    if len(poses) != n + 1:
        raise ShapeError(f"expected {n + 1} poses (base + {n} joints), got {len(poses)}")
    targets = np.stack([np.concatenate([p.p / norm, p.q]) for p in poses[1:]])
    return EncodedSample(encode_inputs(g), targets, output_mask(n))


@dataclass
class Dataset:
    spec: ArmSpec
    gears: np.ndarray  # (N, n_joints, 3)
    positions: np.ndarray  # (N, n_joints, 3) mm, joint 1 .. end-effector
    quats: np.ndarray  # (N, n_joints, 4), w >= 0
    normalization: float

    def __len__(self):
        return len(self.gears)

    def sample(self, i: int) -> tuple[GearState, list[Pose]]:
        poses = [Pose(np.zeros(3), [1.0, 0, 0, 0])]
        poses += [Pose(self.positions[i, k], self.quats[i, k]) for k in range(self.spec.n_joints)]
        return GearState(self.gears[i], self.spec), poses

    @property
    def samples(self):
        return [self.sample(i) for i in range(len(self))]

    def inputs(self, idx=slice(None)) -> np.ndarray:
        return encode_inputs(self.gears[idx])

    def targets(self, idx=slice(None)) -> np.ndarray:
        return pose_targets(self.positions[idx], self.quats[idx], self.normalization)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.spec, self.gears[idx], self.positions[idx], self.quats[idx], self.normalization)

    def check_spec(self, spec: ArmSpec):
        if spec != self.spec:
            raise SpecMismatchError(
                f"dataset was generated for {self.spec.to_dict()}, but {spec.to_dict()} is in use"
            )

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.spec == other.spec
            and self.normalization == other.normalization
            and np.array_equal(self.gears, other.gears)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.quats, other.quats)
        )


def mean_interjoint_distance(positions) -> float:
    """Mean over samples of the mean base-to-joint and joint-to-joint segment lengths."""
    pos = np.asarray(positions, dtype=float)
    full = np.concatenate([np.zeros(pos.shape[:-2] + (1, 3)), pos], axis=-2)
    seg = np.linalg.norm(np.diff(full, axis=-2), axis=-1)
    return float(seg.mean(axis=-1).mean())


def dataset_from_gears(spec: ArmSpec, gears, normalization: float | None = None) -> Dataset:
    gears = np.asarray(gears, dtype=float)
    pos, qs = chain_arrays(gears, spec)
    pos, qs = pos[:, 1:], qs[:, 1:]
    if normalization is None:
        normalization = mean_interjoint_distance(pos)
    return Dataset(spec, gears, pos, qs, normalization)


def generate_dataset(spec: ArmSpec, n_samples: int, seed: int, p_edge: float = 0.05) -> Dataset:
    """Draw ``n_samples`` random arm configurations and their joint poses.

    Samples come in fixed chunks of 1024, each with its own RNG stream
    derived from ``(seed, chunk index)``, so the content does not depend on
    how chunks are scheduled.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    chunks = []
    for c, start in enumerate(range(0, n_samples, _CHUNK)):
        rng = np.random.default_rng([seed, c])
        chunks.append(sample_gears(spec, rng, min(_CHUNK, n_samples - start), p_edge))
    return dataset_from_gears(spec, np.concatenate(chunks))


def dataset_bytes(ds: Dataset) -> bytes:
    spec = ds.spec
    variant = 0 if spec.variant is Variant.THREE_GEARED else 1
    head = _HEADER.pack(
        MAGIC, VERSION, variant, spec.n_joints,
        spec.tilt_max, spec.stretch_max, spec.base_height, spec.gear_radius,
        ds.normalization, len(ds),
    )
    n = len(ds)
    records = np.concatenate(
        [ds.gears.reshape(n, -1), np.concatenate([ds.positions, ds.quats], axis=-1).reshape(n, -1)], axis=1
    )
    body = head + records.astype("<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(ds: Dataset, path):
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(blob: bytes) -> Dataset:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a trunksnn dataset file (bad magic bytes)")
    if len(blob) < _HEADER.size + 4:
        raise TruncatedFileError("dataset header is truncated")
    (_, version, variant, n_joints, tilt, stretch, base, radius, norm, n) = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"dataset format version {version}, this build reads {VERSION}")
    width = n_joints * (ACTUATION_WIDTH + POSE_WIDTH)
    expected = _HEADER.size + n * width * 8 + 4
    if len(blob) < expected:
        raise TruncatedFileError(f"dataset file holds {len(blob)} bytes, header promises {expected}")
    if len(blob) > expected:
        raise ChecksumError("trailing bytes after dataset checksum")
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[: expected - 4]) != crc:
        raise ChecksumError("dataset CRC32 mismatch")
    spec = ArmSpec(
        variant=Variant.THREE_GEARED if variant == 0 else Variant.FOUR_GEARED,
        n_joints=n_joints, tilt_max=tilt, stretch_max=stretch, base_height=base, gear_radius=radius,
    )
    rec = np.frombuffer(blob, dtype="<f8", count=n * width, offset=_HEADER.size).astype(float).reshape(n, width)
    gears = rec[:, : n_joints * 3].reshape(n, n_joints, 3)
    poses = rec[:, n_joints * 3:].reshape(n, n_joints, POSE_WIDTH)
    return Dataset(spec, gears.copy(), poses[..., :3].copy(), poses[..., 3:].copy(), norm)


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def export_csv(ds: Dataset, path):
    """One row per sample: gear values, then the end-effector pose."""
    n = ds.spec.n_joints
    header = [f"j{k}_g{c}" for k in range(n) for c in range(3)]
    header += ["x_mm", "y_mm", "z_mm", "qw", "qx", "qy", "qz"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = list(ds.gears[i].ravel()) + list(ds.positions[i, -1]) + list(ds.quats[i, -1])
            w.writerow([repr(float(v)) for v in row])
