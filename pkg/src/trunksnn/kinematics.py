"""Analytic forward kinematics for stackable trunk-arm joints.

Each joint maps a 3-component actuation vector to a local transform
(translation along the parent z axis, then a tilt of the child frame):

* ``ThreeGeared``: three linear gears in [0, 1] attached at 90/210/330 degrees
  on radius ``gear_radius``. Gear heights ``g_i * stretch_max`` define a plane;
  the child frame is tilted from parent z onto the plane normal and sits at
  ``base_height`` plus the mean gear height.
* ``FourGeared``: normalized ``(tilt_x, tilt_y, stretch)`` in [-1, 1]. The
  rotation is ``q_x(tilt_x * tilt_max) ⊗ q_y(tilt_y * tilt_max)``; the usable
  stretch ``(stretch + 1) / 2 * stretch_max`` shrinks linearly to zero as
  ``max(|tilt_x|, |tilt_y|)`` reaches 1.

Everything is vectorized over leading sample axes; :func:`forward_chain` and
:class:`Pose` are the scalar-friendly front end.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import quaternion as quat
from .errors import GearRangeError, ShapeError

GEAR_ANGLES_3 = np.deg2rad([90.0, 210.0, 330.0])


class Variant(str, enum.Enum):
    THREE_GEARED = "three"
    FOUR_GEARED = "four"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        aliases = {
            "three": cls.THREE_GEARED, "3": cls.THREE_GEARED, "threegeared": cls.THREE_GEARED,
            "four": cls.FOUR_GEARED, "4": cls.FOUR_GEARED, "fourgeared": cls.FOUR_GEARED,
        }
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        if key not in aliases:
            raise ValueError(f"unknown arm variant {name!r} (expected 'three' or 'four')")
        return aliases[key]


_DEFAULTS = {
    Variant.THREE_GEARED: dict(tilt_max=40.0, stretch_max=55.0, base_height=60.0),
    Variant.FOUR_GEARED: dict(tilt_max=16.0, stretch_max=22.0, base_height=45.0),
}


@dataclass(frozen=True)
class ArmSpec:
    """Geometry of a trunk arm; lengths in mm, angles in degrees.

    ``gear_radius`` defaults to the value at which one fully raised gear with
    the other two fully lowered tilts a 3-geared joint by exactly ``tilt_max``.
    The 4-geared chain does not depend on it.
    """

    variant: Variant
    n_joints: int
    tilt_max: float
    stretch_max: float
    base_height: float
    gear_radius: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant) if not isinstance(self.variant, Variant) else self.variant)
        if self.n_joints < 1:
            raise ValueError("n_joints must be >= 1")
        if not (0.0 < self.tilt_max < 90.0):
            raise ValueError("tilt_max must lie in (0, 90) degrees")
        if self.stretch_max <= 0 or self.base_height <= 0:
            raise ValueError("stretch_max and base_height must be > 0")
        if self.gear_radius is None:
            r = self.stretch_max / (1.5 * math.tan(math.radians(self.tilt_max)))
            object.__setattr__(self, "gear_radius", r)
        elif self.gear_radius <= 0:
            raise ValueError("gear_radius must be > 0")

    @classmethod
    def default(cls, variant, n_joints: int, **overrides) -> "ArmSpec":
        variant = Variant.parse(variant) if not isinstance(variant, Variant) else variant
        params = dict(_DEFAULTS[variant])
        params.update(overrides)
        return cls(variant=variant, n_joints=n_joints, **params)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-component (low, high) of one joint's actuation vector."""
        if self.variant is Variant.THREE_GEARED:
            return np.zeros(3), np.ones(3)
        return -np.ones(3), np.ones(3)

    @property
    def neutral_joint(self) -> np.ndarray:
        if self.variant is Variant.THREE_GEARED:
            return np.full(3, 0.5)
        return np.zeros(3)

    @property
    def max_reach(self) -> float:
        return self.n_joints * (self.base_height + self.stretch_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArmSpec":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Pose:
    """Position in mm and orientation quaternion (w, x, y, z), stored with w >= 0."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(3)
        q = quat.canonicalize(quat.normalize(np.asarray(self.q, dtype=float).reshape(4)))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])


class GearState:
    """Validated actuation array of shape (n_joints, 3)."""

    def __init__(self, values, spec: ArmSpec):
        values = np.array(values, dtype=float)
        if values.shape != (spec.n_joints, 3):
            raise ShapeError(f"gear state must have shape ({spec.n_joints}, 3), got {values.shape}")
        check_gears(values, spec)
        self.values = values
        self.spec = spec

    @classmethod
    def neutral(cls, spec: ArmSpec) -> "GearState":
        return cls(np.tile(spec.neutral_joint, (spec.n_joints, 1)), spec)

    def __eq__(self, other):
        return isinstance(other, GearState) and self.spec == other.spec and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"GearState({self.values.tolist()!r}, variant={self.spec.variant.value})"


def check_gears(gears, spec: ArmSpec):
    lo, hi = spec.bounds
    gears = np.asarray(gears, dtype=float)
    if gears.shape[-1] != 3:
        raise ShapeError("actuation vectors must have 3 components")
    bad = ~np.isfinite(gears) | (gears < lo) | (gears > hi)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise GearRangeError(f"gear value {gears[idx]!r} at {idx} outside [{lo[idx[-1]]}, {hi[idx[-1]]}]")


def project_gears(gears, spec: ArmSpec) -> np.ndarray:
    """Clip actuation values into the feasible box.

    The tilt/stretch coupling lives inside :func:`joint_transform`, so every
    point of the box is a feasible joint state.
    """
    lo, hi = spec.bounds
    return np.clip(gears, lo, hi)


def plane_normal_3(gears, spec: ArmSpec) -> np.ndarray:
    """Upward unit normal of the plane through the three gear attachment points."""
    g = np.asarray(gears, dtype=float)
    pts = attachment_points_3(g, spec)
    n = np.cross(pts[..., 1, :] - pts[..., 0, :], pts[..., 2, :] - pts[..., 0, :])
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(n[..., 2:3] < 0, -n, n)


def attachment_points_3(gears, spec: ArmSpec) -> np.ndarray:
    g = np.asarray(gears, dtype=float)
    r = spec.gear_radius
    xy = np.stack([r * np.cos(GEAR_ANGLES_3), r * np.sin(GEAR_ANGLES_3)], axis=-1)
    xy = np.broadcast_to(xy, g.shape + (2,))
    return np.concatenate([xy, (g * spec.stretch_max)[..., None]], axis=-1)


def joint_transform(joint_gears, spec: ArmSpec, validate: bool = True):
    """Local (translation mm, rotation quaternion) for actuation vectors (..., 3)."""
    g = np.asarray(joint_gears, dtype=float)
    if validate:
        check_gears(g, spec)
    trans = np.zeros(g.shape[:-1] + (3,))
    if spec.variant is Variant.THREE_GEARED:
        rot = quat.shortest_arc_from_z(plane_normal_3(g, spec))
        trans[..., 2] = spec.base_height + spec.stretch_max * g.mean(axis=-1)
    else:
        tmax = math.radians(spec.tilt_max)
        rot = quat.multiply(quat.about_x(g[..., 0] * tmax), quat.about_y(g[..., 1] * tmax))
        coupling = 1.0 - np.maximum(np.abs(g[..., 0]), np.abs(g[..., 1]))
        trans[..., 2] = spec.base_height + 0.5 * (g[..., 2] + 1.0) * spec.stretch_max * coupling
    return trans, rot


def chain_arrays(gears, spec: ArmSpec, validate: bool = True):
    """Vectorized chain: gears (..., n_joints, 3) -> positions (..., n+1, 3), quats (..., n+1, 4).

    Index 0 is the base frame, index ``n_joints`` the end-effector.
    """
    g = np.asarray(gears, dtype=float)
    if g.shape[-2:] != (spec.n_joints, 3):
        raise ShapeError(f"gears must end in shape ({spec.n_joints}, 3), got {g.shape}")
    trans, rot = joint_transform(g, spec, validate=validate)
    lead = g.shape[:-2]
    pos = np.zeros(lead + (spec.n_joints + 1, 3))
    qs = np.zeros(lead + (spec.n_joints + 1, 4))
    p = np.zeros(lead + (3,))
    q = np.broadcast_to(quat.IDENTITY, lead + (4,)).copy()
    qs[..., 0, :] = q
    for k in range(spec.n_joints):
        p = p + quat.rotate(q, trans[..., k, :])
        q = quat.normalize(quat.multiply(q, rot[..., k, :]))
        pos[..., k + 1, :] = p
        qs[..., k + 1, :] = q
    return pos, quat.canonicalize(qs)


def forward_chain(gears, spec: ArmSpec) -> list[Pose]:
    """Poses of the base, each joint's distal frame, and (last) the end-effector."""
    values = gears.values if isinstance(gears, GearState) else gears
    pos, qs = chain_arrays(values, spec)
    return [Pose(pos[k], qs[k]) for k in range(spec.n_joints + 1)]


def sample_gears(spec: ArmSpec, rng: np.random.Generator, n_samples: int, p_edge: float = 0.05) -> np.ndarray:
    """Uniform actuation samples (n_samples, n_joints, 3).

    With probability ``p_edge`` a joint is pinned to a corner of its range
    (every component at a random extreme), giving heavily twisted arms.
    """
    lo, hi = spec.bounds
    shape = (n_samples, spec.n_joints, 3)
    g = lo + (hi - lo) * rng.random(shape)
    pinned = rng.random((n_samples, spec.n_joints)) < p_edge
    corners = np.where(rng.random(shape) < 0.5, lo, hi)
    g = np.where(pinned[..., None], corners, g)
    return project_gears(g, spec)


def sample_random_pose(spec: ArmSpec, rng: np.random.Generator, p_edge: float = 0.05) -> GearState:
    return GearState(sample_gears(spec, rng, 1, p_edge)[0], spec)
