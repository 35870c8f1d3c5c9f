"""Batched unit-quaternion helpers, (w, x, y, z) component order.

All functions broadcast over leading axes; the last axis holds the 4
quaternion components (or 3 vector components).
"""
import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def multiply(q, r):
    """Hamilton product q ⊗ r."""
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(q, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(r, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def rotate(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonicalize(q):
    """Pick the representative with w >= 0 (q and -q are the same rotation)."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0.0, -q, q)


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(angle / 2.0), np.sin(angle / 2.0) * axis], axis=-1)


def about_x(angle):
    return from_axis_angle([1.0, 0.0, 0.0], angle)


def about_y(angle):
    return from_axis_angle([0.0, 1.0, 0.0], angle)


def shortest_arc_from_z(n):
    """Rotation taking +z onto the unit vector(s) ``n`` without twist.

    Undefined for n = -z; callers only pass upward-facing normals.
    """
    n = np.asarray(n, dtype=float)
    q = np.stack(
        [1.0 + n[..., 2], -n[..., 1], n[..., 0], np.zeros_like(n[..., 0])], axis=-1
    )
    return normalize(q)


def angle_between(q, r):
    """arccos(|<q, r>|) in radians after renormalizing ``r``.

    This is half the angle of the relative rotation: identity vs. a 90 degree
    turn gives pi/4.
    """
    q = np.asarray(q, dtype=float)
    r = normalize(r)
    dot = np.abs(np.sum(q * r, axis=-1))
    return np.arccos(np.clip(dot, -1.0, 1.0))
