import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from trunksnn import quaternion as quat
from trunksnn.errors import GearRangeError, ShapeError
from trunksnn.kinematics import (
    ArmSpec,
    GearState,
    Pose,
    Variant,
    attachment_points_3,
    chain_arrays,
    forward_chain,
    joint_transform,
    plane_normal_3,
    project_gears,
    sample_gears,
    sample_random_pose,
)


def homogeneous_chain(gears, spec):
    """4x4 matrix composition built with scipy rotations (independent of the library)."""
    frames = [np.eye(4)]
    for g in gears:
        local = np.eye(4)
        if spec.variant is Variant.FOUR_GEARED:
            tmax = math.radians(spec.tilt_max)
            rot = Rotation.from_euler("x", g[0] * tmax) * Rotation.from_euler("y", g[1] * tmax)
            height = spec.base_height + (g[2] + 1) / 2 * spec.stretch_max * (1 - max(abs(g[0]), abs(g[1])))
        else:
            pts = brute_force_points(g, spec)
            n = plane_fit_normal(pts)
            axis = np.cross([0.0, 0.0, 1.0], n)
            s = np.linalg.norm(axis)
            angle = math.atan2(s, n[2])
            rot = Rotation.from_rotvec(axis / s * angle) if s > 0 else Rotation.identity()
            height = spec.base_height + pts[:, 2].mean()
        local[:3, :3] = rot.as_matrix()
        local[2, 3] = height
        frames.append(frames[-1] @ local)
    return frames


def brute_force_points(g, spec):
    return np.array([
        [spec.gear_radius * math.cos(math.radians(a)), spec.gear_radius * math.sin(math.radians(a)), gi * spec.stretch_max]
        for a, gi in zip((90.0, 210.0, 330.0), g)
    ])


def plane_fit_normal(points):
    centered = points - points.mean(axis=0)
    n = np.linalg.svd(centered)[2][-1]
    return n if n[2] > 0 else -n


def matrix_to_quat(m):
    x, y, z, w = Rotation.from_matrix(m[:3, :3]).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


@pytest.mark.parametrize("variant", ["three", "four"])
def test_chain_matches_matrix_oracle(variant):
    spec = ArmSpec.default(variant, 3)
    rng = np.random.default_rng(42)
    gears = sample_gears(spec, rng, 1000)
    pos, qs = chain_arrays(gears, spec)
    for i in range(1000):
        frames = homogeneous_chain(gears[i], spec)
        for k, f in enumerate(frames):
            np.testing.assert_allclose(pos[i, k], f[:3, 3], rtol=0, atol=1e-9)
            dist = 1.0 - abs(np.dot(qs[i, k], matrix_to_quat(f)))
            assert dist < 1e-9


def test_plane_normal_matches_least_squares_fit():
    spec = ArmSpec.default("three", 1)
    rng = np.random.default_rng(3)
    g = rng.random((500, 3))
    normals = plane_normal_3(g, spec)
    for gi, n in zip(g, normals):
        np.testing.assert_allclose(n, plane_fit_normal(brute_force_points(gi, spec)), rtol=0, atol=1e-10)
    np.testing.assert_allclose(attachment_points_3(g[0], spec), brute_force_points(g[0], spec), atol=1e-12)


def test_three_geared_symmetric_joint():
    spec = ArmSpec.default("three", 1)
    t, q = joint_transform([0.5, 0.5, 0.5], spec)
    np.testing.assert_allclose(t, [0, 0, spec.base_height + spec.stretch_max / 2])
    np.testing.assert_allclose(q, quat.IDENTITY, atol=1e-15)


def test_three_geared_calibration_reaches_tilt_max():
    spec = ArmSpec.default("three", 1)
    _, q = joint_transform([1.0, 0.0, 0.0], spec)
    assert math.degrees(2 * math.acos(q[0])) == pytest.approx(spec.tilt_max, abs=1e-9)
    t_up, _ = joint_transform([1.0, 1.0, 1.0], spec)
    t_down, _ = joint_transform([0.0, 0.0, 0.0], spec)
    assert t_up[2] - t_down[2] == pytest.approx(spec.stretch_max)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_four_geared_full_tilt(sign):
    spec = ArmSpec.default("four", 1)
    for stretch in (-1.0, 0.3, 1.0):
        t, q = joint_transform([sign, 0.0, stretch], spec)
        half = math.radians(16.0) / 2
        np.testing.assert_allclose(q, [math.cos(half), sign * math.sin(half), 0, 0], atol=1e-15)
        assert t[2] == spec.base_height


def test_straight_arm():
    spec = ArmSpec.default("four", 10)
    poses = forward_chain(GearState.neutral(spec), spec)
    assert len(poses) == 11
    np.testing.assert_allclose(poses[-1].p, [0, 0, 10 * (spec.base_height + spec.stretch_max / 2)], atol=1e-9)
    np.testing.assert_allclose(poses[-1].q, quat.IDENTITY, atol=1e-15)
    np.testing.assert_array_equal(poses[0].p, np.zeros(3))


def test_single_x_tilt_orientation():
    spec = ArmSpec.default("four", 1)
    theta = 0.4 * math.radians(spec.tilt_max)
    poses = forward_chain(np.array([[0.4, 0.0, 0.0]]), spec)
    np.testing.assert_allclose(poses[-1].q, [math.cos(theta / 2), math.sin(theta / 2), 0, 0], atol=1e-15)


def test_gear_validation():
    spec = ArmSpec.default("four", 2)
    with pytest.raises(GearRangeError):
        GearState([[0, 0, 1.5], [0, 0, 0]], spec)
    with pytest.raises(ShapeError):
        GearState([[0, 0, 0]], spec)
    with pytest.raises(GearRangeError):
        forward_chain(np.array([[0, 0, 0], [0, float("nan"), 0]]), spec)
    three = ArmSpec.default("three", 1)
    with pytest.raises(GearRangeError):
        GearState([[-0.1, 0.5, 0.5]], three)


def test_spec_defaults_and_validation():
    four, three = ArmSpec.default("four", 1), ArmSpec.default("three", 1)
    assert (four.tilt_max, four.stretch_max) == (16.0, 22.0)
    assert (three.tilt_max, three.stretch_max) == (40.0, 55.0)
    with pytest.raises(ValueError):
        ArmSpec.default("five", 2)
    with pytest.raises(ValueError):
        ArmSpec.default("four", 0)
    assert ArmSpec.from_dict(four.to_dict()) == four
    assert four.fingerprint() != ArmSpec.default("four", 2).fingerprint()


def test_pose_canonical_storage():
    p = Pose([1, 2, 3], [-2.0, 0, 0, 0])
    np.testing.assert_array_equal(p.q, [1.0, 0, 0, 0])


def test_sampling_determinism_and_range():
    spec = ArmSpec.default("four", 3)
    a = sample_random_pose(spec, np.random.default_rng(5))
    b = sample_random_pose(spec, np.random.default_rng(5))
    assert a == b
    g = sample_gears(spec, np.random.default_rng(0), 10_000, p_edge=0.0)
    lo, hi = spec.bounds
    assert np.all(g >= lo) and np.all(g <= hi)
    span = hi - lo
    assert np.all(g.min(axis=(0, 1)) - lo <= 0.01 * span)
    assert np.all(hi - g.max(axis=(0, 1)) <= 0.01 * span)


@pytest.mark.parametrize("variant", ["three", "four"])
def test_full_edge_probability_pins_every_joint(variant):
    spec = ArmSpec.default(variant, 4)
    g = sample_gears(spec, np.random.default_rng(1), 200, p_edge=1.0)
    lo, hi = spec.bounds
    assert np.all((g == lo) | (g == hi))


def test_projection_clips_into_box():
    spec = ArmSpec.default("four", 2)
    g = np.array([[1.5, -2.0, 0.3], [0.0, 0.2, -1.1]])
    np.testing.assert_array_equal(project_gears(g, spec), [[1.0, -1.0, 0.3], [0.0, 0.2, -1.0]])


# --- invariants ---------------------------------------------------------------

variants = st.sampled_from(["three", "four"])


@settings(max_examples=50, deadline=None)
@given(variants, st.integers(1, 12), st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_reach_bound(variant, n, seed, p_edge):
    spec = ArmSpec.default(variant, n)
    g = sample_gears(spec, np.random.default_rng(seed), 64, p_edge)
    pos, _ = chain_arrays(g, spec)
    assert np.all(np.linalg.norm(pos[:, -1], axis=-1) <= spec.max_reach + 1e-9)


@settings(max_examples=20, deadline=None)
@given(variants, st.integers(0, 2**31 - 1))
def test_quaternions_stay_unit_over_long_chains(variant, seed):
    spec = ArmSpec.default(variant, 75)
    g = sample_gears(spec, np.random.default_rng(seed), 8, p_edge=0.3)
    _, qs = chain_arrays(g, spec)
    assert np.all(np.abs(np.linalg.norm(qs, axis=-1) - 1.0) < 1e-9)
    assert np.all(qs[..., 0] >= 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_mirror_symmetry(n, seed):
    spec = ArmSpec.default("four", n)
    g = sample_gears(spec, np.random.default_rng(seed), 16)
    m = g.copy()
    m[..., :2] *= -1
    p, _ = chain_arrays(g, spec)
    pm, _ = chain_arrays(m, spec)
    np.testing.assert_allclose(pm[:, -1], p[:, -1] * [-1, -1, 1], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(variants, st.integers(1, 6), st.data())
def test_neutral_joint_insertion(variant, n, data):
    spec = ArmSpec.default(variant, n)
    k = data.draw(st.integers(0, n))
    g = sample_gears(spec, np.random.default_rng(data.draw(st.integers(0, 2**31 - 1))), 1)[0]
    longer = ArmSpec.default(variant, n + 1)
    g2 = np.insert(g, k, spec.neutral_joint, axis=0)
    p, q = chain_arrays(g, spec)
    p2, q2 = chain_arrays(g2, longer)
    step, _ = joint_transform(spec.neutral_joint, spec)
    shift = quat.rotate(q[k], step)
    np.testing.assert_allclose(p2[: k + 1], p[: k + 1], atol=1e-12)
    np.testing.assert_allclose(p2[k + 1:], p[k:] + shift, atol=1e-9)
    np.testing.assert_allclose(np.abs(np.sum(q2[k + 1:] * q[k:], axis=-1)), 1.0, atol=1e-12)
