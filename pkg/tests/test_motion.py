import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gesturegen.motion import (
    DerivativeSequence,
    MotionClip,
    MotionError,
    Skeleton,
    _difference_values,
    euler_to_rotation_matrices,
    finite_difference,
    identity_clip,
    load_motion,
    project_to_rotations,
    resample_fps,
    rotation_matrices_to_euler,
    save_motion,
    validate_rotations,
)


def small_skeleton(j=3):
    return Skeleton(tuple(f"j{i}" for i in range(j)), (-1,) + tuple(range(j - 1)))


def _axis_rot(axis, theta):
    c, s = np.cos(theta), np.sin(theta)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


class TestSkeleton:
    def test_single_root_enforced(self):
        with pytest.raises(MotionError):
            Skeleton(("a", "b"), (-1, -1))

    def test_parent_must_precede(self):
        with pytest.raises(MotionError):
            Skeleton(("a", "b", "c"), (-1, 2, 1))


class TestEulerConversion:
    def test_zero_angles_give_identity(self):
        sk = small_skeleton()
        clip = euler_to_rotation_matrices(np.zeros((4, 3, 3)), sk, 30.0)
        assert np.allclose(clip.frames, np.eye(3))

    def test_half_turn_twice_composes_to_identity(self):
        sk = small_skeleton(1)
        angles = np.full((1, 1, 3), 0.0)
        angles[0, 0, 0] = np.pi
        clip = euler_to_rotation_matrices(angles, sk, 30.0)
        composed = clip.frames[0, 0] @ clip.frames[0, 0]
        assert np.allclose(composed, np.eye(3), atol=1e-12)

    def test_matches_three_matrix_product_oracle(self):
        # Oracle: explicit intrinsic composition R = Rx(a) @ Ry(b) @ Rz(c).
        rng = np.random.default_rng(7)
        sk = small_skeleton(2)
        angles = rng.uniform(-np.pi, np.pi, size=(5, 2, 3))
        clip = euler_to_rotation_matrices(angles, sk, 30.0, convention="xyz")
        for f in range(5):
            for j in range(2):
                a, b, c = angles[f, j]
                expected = _axis_rot("x", a) @ _axis_rot("y", b) @ _axis_rot("z", c)
                assert np.allclose(clip.frames[f, j], expected, atol=1e-12)

    def test_non_finite_rejected_with_location(self):
        sk = small_skeleton(2)
        angles = np.zeros((3, 2, 3))
        angles[2, 1, 0] = np.nan
        with pytest.raises(MotionError, match="frame 2, joint 1"):
            euler_to_rotation_matrices(angles, sk, 30.0)

    def test_unknown_convention(self):
        with pytest.raises(MotionError, match="convention"):
            euler_to_rotation_matrices(np.zeros((1, 1, 3)), small_skeleton(1), 30.0, "xxy")

    def test_round_trip_preserves_rotation_action(self):
        rng = np.random.default_rng(3)
        sk = small_skeleton(2)
        angles = rng.uniform(-np.pi, np.pi, size=(6, 2, 3))
        clip = euler_to_rotation_matrices(angles, sk, 30.0, "zyx")
        back = rotation_matrices_to_euler(clip, "zyx")
        clip2 = euler_to_rotation_matrices(back, sk, 30.0, "zyx")
        assert np.allclose(clip.frames, clip2.frames, atol=1e-6)


class TestResample:
    def _wavy_clip(self, sk, L, fps, freq=0.8):
        t = np.arange(L) / fps
        angles = np.zeros((L, sk.joint_count, 3))
        angles[:, 0, 0] = 0.5 * np.sin(2 * np.pi * freq * t)
        angles[:, 1, 2] = 0.3 * np.cos(2 * np.pi * freq * t)
        return euler_to_rotation_matrices(angles, sk, fps)

    def test_exact_halving_keeps_every_other_frame(self):
        sk = small_skeleton()
        clip = self._wavy_clip(sk, 120, 60.0)
        out = resample_fps(clip, 30.0)
        assert out.length == 60
        assert np.allclose(out.frames, clip.frames[::2], atol=1e-12)

    def test_identity_rate(self):
        sk = small_skeleton()
        clip = self._wavy_clip(sk, 30, 30.0)
        out = resample_fps(clip, 30.0)
        assert out.length == clip.length
        assert np.array_equal(out.frames, clip.frames)

    def test_constant_pose_stays_constant(self):
        sk = small_skeleton()
        angles = np.tile(np.array([0.4, -0.2, 0.9]), (20, sk.joint_count, 1))
        clip = euler_to_rotation_matrices(angles, sk, 30.0)
        out = resample_fps(clip, 47.0)
        assert out.length == round(20 * 47 / 30)
        assert np.allclose(out.frames, clip.frames[0], atol=1e-12)

    def test_output_passes_rotation_invariants(self):
        sk = small_skeleton()
        out = resample_fps(self._wavy_clip(sk, 40, 30.0), 50.0)
        assert validate_rotations(out) == []

    def test_zero_length_output_rejected(self):
        sk = small_skeleton()
        clip = self._wavy_clip(sk, 10, 30.0)
        with pytest.raises(MotionError):
            resample_fps(clip, 0.5)

    def test_up_down_round_trip_is_close(self):
        # Band-limited clip: doubling then halving the rate preserves count
        # and stays within 1e-3 rad geodesic distance per frame.
        sk = small_skeleton()
        clip = self._wavy_clip(sk, 60, 30.0, freq=0.5)
        back = resample_fps(resample_fps(clip, 60.0), 30.0)
        assert back.length == clip.length
        rel = np.einsum("fjab,fjab->fj", clip.frames, back.frames)
        ang = np.arccos(np.clip((rel - 1) / 2, -1, 1))
        assert ang.max() <= 1e-3


class TestFiniteDifference:
    def test_constant_clip_zero_derivatives(self):
        clip = identity_clip(small_skeleton(), 10)
        for order in (1, 2):
            d = finite_difference(clip, order)
            assert d.values.shape == (10, 3, 9)
            assert np.all(d.values == 0)

    def test_linear_ramp(self):
        # A linear ramp in raw entries: constant velocity, zero interior
        # acceleration. Built on raw arrays via the shared stencil.
        x = np.zeros((8, 1, 9))
        x[:, 0, 0] = 0.25 * np.arange(8)
        v = _difference_values(x, 1)
        a = _difference_values(x, 2)
        assert np.allclose(v[:, 0, 0], 0.25)
        assert np.allclose(a, 0.0, atol=1e-15)

    def test_matches_independent_stencil_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(9, 2, 9))
        v = _difference_values(x, 1)
        a = _difference_values(x, 2)
        # Oracle: direct per-entry stencil evaluation in loops.
        for i in range(9):
            for j in range(2):
                for k in range(9):
                    if i == 0:
                        ev = x[1, j, k] - x[0, j, k]
                        ea = x[2, j, k] - 2 * x[1, j, k] + x[0, j, k]
                    elif i == 8:
                        ev = x[8, j, k] - x[7, j, k]
                        ea = x[8, j, k] - 2 * x[7, j, k] + x[6, j, k]
                    else:
                        ev = (x[i + 1, j, k] - x[i - 1, j, k]) / 2
                        ea = x[i + 1, j, k] - 2 * x[i, j, k] + x[i - 1, j, k]
                    assert v[i, j, k] == pytest.approx(ev, rel=1e-12)
                    assert a[i, j, k] == pytest.approx(ea, rel=1e-12)

    def test_too_short_rejected(self):
        clip = identity_clip(small_skeleton(), 2)
        with pytest.raises(MotionError):
            finite_difference(clip, 2)

    def test_order_validation(self):
        with pytest.raises(MotionError):
            finite_difference(identity_clip(small_skeleton(), 5), 3)

    @settings(max_examples=30, deadline=None)
    @given(
        a=st.floats(-3, 3, allow_nan=False),
        b=st.floats(-3, 3, allow_nan=False),
        order=st.sampled_from([1, 2]),
        seed=st.integers(0, 10_000),
    )
    def test_linearity(self, a, b, order, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(7, 2, 9))
        y = rng.normal(size=(7, 2, 9))
        lhs = _difference_values(a * x + b * y, order)
        rhs = a * _difference_values(x, order) + b * _difference_values(y, order)
        assert np.allclose(lhs, rhs, atol=1e-9)


class TestValidation:
    def test_identity_clip_clean(self):
        assert validate_rotations(identity_clip(small_skeleton(), 5)) == []

    def test_scaled_matrix_flagged(self):
        clip = identity_clip(small_skeleton(), 5)
        frames = clip.frames.copy()
        frames[3, 1] *= 2.0
        bad = validate_rotations(MotionClip(clip.skeleton, clip.fps, frames))
        assert bad == [(3, 1)]

    def test_projection_recovers_validity(self):
        rng = np.random.default_rng(0)
        raw = np.eye(3) + 0.3 * rng.normal(size=(6, 2, 3, 3))
        proj = project_to_rotations(raw)
        clip = MotionClip(small_skeleton(2), 30.0, proj)
        assert validate_rotations(clip) == []

    def test_projection_idempotent_on_rotations(self):
        sk = small_skeleton(1)
        angles = np.random.default_rng(1).uniform(-3, 3, size=(4, 1, 3))
        clip = euler_to_rotation_matrices(angles, sk, 30.0)
        proj = project_to_rotations(clip.frames)
        assert np.allclose(proj, clip.frames, atol=1e-12)


class TestMotionFile:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        sk = small_skeleton()
        angles = rng.uniform(-np.pi, np.pi, size=(12, 3, 3))
        clip = euler_to_rotation_matrices(angles, sk, 30.0, "yzx")
        path = tmp_path / "clip.motion.json"
        save_motion(clip, path)
        loaded = load_motion(path)
        assert np.array_equal(loaded.frames, clip.frames)
        assert loaded.fps == clip.fps
        assert loaded.skeleton == clip.skeleton
        assert loaded.meta["euler_order"] == "yzx"

    def test_rejects_foreign_document(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(MotionError):
            load_motion(path)


class TestDerivativeSequenceType:
    def test_order_validated(self):
        with pytest.raises(MotionError):
            DerivativeSequence(3, np.zeros((2, 1, 9)))
