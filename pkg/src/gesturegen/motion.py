"""Canonical skeletal motion representation.

Motions are stored as per-joint rotation matrices relative to a reference
T-pose (identity rotations at every joint). All functions here are pure and
operate on immutable clips; callers get new arrays back.

Layout convention: a clip of L frames over J joints is an array of shape
(L, J, 3, 3), flattened to (L, J, 9) row-major where needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

ROTATION_TOL = 1e-4

EULER_ORDERS = ("xyz", "xzy", "yxz", "yzx", "zxy", "zyx")


class MotionError(ValueError):
    """Raised for malformed motion data or invalid motion operations."""


@dataclass(frozen=True)
class Skeleton:
    """Joint hierarchy. ``parents[j] == -1`` marks the root."""

    joint_names: tuple[str, ...]
    parents: tuple[int, ...]

    def __post_init__(self):
        if len(self.joint_names) < 1:
            raise MotionError("skeleton needs at least one joint")
        if len(self.parents) != len(self.joint_names):
            raise MotionError("joint_names and parents length mismatch")
        roots = [j for j, p in enumerate(self.parents) if p == -1]
        if len(roots) != 1:
            raise MotionError(f"expected exactly one root, found {len(roots)}")
        for j, p in enumerate(self.parents):
            if p != -1 and not 0 <= p < j:
                raise MotionError(
                    f"parent index {p} of joint {j} must precede it (tree order)"
                )

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)


@dataclass(frozen=True)
class MotionClip:
    """A fixed-rate sequence of per-joint rotation matrices.

    Attributes:
        skeleton: joint hierarchy the frames refer to.
        fps: frames per second, > 0.
        frames: array (L, J, 3, 3) of rotation matrices.
        meta: free-form metadata (e.g. the Euler order of the source data).
    """

    skeleton: Skeleton
    fps: float
    frames: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 4 or frames.shape[1:] != (self.skeleton.joint_count, 3, 3):
            raise MotionError(
                f"frames must have shape (L, {self.skeleton.joint_count}, 3, 3), "
                f"got {frames.shape}"
            )
        if frames.shape[0] < 1:
            raise MotionError("clip must contain at least one frame")
        if not self.fps > 0:
            raise MotionError(f"fps must be positive, got {self.fps}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return self.length / self.fps

    def flat(self) -> np.ndarray:
        """Frames as (L, J, 9), row-major per matrix."""
        return self.frames.reshape(self.length, self.skeleton.joint_count, 9)


@dataclass(frozen=True)
class DerivativeSequence:
    """Finite-difference derivative of a clip, per-frame units.

    ``values`` has shape (L, J, 9), matching the flattened source layout.
    """

    order: int
    values: np.ndarray

    def __post_init__(self):
        if self.order not in (1, 2):
            raise MotionError(f"order must be 1 or 2, got {self.order}")


def identity_clip(skeleton: Skeleton, length: int, fps: float = 30.0) -> MotionClip:
    """Clip of `length` reference-pose frames (identity rotations)."""
    frames = np.broadcast_to(
        np.eye(3), (length, skeleton.joint_count, 3, 3)
    ).copy()
    return MotionClip(skeleton, fps, frames)


def euler_to_rotation_matrices(
    angles: np.ndarray,
    skeleton: Skeleton,
    fps: float,
    convention: str = "xyz",
    degrees: bool = False,
) -> MotionClip:
    """Convert per-joint Euler angles to a rotation-matrix clip.

    Args:
        angles: array (L, J, 3) of Euler angles following `convention`.
        convention: one of the six proper axis orders ('xyz' ... 'zyx'),
            applied intrinsically in scipy's capitalized sense.
        degrees: interpret angles as degrees instead of radians.

    Raises:
        MotionError: non-finite input (reports frame/joint index) or an
            unknown axis order.
    """
    order = convention.lower()
    if order not in EULER_ORDERS:
        raise MotionError(f"convention must be one of {EULER_ORDERS}, got {convention!r}")
    angles = np.asarray(angles, dtype=np.float64)
    if angles.ndim != 3 or angles.shape[1:] != (skeleton.joint_count, 3):
        raise MotionError(
            f"angles must have shape (L, {skeleton.joint_count}, 3), got {angles.shape}"
        )
    bad = ~np.isfinite(angles)
    if bad.any():
        f, j, _ = np.argwhere(bad)[0]
        raise MotionError(f"non-finite angle at frame {f}, joint {j}")
    L, J, _ = angles.shape
    mats = Rotation.from_euler(order.upper(), angles.reshape(L * J, 3), degrees=degrees)
    frames = mats.as_matrix().reshape(L, J, 3, 3)
    return MotionClip(skeleton, fps, frames, meta={"euler_order": order})


def rotation_matrices_to_euler(
    clip: MotionClip, convention: str = "xyz", degrees: bool = False
) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation_matrices` (modulo gimbal ambiguity)."""
    order = convention.lower()
    if order not in EULER_ORDERS:
        raise MotionError(f"convention must be one of {EULER_ORDERS}, got {convention!r}")
    L, J = clip.length, clip.skeleton.joint_count
    rots = Rotation.from_matrix(clip.frames.reshape(L * J, 3, 3))
    return rots.as_euler(order.upper(), degrees=degrees).reshape(L, J, 3)


def resample_fps(clip: MotionClip, target_fps: float) -> MotionClip:
    """Resample a clip to `target_fps` by per-joint quaternion slerp.

    Output length is round(L * target_fps / fps). Sample instants are laid on
    the source frame grid at positions i * fps / target_fps, clamped to the
    clip; exact grid hits copy the source rotation.
    """
    if not target_fps > 0:
        raise MotionError(f"target_fps must be positive, got {target_fps}")
    if target_fps == clip.fps:
        return MotionClip(clip.skeleton, clip.fps, clip.frames.copy(), dict(clip.meta))
    L = clip.length
    out_len = int(round(L * target_fps / clip.fps))
    if out_len < 1:
        raise MotionError(
            f"resampling {L} frames from {clip.fps} to {target_fps} fps yields no frames"
        )
    positions = np.arange(out_len) * (clip.fps / target_fps)
    positions = np.clip(positions, 0.0, L - 1)
    J = clip.skeleton.joint_count
    out = np.empty((out_len, J, 3, 3))
    if L == 1:
        out[:] = clip.frames[0]
        return MotionClip(clip.skeleton, target_fps, out, dict(clip.meta))
    key_times = np.arange(L, dtype=np.float64)
    for j in range(J):
        slerp = Slerp(key_times, Rotation.from_matrix(clip.frames[:, j]))
        out[:, j] = slerp(positions).as_matrix()
    return MotionClip(clip.skeleton, target_fps, out, dict(clip.meta))


def finite_difference(clip: MotionClip, order: int) -> DerivativeSequence:
    """Per-frame derivative of the flattened 9-dim representation.

    Central differences on interior frames, one-sided stencils at the
    endpoints; the result has the same length as the clip. Units are
    per-frame (multiply by fps for per-second rates).
    """
    if order not in (1, 2):
        raise MotionError(f"order must be 1 or 2, got {order}")
    x = clip.flat()
    L = x.shape[0]
    if L < order + 1:
        raise MotionError(f"clip too short for order {order}: L={L}")
    return DerivativeSequence(order, _difference_values(x, order))


def _difference_values(x: np.ndarray, order: int) -> np.ndarray:
    """Stencil evaluation shared by both derivative orders (leading axis = time)."""
    out = np.empty_like(x)
    if order == 1:
        out[1:-1] = (x[2:] - x[:-2]) / 2.0
        out[0] = x[1] - x[0]
        out[-1] = x[-1] - x[-2]
    else:
        out[1:-1] = x[2:] - 2.0 * x[1:-1] + x[:-2]
        out[0] = x[2] - 2.0 * x[1] + x[0]
        out[-1] = x[-1] - 2.0 * x[-2] + x[-3]
    return out


def validate_rotations(clip: MotionClip, tol: float = ROTATION_TOL) -> list[tuple[int, int]]:
    """Report (frame, joint) pairs whose matrix is not orthonormal det-+1.

    Empty report means every matrix satisfies |R R^T - I| <= tol elementwise
    and det(R) within tol of +1.
    """
    R = clip.frames
    gram = np.einsum("fjab,fjcb->fjac", R, R)
    ortho_err = np.abs(gram - np.eye(3)).max(axis=(2, 3))
    det_err = np.abs(np.linalg.det(R) - 1.0)
    bad = (ortho_err > tol) | (det_err > tol)
    return [tuple(idx) for idx in np.argwhere(bad)]


def project_to_rotations(raw: np.ndarray) -> np.ndarray:
    """Project raw (..., 3, 3) matrices to the nearest proper rotations.

    SVD/polar projection: R = U diag(1, 1, det(U V^T)) V^T, the Frobenius-
    nearest orthonormal matrix with determinant +1. Idempotent on inputs
    that are already rotations.
    """
    raw = np.asarray(raw, dtype=np.float64)
    U, _, Vt = np.linalg.svd(raw)
    det = np.linalg.det(U @ Vt)
    d = np.ones(raw.shape[:-2] + (3,))
    d[..., 2] = det
    return (U * d[..., None, :]) @ Vt


def forward_kinematics_unit(clip: MotionClip) -> np.ndarray:
    """Joint world positions with unit bone lengths, shape (L, J, 3).

    Every non-root joint hangs one unit along the parent's rotated +Y axis.
    This is the minimal position map used by position-space metrics; it is
    not a retargeting-quality FK.
    """
    parents = clip.skeleton.parents
    L, J = clip.length, clip.skeleton.joint_count
    bone = np.array([0.0, 1.0, 0.0])
    glob = np.empty((L, J, 3, 3))
    pos = np.zeros((L, J, 3))
    for j in range(J):
        p = parents[j]
        if p == -1:
            glob[:, j] = clip.frames[:, j]
        else:
            glob[:, j] = glob[:, p] @ clip.frames[:, j]
            pos[:, j] = pos[:, p] + glob[:, p] @ bone
    return pos


def frame_velocity_magnitude(clip: MotionClip) -> np.ndarray:
    """Mean-over-joints Frobenius norm of the per-frame rotation change.

    Length L; entry 0 is 0. Used for seam-smoothness checks and beat
    detection thresholds.
    """
    diff = np.diff(clip.frames, axis=0)
    mag = np.linalg.norm(diff.reshape(diff.shape[0], diff.shape[1], 9), axis=2)
    out = np.zeros(clip.length)
    out[1:] = mag.mean(axis=1)
    return out


# ---------------------------------------------------------------------------
# Motion file format: self-describing JSON with bit-exact float round-trip.
# ---------------------------------------------------------------------------

MOTION_FORMAT_VERSION = 1


def save_motion(clip: MotionClip, path: str | Path) -> None:
    """Write a clip to a structured text document (JSON).

    Floats are serialized with Python's shortest round-trip repr, so
    write -> read recovers bit-identical frames.
    """
    doc = {
        "format": "gesturegen-motion",
        "version": MOTION_FORMAT_VERSION,
        "fps": clip.fps,
        "joint_names": list(clip.skeleton.joint_names),
        "parents": list(clip.skeleton.parents),
        "meta": clip.meta,
        "frames": clip.flat().tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_motion(path: str | Path) -> MotionClip:
    """Read a clip written by :func:`save_motion`."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "gesturegen-motion":
        raise MotionError(f"{path}: not a motion document")
    if doc.get("version") != MOTION_FORMAT_VERSION:
        raise MotionError(f"{path}: unsupported version {doc.get('version')}")
    skeleton = Skeleton(tuple(doc["joint_names"]), tuple(doc["parents"]))
    frames = np.asarray(doc["frames"], dtype=np.float64)
    frames = frames.reshape(frames.shape[0], skeleton.joint_count, 3, 3)
    return MotionClip(skeleton, doc["fps"], frames, doc.get("meta", {}))
