"""Pinhole camera math and multi-frame 3D anchor tracking.

Conventions: +x right, +y down, +z forward; pixel (0, 0) is the centre of
the top-left pixel; ``u = (column, row)``. A camera's pose maps world
points into camera coordinates, ``X_cam = R @ X_world + T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    DomainError,
    InsufficientFramesError,
    InvalidCameraError,
    InvalidRotationError,
)

ROTATION_TOL = 1e-9


def _as_vec(x, n, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise DomainError(f"{name} must have shape ({n},), got {a.shape}")
    return a


def check_rotation(R, tol=ROTATION_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotationError(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise InvalidRotationError("rotation is not orthonormal")
    if np.linalg.det(R) <= 0:
        raise InvalidRotationError("rotation has det(R) != +1")
    return R


def rot_axis(axis, angle):
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0:
        raise DomainError("rotation axis must be non-zero")
    x, y, z = a / n
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def rot_x(angle):
    return rot_axis((1.0, 0.0, 0.0), angle)


def rot_y(angle):
    return rot_axis((0.0, 1.0, 0.0), angle)


def rot_z(angle):
    return rot_axis((0.0, 0.0, 1.0), angle)


def intrinsics(fx, fy, cx, cy, skew=0.0):
    return np.array([[fx, skew, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Camera:
    """Intrinsics ``K`` plus world-to-camera pose ``(R, T)``."""

    K: np.ndarray
    R: np.ndarray = None
    T: np.ndarray = None

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64)
        if K.shape != (3, 3) or not np.all(np.isfinite(K)):
            raise InvalidCameraError(f"K must be a finite 3x3 matrix, got shape {K.shape}")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise InvalidCameraError("K must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidCameraError("K must have positive focal lengths (singular K)")
        if K[2, 2] != 1.0:
            raise InvalidCameraError("K[2][2] must be 1")
        R = np.eye(3) if self.R is None else np.array(self.R, dtype=np.float64)
        T = np.zeros(3) if self.T is None else np.array(self.T, dtype=np.float64)
        try:
            check_rotation(R)
        except InvalidRotationError as exc:
            raise InvalidCameraError(str(exc)) from None
        if T.shape != (3,) or not np.all(np.isfinite(T)):
            raise InvalidCameraError(f"T must be a finite 3-vector, got shape {T.shape}")
        for name, arr in (("K", K), ("R", R), ("T", T)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, R=None, T=None, skew=0.0):
        return cls(intrinsics(fx, fy, cx, cy, skew), R, T)

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.R.T @ self.T

    @property
    def K_inv(self):
        # closed-form inverse of an upper-triangular K
        fx, s, cx = self.K[0]
        fy, cy = self.K[1, 1], self.K[1, 2]
        return np.array([
            [1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy)],
            [0.0, 1.0 / fy, -cy / fy],
            [0.0, 0.0, 1.0],
        ])

    def world_to_camera(self, X):
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.T

    def camera_to_world(self, X):
        return (np.asarray(X, dtype=np.float64) - self.T) @ self.R

    def to_dict(self):
        d = {
            "fx": float(self.K[0, 0]),
            "fy": float(self.K[1, 1]),
            "cx": float(self.K[0, 2]),
            "cy": float(self.K[1, 2]),
            "R": [float(v) for v in self.R.ravel()],
            "T": [float(v) for v in self.T],
        }
        if self.K[0, 1] != 0:
            d["skew"] = float(self.K[0, 1])
        return d

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"fx", "fy", "cx", "cy", "R", "T", "skew"}
        if extra:
            raise InvalidCameraError(f"unknown camera fields: {sorted(extra)}")
        try:
            R = np.asarray(d["R"], dtype=np.float64).reshape(3, 3)
            T = np.asarray(d["T"], dtype=np.float64).reshape(3)
            return cls.from_intrinsics(d["fx"], d["fy"], d["cx"], d["cy"], R, T, d.get("skew", 0.0))
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidCameraError(f"malformed camera record: {exc}") from None

    def __repr__(self):
        return f"Camera(fx={self.K[0, 0]:g}, fy={self.K[1, 1]:g}, cx={self.K[0, 2]:g}, cy={self.K[1, 2]:g})"


@dataclass(frozen=True)
class Pixel:
    u: tuple
    z: float

    def __post_init__(self):
        object.__setattr__(self, "u", tuple(float(v) for v in self.u))
        object.__setattr__(self, "z", float(self.z))
        if len(self.u) != 2:
            raise DomainError("pixel coordinate must have two components")


@dataclass(frozen=True, eq=False)
class AnchorResult:
    anchor3d: np.ndarray
    anchor2d: np.ndarray
    sample_indices: tuple


def unproject_points(u, z, K_inv):
    """Vectorised lift: ``u`` is (..., 2), ``z`` is (...). Returns (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    uh = np.concatenate([u, np.ones(u.shape[:-1] + (1,))], axis=-1)
    return z[..., None] * (uh @ K_inv.T)


def project_points(P, K):
    """Vectorised dehomogenised ``K @ P``. No depth check."""
    P = np.asarray(P, dtype=np.float64)
    q = P @ K.T
    return q[..., :2] / q[..., 2:3]


def unproject(p, cam):
    """Pixel plus depth to a camera-frame 3D point."""
    if not isinstance(p, Pixel):
        p = Pixel(*p)
    if not p.z > 0:
        raise DomainError(f"depth must be positive, got {p.z!r}")
    return unproject_points(np.array(p.u), np.array(p.z), cam.K_inv)


def apply_ego_motion(P, R, T):
    R = check_rotation(R)
    return R @ _as_vec(P, 3, "P") + _as_vec(T, 3, "T")


def centroid(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise DomainError("centroid of an empty sequence")
    pts = pts.reshape(-1, 3)
    return pts.sum(axis=0) / len(pts)


def project(P, cam, frame="camera"):
    """Project a 3D point to pixel coordinates.

    ``frame`` says whether ``P`` is expressed in the camera frame or must
    first be moved there with the camera pose.
    """
    P = _as_vec(P, 3, "P")
    if frame == "world":
        P = cam.world_to_camera(P)
    elif frame != "camera":
        raise DomainError(f"frame must be 'camera' or 'world', got {frame!r}")
    if not P[2] > 0:
        raise BehindCameraError(f"point at depth {P[2]!r} is at or behind the camera plane")
    return project_points(P, cam.K)


def relative_pose(src, tgt):
    """``(R, T)`` taking source-camera coordinates to target-camera coordinates."""
    R = tgt.R @ src.R.T
    T = tgt.T - R @ src.T
    return R, T


def bilinear_depth(depth, u):
    """Bilinearly interpolated depth at continuous pixel ``u = (col, row)``."""
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    x, y = float(u[0]), float(u[1])
    if not (0.0 <= x <= W - 1 and 0.0 <= y <= H - 1):
        raise DomainError(f"pixel {u!r} outside depth map of size {W}x{H}")
    x0 = min(int(np.floor(x)), W - 2) if W > 1 else 0
    y0 = min(int(np.floor(y)), H - 2) if H > 1 else 0
    fx, fy = x - x0, y - y0
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    top = (1 - fx) * depth[y0, x0] + fx * depth[y0, x1]
    bot = (1 - fx) * depth[y1, x0] + fx * depth[y1, x1]
    return (1 - fy) * top + fy * bot


def anchor_track(centers: Sequence[Pixel], src_cam: Camera, tgt_cam: Camera,
                 consensus_size: int = 5, seed: int = 0) -> AnchorResult:
    """Locate a foreground centre in the target view from several source frames.

    A seeded subset of ``consensus_size`` frames is drawn without
    replacement; each centre is lifted with its depth, moved into the target
    camera frame, the lifted points are averaged there, and the average is
    projected with the target intrinsics.
    """
    n = len(centers)
    if consensus_size < 1:
        raise DomainError("consensus_size must be at least 1")
    if n < consensus_size:
        raise InsufficientFramesError(f"need {consensus_size} source frames, got {n}")
    rng = np.random.default_rng(seed)
    idx = tuple(int(i) for i in rng.choice(n, size=consensus_size, replace=False))
    R, T = relative_pose(src_cam, tgt_cam)
    moved = []
    for k in idx:
        p = centers[k]
        if not isinstance(p, Pixel):
            p = Pixel(*p)
        if not p.z > 0:
            raise DomainError(f"non-positive depth {p.z!r} at frame {k}")
        P = unproject(p, src_cam)
        P_t = R @ P + T
        if not P_t[2] > 0:
            raise BehindCameraError("lifted centre lies behind the target camera", index=k)
        moved.append(P_t)
    anchor3d = centroid(moved)
    if not anchor3d[2] > 0:
        raise BehindCameraError("anchor lies behind the target camera", index=idx[0])
    return AnchorResult(anchor3d, project_points(anchor3d, tgt_cam.K), idx)
