"""Depth-based forward warping with a z-buffer.

Source RGB-D frames are lifted to world-frame point clouds and splatted
into a target camera, one pixel per point (nearest rounding). The target
pixel keeps the nearest point; exact depth ties go to the point with the
lower row-major source index. Pixels that receive nothing stay black with
``zbuf = +inf`` and ``m_geo = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .geometry import Camera, unproject_points


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray   # (N, 3) world frame
    colors: np.ndarray      # (N, 3) in [0, 1]
    source_pixel: np.ndarray  # (N, 2) int (row, col)
    source_shape: tuple = None

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class WarpedFrame:
    rgb: np.ndarray    # (H, W, 3)
    m_geo: np.ndarray  # (H, W) bool
    zbuf: np.ndarray   # (H, W), +inf where empty
    dropped: int = 0   # points behind the target camera


def valid_depth(depth):
    depth = np.asarray(depth)
    return np.isfinite(depth) & (depth > 0)


def depth_to_pointcloud(rgb, depth, cam: Camera) -> PointCloud:
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2 or rgb.shape[:2] != depth.shape or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"rgb {rgb.shape} and depth {depth.shape} must be (H, W, 3) and (H, W)")
    rows, cols = np.nonzero(valid_depth(depth))
    u = np.stack([cols, rows], axis=-1).astype(np.float64)
    P_cam = unproject_points(u, depth[rows, cols], cam.K_inv)
    return PointCloud(
        positions=cam.camera_to_world(P_cam),
        colors=rgb[rows, cols],
        source_pixel=np.stack([rows, cols], axis=-1),
        source_shape=depth.shape,
    )


def forward_warp(cloud: PointCloud, tgt: Camera, hw) -> WarpedFrame:
    H, W = (int(v) for v in hw)
    if H <= 0 or W <= 0:
        raise DomainError(f"target size must be positive, got {hw!r}")
    rgb = np.zeros((H, W, 3))
    zbuf = np.full((H, W), np.inf)
    if len(cloud) == 0:
        return WarpedFrame(rgb, np.zeros((H, W), dtype=bool), zbuf, 0)

    P = tgt.world_to_camera(cloud.positions)
    front = P[:, 2] > 0
    dropped = int(np.count_nonzero(~front))
    P = P[front]
    colors = cloud.colors[front]
    src = cloud.source_pixel[front]

    q = P @ tgt.K.T
    uv = q[:, :2] / q[:, 2:3]
    # round half up, the same on every platform
    col = np.floor(uv[:, 0] + 0.5)
    row = np.floor(uv[:, 1] + 0.5)
    inside = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    pix = (row[inside] * W + col[inside]).astype(np.int64)
    z = P[inside, 2]
    colors = colors[inside]
    src_w = cloud.source_shape[1] if cloud.source_shape else int(src[:, 1].max()) + 1
    src_idx = src[inside, 0].astype(np.int64) * src_w + src[inside, 1]

    # sort by pixel, then depth, then source index; keep the first per pixel
    order = np.lexsort((src_idx, z, pix))
    pix_s = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]

    flat_rgb = rgb.reshape(-1, 3)
    flat_z = zbuf.reshape(-1)
    flat_rgb[pix[win]] = colors[win]
    flat_z[pix[win]] = z[win]
    return WarpedFrame(rgb, np.isfinite(zbuf), zbuf, dropped)


def warp_frame(rgb, depth, src_cam, tgt_cam, hw=None):
    if hw is None:
        hw = np.shape(depth)
    return forward_warp(depth_to_pointcloud(rgb, depth, src_cam), tgt_cam, hw)


def warp_video(src, depths, src_cam: Camera, tgt_cam: Camera, hw=None):
    """Warp every frame independently; order preserved."""
    if len(src) != len(depths):
        raise DimensionError(f"{len(src)} frames but {len(depths)} depth maps")
    return [warp_frame(f, d, src_cam, tgt_cam, hw) for f, d in zip(src, depths)]


def coverage(frame: WarpedFrame):
    return float(np.mean(frame.m_geo))
