#!/usr/bin/env python3
"""
RCTrans Desk - Camera Geometry

Frustum constructions and coordinate transforms between feature-grid pixels,
camera frustum points (u*d, v*d, d, 1), world coordinates and the normalized
[0, 1]^3 reference space of object queries.

All functions are pure and vectorized over leading axes.
"""

from typing import Any, Tuple

import numpy as np

from .models import CalibrationError, CameraCalib, DepthBins, WorldRange

__all__ = [
    "CalibrationError",
    "feature_pixel_centers",
    "frustum_points",
    "frustum_to_world",
    "world_to_frustum",
    "denormalize_refs",
    "normalize_refs",
]


def feature_pixel_centers(calib: CameraCalib) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of every feature cell center, row-major over (row, col).

    pixel = (index + 0.5) * feature_stride
    """
    feat_h, feat_w = calib.feature_size
    rows, cols = np.meshgrid(np.arange(feat_h), np.arange(feat_w), indexing="ij")
    u = (cols.reshape(-1) + 0.5) * calib.feature_stride
    v = (rows.reshape(-1) + 0.5) * calib.feature_stride
    return u.astype(np.float64), v.astype(np.float64)


def frustum_points(u_px: Any, v_px: Any, bins: DepthBins) -> np.ndarray:
    """Homogeneous frustum points (u*d_i, v*d_i, d_i, 1) for every depth bin.

    Returns an array of shape ``shape(u_px) + (d, 4)``.
    """
    u = np.asarray(u_px, dtype=np.float64)[..., None]
    v = np.asarray(v_px, dtype=np.float64)[..., None]
    depths = bins.as_array()
    u, v, d = np.broadcast_arrays(u, v, depths)
    return np.stack([u * d, v * d, d, np.ones_like(d)], axis=-1)


def frustum_to_world(calib: CameraCalib, pts: np.ndarray) -> np.ndarray:
    """Lift frustum points through inverse intrinsics, then the camera-to-world transform."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.shape[-1] != 4:
        raise ValueError(f"frustum points must end in 4 components, got {pts.shape}")
    k_inv = np.linalg.inv(calib.intrinsics)
    cam = pts[..., :3] @ k_inv.T
    return cam @ calib.rotation.T + calib.translation


def world_to_frustum(calib: CameraCalib, world_pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project world points into frustum form (u*d, v*d, d, 1).

    The visibility flag is false for points with depth <= 0 or whose pixel falls
    outside the image.
    """
    world = np.asarray(world_pts, dtype=np.float64)
    cam = (world - calib.translation) @ calib.rotation
    uvd = cam @ calib.intrinsics.T
    depth = uvd[..., 2]
    pts = np.concatenate([uvd, np.ones(depth.shape + (1,))], axis=-1)

    height, width = calib.image_size
    with np.errstate(divide="ignore", invalid="ignore"):
        u = uvd[..., 0] / depth
        v = uvd[..., 1] / depth
    visible = (depth > 0) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    return pts, visible


def denormalize_refs(refs: Any, world_range: WorldRange) -> Any:
    """r' = r * (max - min) + min per axis.

    Works on numpy arrays and on tensors (the arithmetic is shared).
    """
    return refs * world_range.span + world_range.lower


def normalize_refs(world: Any, world_range: WorldRange) -> Any:
    """Inverse of ``denormalize_refs``; values outside [0, 1] are kept."""
    return (world - world_range.lower) / world_range.span
