"""Range-view projection: spherical mapping of a sweep onto an H x W raster.

Two variants are provided.  The original variant bins points by
elevation angle; the scan-unfolding variant assigns rows by sensor ring
(captured order), which keeps non-uniformly spaced beams from colliding
and therefore yields a higher valid projection rate.  Both resolve
pixel collisions by keeping the point with the smallest radial
distance (ties broken toward the smaller point index).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .ingest import ConfigError, PointCloud, PointPixelMap, _readonly


class DegeneratePointError(ValueError):
    """Raised for points at the sensor origin, whose angles are undefined."""


@dataclass(frozen=True)
class RvSensorConfig:
    """Range-image raster size and vertical field of view (radians)."""

    height: int
    width: int
    fov_up: float
    fov_down: float

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError("height and width must be >= 1")
        if not self.fov_up > self.fov_down:
            raise ConfigError("fov_up must exceed fov_down")

    @property
    def fov(self) -> float:
        return self.fov_up - self.fov_down


# FOV defaults are standard figures for the respective 64- and 32-beam
# sensors; they are overridable configuration, not derived quantities.
KITTI_RV = RvSensorConfig(64, 2048, math.radians(3.0), math.radians(-25.0))
NUSCENES_RV = RvSensorConfig(32, 1024, math.radians(10.0), math.radians(-30.0))


@dataclass(frozen=True)
class RangeImage:
    """Dense range-view product of one sweep.

    features   : (H, W, 5) float32, channels (x, y, z, r, remission);
                 all-zero for empty pixels.
    point_index: (H, W) int32 map pixel -> kept point, -1 for empty.
    point_pixels: per-point (row, col) in this raster; (-1, -1) for
                 points dropped as degenerate.
    labels     : optional (H, W) int32 raster from the kept points.
    """

    features: np.ndarray
    point_index: np.ndarray
    point_pixels: PointPixelMap
    fingerprint: bytes
    labels: np.ndarray | None = None
    dropped_points: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.point_index.shape


def spherical_coords(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cartesian (..., 3) -> (azimuth psi, elevation phi, range r).

    psi = atan2(y, x) in (-pi, pi], phi = asin(z / r).  Points on the
    vertical axis (x = y = 0) take psi = 0 by convention.  Raises for
    any point exactly at the origin (r = 0), where both angles are
    undefined; callers that prefer dropping such points must mask them
    first.
    """
    pts = np.asarray(xyz, dtype=np.float64)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    if np.any(r == 0.0):
        bad = int(np.flatnonzero(np.atleast_1d(r) == 0.0)[0])
        raise DegeneratePointError(f"point {bad} lies at the sensor origin")
    psi = np.arctan2(y, x)
    phi = np.arcsin(np.clip(z / r, -1.0, 1.0))
    return psi, phi, r


def rv_pixel(psi, phi, cfg: RvSensorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Continuous image coordinates (u_col, v_row) before discretization.

    u = (1 - psi/pi)/2 * W grows opposite to azimuth; v = (fov_up -
    phi)/fov * H grows downward from the top of the FOV.
    """
    u = (1.0 - np.asarray(psi) / math.pi) / 2.0 * cfg.width
    v = (cfg.fov_up - np.asarray(phi)) / cfg.fov * cfg.height
    return u, v


def _discretize(u, v, cfg: RvSensorConfig) -> tuple[np.ndarray, np.ndarray]:
    # floor then clamp keeps edge beams inside the raster
    cols = np.clip(np.floor(u).astype(np.int64), 0, cfg.width - 1).astype(np.int32)
    rows = np.clip(np.floor(v).astype(np.int64), 0, cfg.height - 1).astype(np.int32)
    return rows, cols


def _rasterize(
    cloud: PointCloud,
    rows: np.ndarray,
    cols: np.ndarray,
    valid: np.ndarray,
    r: np.ndarray,
    cfg: RvSensorConfig,
    empty_label: int,
) -> RangeImage:
    """Scatter points onto the raster keeping the nearest per pixel.

    Points are written in order of decreasing range (ties in decreasing
    point index), so the last write per pixel is the minimal-range
    point with the smallest index; NumPy applies fancy-index
    assignments sequentially, which makes the reduction deterministic.
    """
    h, w = cfg.height, cfg.width
    n = len(cloud)

    idx_valid = np.flatnonzero(valid)
    # monotone uint32 view of the (non-negative) float32 range for a radix sort
    rbits = r[idx_valid].astype(np.float32).view(np.uint32)
    order = idx_valid[np.argsort(rbits, kind="stable")[::-1]]

    flat = rows.astype(np.int64) * w + cols
    point_index = np.full(h * w, -1, dtype=np.int32)
    point_index[flat[order]] = order.astype(np.int32)

    per_point = np.empty((n, 5), dtype=np.float32)
    per_point[:, :3] = cloud.points[:, :3]
    per_point[:, 3] = r.astype(np.float32)
    per_point[:, 4] = cloud.points[:, 3]

    occupied = point_index >= 0
    features = np.zeros((h * w, 5), dtype=np.float32)
    features[occupied] = per_point[point_index[occupied]]

    labels_img = None
    if cloud.labels is not None:
        labels_img = np.full(h * w, empty_label, dtype=np.int32)
        labels_img[occupied] = cloud.labels[point_index[occupied]]
        labels_img = _readonly(labels_img.reshape(h, w))

    coords = np.full((n, 2), -1, dtype=np.int32)
    coords[valid, 0] = rows[valid]
    coords[valid, 1] = cols[valid]

    return RangeImage(
        features=_readonly(features.reshape(h, w, 5)),
        point_index=_readonly(point_index.reshape(h, w)),
        point_pixels=PointPixelMap(coords, (h, w)),
        fingerprint=cloud.fingerprint(),
        labels=labels_img,
        dropped_points=int(n - valid.sum()),
    )


def _safe_angles(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Angles for all points with degenerate ones masked out and counted."""
    pts = cloud.points[:, :3].astype(np.float64)
    r = np.sqrt((pts * pts).sum(axis=1))
    valid = r > 0.0
    dropped = int(len(r) - valid.sum())
    if dropped:
        warnings.warn(f"dropping {dropped} degenerate point(s) at the sensor origin", stacklevel=3)
    psi = np.arctan2(pts[:, 1], pts[:, 0])
    with np.errstate(invalid="ignore"):
        phi = np.arcsin(np.clip(np.where(valid, pts[:, 2] / np.where(valid, r, 1.0), 0.0), -1.0, 1.0))
    return psi, phi, r, valid


def project_rv_original(
    cloud: PointCloud, cfg: RvSensorConfig = KITTI_RV, empty_label: int = -1
) -> RangeImage:
    """Elevation-binned range image (rows from phi, columns from psi)."""
    psi, phi, r, valid = _safe_angles(cloud)
    u, v = rv_pixel(psi, phi, cfg)
    rows, cols = _discretize(u, v, cfg)
    return _rasterize(cloud, rows, cols, valid, r, cfg, empty_label)


def infer_rings(psi: np.ndarray) -> np.ndarray:
    """Recover ring ids from azimuth in capture order.

    A sweep walks azimuth from +pi down to -pi within each ring, so a
    jump of more than pi upward marks the start of the next ring.
    Requires ring-major (sweep) point order.
    """
    psi = np.asarray(psi)
    if len(psi) == 0:
        return np.zeros(0, dtype=np.int32)
    wraps = np.diff(psi) > math.pi
    rings = np.zeros(len(psi), dtype=np.int32)
    rings[1:] = np.cumsum(wraps)
    return rings


def project_rv_scanunfold(
    cloud: PointCloud, cfg: RvSensorConfig = KITTI_RV, empty_label: int = -1
) -> RangeImage:
    """Scan-unfolded range image: rows follow sensor rings, not elevation.

    Uses the cloud's ring ids when present, otherwise recovers them by
    azimuth-wrap detection on the capture order.
    """
    psi, phi, r, valid = _safe_angles(cloud)
    if cloud.ring_ids is not None:
        rings = cloud.ring_ids
    else:
        rings = infer_rings(psi)
    if len(rings) and int(rings.max()) >= cfg.height:
        raise ConfigError(
            f"scan exposes {int(rings.max()) + 1} rings but the image height is {cfg.height}"
        )
    u, _ = rv_pixel(psi, phi, cfg)
    cols = np.clip(np.floor(u).astype(np.int64), 0, cfg.width - 1).astype(np.int32)
    return _rasterize(cloud, rings.astype(np.int32), cols, valid, r, cfg, empty_label)


def valid_projection_rate(img: RangeImage) -> float:
    """Fraction of pixels hit by at least one point."""
    return float((img.point_index >= 0).mean())
