"""Polar bird's-eye-view rasterization with a 9-feature cell descriptor.

Points are binned over (radius, angle); the vertical column of each
cell is collapsed by a per-channel maximum over the point descriptors
[d_rho, d_theta, d_z, rho, theta, z, x, y, remission], where the d_*
terms are offsets from the cell center.  The deterministic max reducer
stands in for a learned per-cell encoder while preserving the reduction
shape along z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ingest import ConfigError, PointCloud, PointPixelMap, _readonly

BEV_CHANNELS = 9


@dataclass(frozen=True)
class BevGridConfig:
    """Polar grid: radial rows x angular columns over a radius/z window.

    ``z_bins`` is carried for preset fidelity; the deterministic cell
    reducer collapses the full z column, so it never partitions points.
    """

    radial_bins: int
    angular_bins: int
    z_bins: int
    radius_range: tuple[float, float]
    z_range: tuple[float, float]

    def __post_init__(self):
        if min(self.radial_bins, self.angular_bins, self.z_bins) < 1:
            raise ConfigError("all bin counts must be >= 1")
        if not self.radius_range[0] < self.radius_range[1]:
            raise ConfigError("radius_range must be increasing")
        if not self.z_range[0] < self.z_range[1]:
            raise ConfigError("z_range must be increasing")

    @property
    def shape(self) -> tuple[int, int]:
        return self.radial_bins, self.angular_bins


KITTI_BEV = BevGridConfig(480, 360, 32, (3.0, 50.0), (-3.0, 1.5))
NUSCENES_BEV = BevGridConfig(480, 360, 32, (0.0, 50.0), (-5.0, 3.0))


@dataclass(frozen=True)
class BevImage:
    """Dense BEV product of one sweep.

    features            : (H, W, 9) float32 per-cell max descriptor.
    point_pixels        : per-point (row, col); (-1, -1) if out of range.
    representative_index: (H, W) int32, the cell's top (max-z) point,
                          -1 for empty cells; this is the point used
                          when mapping BEV pixels back to other views.
    labels              : optional (H, W) int32 majority-class raster.
    """

    features: np.ndarray
    point_pixels: PointPixelMap
    representative_index: np.ndarray
    fingerprint: bytes
    labels: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.representative_index.shape


def polar_cell(xyz: np.ndarray, cfg: BevGridConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bin points over (radius, angle); returns (rows, cols, in_range).

    rho = hypot(x, y) maps to rows via floor over the radius window,
    theta = atan2(y, x) to columns via floor over (-pi, pi]; both are
    clamped so boundary values stay inside.  A point is in range iff
    rho and z lie inside the (inclusive) radius/z windows.
    """
    pts = np.asarray(xyz, dtype=np.float64)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    r_min, r_max = cfg.radius_range
    z_min, z_max = cfg.z_range
    rows = np.floor((rho - r_min) / (r_max - r_min) * cfg.radial_bins)
    cols = np.floor((theta + math.pi) / (2.0 * math.pi) * cfg.angular_bins)
    rows = np.clip(rows, 0, cfg.radial_bins - 1).astype(np.int32)
    cols = np.clip(cols, 0, cfg.angular_bins - 1).astype(np.int32)
    in_range = (rho >= r_min) & (rho <= r_max) & (z >= z_min) & (z <= z_max)
    return rows, cols, in_range


def cell_centers(rows: np.ndarray, cols: np.ndarray, cfg: BevGridConfig) -> tuple[np.ndarray, np.ndarray, float]:
    """(rho, theta, z) midpoints of the given cells' extents."""
    r_min, r_max = cfg.radius_range
    z_min, z_max = cfg.z_range
    rho_c = r_min + (np.asarray(rows) + 0.5) * (r_max - r_min) / cfg.radial_bins
    theta_c = -math.pi + (np.asarray(cols) + 0.5) * (2.0 * math.pi) / cfg.angular_bins
    return rho_c, theta_c, (z_min + z_max) / 2.0


def point_bev_features(
    xyz: np.ndarray, remission: np.ndarray, rows: np.ndarray, cols: np.ndarray, cfg: BevGridConfig
) -> np.ndarray:
    """Per-point 9-vector [d_rho, d_theta, d_z, rho, theta, z, x, y, rem]."""
    pts = np.asarray(xyz, dtype=np.float64)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    rho_c, theta_c, z_c = cell_centers(rows, cols, cfg)
    out = np.empty(pts.shape[:-1] + (BEV_CHANNELS,), dtype=np.float32)
    out[..., 0] = rho - rho_c
    out[..., 1] = theta - theta_c
    out[..., 2] = z - z_c
    out[..., 3] = rho
    out[..., 4] = theta
    out[..., 5] = z
    out[..., 6] = x
    out[..., 7] = y
    out[..., 8] = np.asarray(remission)
    return out


def project_bev(cloud: PointCloud, cfg: BevGridConfig = KITTI_BEV, empty_label: int = -1) -> BevImage:
    """Rasterize a sweep onto the polar grid.

    Cell features are the channel-wise maximum over all in-range points
    in the cell's full z column; the representative point is the one
    with maximal z (ties toward the smaller point index); the label
    raster takes the majority class (ties toward the smaller class id).
    All reducers are order-independent, so results never depend on the
    input permutation.
    """
    h, w = cfg.shape
    n = len(cloud)
    rows, cols, in_range = polar_cell(cloud.points[:, :3], cfg)

    coords = np.full((n, 2), -1, dtype=np.int32)
    coords[in_range, 0] = rows[in_range]
    coords[in_range, 1] = cols[in_range]

    features = np.zeros((h * w, BEV_CHANNELS), dtype=np.float32)
    rep = np.full(h * w, -1, dtype=np.int32)
    labels_img = None

    idx = np.flatnonzero(in_range)
    if len(idx):
        cells = rows[idx].astype(np.int64) * w + cols[idx]
        order = np.argsort(cells.astype(np.uint32), kind="stable")  # radix; index-stable in cell
        idx_sorted = idx[order]
        cells_sorted = cells[order]
        starts = np.flatnonzero(np.concatenate(([True], cells_sorted[1:] != cells_sorted[:-1])))
        occupied = cells_sorted[starts]

        feats = point_bev_features(
            cloud.points[idx_sorted, :3], cloud.points[idx_sorted, 3], rows[idx_sorted], cols[idx_sorted], cfg
        )
        features[occupied] = np.maximum.reduceat(feats, starts, axis=0)

        # representative: max z, first (smallest original index) among ties
        z_sorted = cloud.points[idx_sorted, 2]
        z_max = np.maximum.reduceat(z_sorted, starts)
        seg_of = np.zeros(len(idx_sorted), dtype=np.int64)
        seg_of[starts[1:]] = 1
        seg_of = np.cumsum(seg_of)
        attains = z_sorted == z_max[seg_of]
        pos = np.where(attains, np.arange(len(idx_sorted)), len(idx_sorted))
        first_attainer = np.minimum.reduceat(pos, starts)
        rep[occupied] = idx_sorted[first_attainer].astype(np.int32)

        if cloud.labels is not None:
            lab_sorted = cloud.labels[idx_sorted]
            classes = np.unique(lab_sorted)
            compact = np.searchsorted(classes, lab_sorted)
            counts = np.bincount(
                seg_of * len(classes) + compact, minlength=len(occupied) * len(classes)
            ).reshape(len(occupied), len(classes))
            majority = classes[np.argmax(counts, axis=1)]  # argmax tie -> smaller class id
            labels_img = np.full(h * w, empty_label, dtype=np.int32)
            labels_img[occupied] = majority
            labels_img = _readonly(labels_img.reshape(h, w))
    elif cloud.labels is not None:
        labels_img = _readonly(np.full((h, w), empty_label, dtype=np.int32))

    return BevImage(
        features=_readonly(features.reshape(h, w, BEV_CHANNELS)),
        point_pixels=PointPixelMap(coords, (h, w)),
        representative_index=_readonly(rep.reshape(h, w)),
        fingerprint=cloud.fingerprint(),
        labels=labels_img,
    )
