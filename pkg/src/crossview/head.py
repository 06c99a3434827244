"""Back-to-points resampling and the point-level fusion heads.

``grid_sample`` gathers dense per-view scores onto points through the
per-point pixel map.  The two per-point streams are fused with a
forward-only kernel-point convolution whose neighbor features are
weighted by their proximity to a deterministic set of kernel offsets;
a classic KNN label-smoothing baseline is provided for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .ingest import PointCloud, PointPixelMap, _readonly

_PAIR_BUDGET = 1_500_000  # neighbor pairs per aggregation block, bounds memory


class ShapeError(ValueError):
    pass


def grid_sample(feature_map: np.ndarray, pix: PointPixelMap) -> np.ndarray:
    """Per-point nearest-pixel gather from a dense map, (N, C) out.

    If the map resolution differs from the raster the pixel map was
    built against, indices are rescaled linearly (floor) first.
    Sentinel points yield zero rows.
    """
    fmap = np.asarray(feature_map)
    if fmap.ndim != 3:
        raise ShapeError(f"feature map must be (H, W, C), got {fmap.shape}")
    h, w, c = fmap.shape
    h0, w0 = pix.view_shape
    rows = pix.coords[:, 0].astype(np.int64)
    cols = pix.coords[:, 1].astype(np.int64)
    valid = rows >= 0
    if (h, w) != (h0, w0):
        rows = (rows * h) // h0
        cols = (cols * w) // w0
    flat = np.where(valid, rows * w + cols, 0)
    out = fmap.reshape(h * w, c)[flat]
    out[~valid] = 0
    return out


def kernel_point_layout(num_points: int, sigma: float) -> np.ndarray:
    """Deterministic kernel offsets: one center plus a Fibonacci shell.

    The shell sits at 0.6 * sigma so every kernel point keeps positive
    influence on the center of its own neighborhood.
    """
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    pts = np.zeros((num_points, 3))
    m = num_points - 1
    if m > 0:
        i = np.arange(m, dtype=np.float64)
        z = 1.0 - 2.0 * (i + 0.5) / m
        r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        golden = math.pi * (3.0 - math.sqrt(5.0))
        pts[1:, 0] = r * np.cos(golden * i)
        pts[1:, 1] = r * np.sin(golden * i)
        pts[1:, 2] = z
        pts[1:] *= 0.6 * sigma
    return pts


@dataclass(frozen=True)
class KpconvParams:
    """Kernel offsets, per-kernel-point weight matrices, and radii."""

    kernel_points: np.ndarray
    weights: np.ndarray
    sigma: float
    radius: float

    def __post_init__(self):
        kp = np.ascontiguousarray(self.kernel_points, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if kp.ndim != 2 or kp.shape[1] != 3 or kp.shape[0] < 1:
            raise ShapeError(f"kernel_points must be (K, 3), got {kp.shape}")
        if w.ndim != 3 or w.shape[0] != kp.shape[0]:
            raise ShapeError(f"weights must be (K, c_in, c_out), got {w.shape}")
        if not (self.sigma > 0 and self.radius > 0):
            raise ValueError("sigma and radius must be positive")
        if not (np.isfinite(kp).all() and np.isfinite(w).all()):
            raise ValueError("non-finite kernel parameters")
        object.__setattr__(self, "kernel_points", _readonly(kp))
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def num_kernel_points(self) -> int:
        return self.kernel_points.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def random(
        cls,
        c_in: int,
        c_out: int,
        num_points: int = 15,
        radius: float = 0.60,
        sigma: float = 0.30,
        seed: int = 0,
    ) -> "KpconvParams":
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, 1.0 / math.sqrt(c_in), (num_points, c_in, c_out))
        return cls(kernel_point_layout(num_points, sigma), w, sigma, radius)

    @classmethod
    def identity(cls, channels: int, radius: float, sigma: float) -> "KpconvParams":
        """Single center kernel point with identity weights."""
        w = np.eye(channels)[None, :, :]
        return cls(np.zeros((1, 3)), w, sigma, radius)


def kpconv_forward(cloud: PointCloud, feats: np.ndarray, params: KpconvParams) -> np.ndarray:
    """Kernel-point convolution over exact radius neighborhoods.

    For each point i and neighbor j (self included):
        h(j, k) = max(0, 1 - |x_j - (x_i + kp_k)| / sigma)
        out_i   = sum_jk h(j, k) W_k f_j / sum_jk h(j, k)
    with the normalization skipped when the total influence is zero.
    Only relative offsets enter h, so the output is translation
    invariant; rows are independent, so it is permutation equivariant.
    """
    f = np.asarray(feats)
    if not np.issubdtype(f.dtype, np.floating):
        f = f.astype(np.float64)
    if f.ndim != 2 or len(f) != len(cloud):
        raise ShapeError(f"feats must be ({len(cloud)}, c_in), got {f.shape}")
    if f.shape[1] != params.c_in:
        raise ShapeError(f"feats have {f.shape[1]} channels, weights expect {params.c_in}")
    n = len(cloud)
    out = np.zeros((n, params.c_out), dtype=f.dtype)
    if n == 0:
        return out

    xyz = cloud.xyz.astype(np.float64)
    tree = cKDTree(xyz)
    kp = params.kernel_points
    weights = params.weights.astype(f.dtype)
    denom = np.zeros(n)

    # block centers so that each block holds a bounded number of pairs;
    # dense neighborhoods otherwise blow up the flattened pair arrays
    counts_all = tree.query_ball_point(xyz, params.radius, workers=1, return_length=True)
    cum = np.cumsum(counts_all, dtype=np.int64)
    edges = [0]
    while edges[-1] < n:
        start = edges[-1]
        limit = (cum[start - 1] if start else 0) + _PAIR_BUDGET
        stop = max(int(np.searchsorted(cum, limit, side="right")), start + 1)
        edges.append(min(stop, n))

    for start, stop in zip(edges[:-1], edges[1:]):
        nb_lists = tree.query_ball_point(xyz[start:stop], params.radius, workers=1)
        counts = np.fromiter((len(nb) for nb in nb_lists), dtype=np.int64, count=stop - start)
        nbrs = np.concatenate([np.asarray(nb, dtype=np.int64) for nb in nb_lists])
        centers = np.repeat(np.arange(start, stop), counts)
        diffs = xyz[nbrs] - xyz[centers]
        # aggregate each neighborhood in (distance, coordinates) order:
        # the summation order then depends only on geometry, never on
        # point ordering or tree traversal, so permutation equivariance
        # holds bitwise (up to fully coincident points)
        nxyz = xyz[nbrs]
        order = np.lexsort((nxyz[:, 2], nxyz[:, 1], nxyz[:, 0], np.linalg.norm(diffs, axis=1), centers))
        nbrs = nbrs[order]
        diffs = diffs[order]
        seg = np.concatenate(([0], np.cumsum(counts)[:-1]))
        f_nbrs = f[nbrs]
        for k in range(params.num_kernel_points):
            d = np.linalg.norm(diffs - kp[k], axis=1)
            h = np.maximum(0.0, 1.0 - d / params.sigma)
            hc = h.astype(f.dtype, copy=False)
            sk = np.add.reduceat(f_nbrs * hc[:, None], seg, axis=0)
            out[start:stop] += sk @ weights[k]
            denom[start:stop] += np.add.reduceat(h, seg)

    nz = denom > 0
    out[nz] /= denom[nz, None]
    return out


def fuse_predictions(
    f_r: np.ndarray, f_b: np.ndarray, cloud: PointCloud, params: KpconvParams
) -> np.ndarray:
    """Kernel-point convolution over the channel-concatenated streams."""
    a = np.asarray(f_r)
    b = np.asarray(f_b)
    if len(a) != len(b) or len(a) != len(cloud):
        raise ShapeError("per-point score streams must match the cloud length")
    return kpconv_forward(cloud, np.concatenate([a, b], axis=1), params)


def knn_postprocess(
    cloud: PointCloud,
    labels: np.ndarray,
    ranges: np.ndarray,
    k: int,
    cutoff: float,
) -> np.ndarray:
    """Majority label over the k nearest 3D neighbors within a range gate.

    Neighbors whose |range - own range| exceeds ``cutoff`` are excluded
    (self always survives).  Majority ties keep the original label, so
    k = 1 is the identity.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    lab = np.asarray(labels)
    rng_ = np.asarray(ranges, dtype=np.float64)
    n = len(cloud)
    if lab.shape != (n,) or rng_.shape != (n,):
        raise ShapeError("labels and ranges must be per-point vectors")
    if n == 0:
        return lab.copy()

    kk = min(k, n)
    tree = cKDTree(cloud.xyz.astype(np.float64))
    _, idx = tree.query(cloud.xyz.astype(np.float64), k=kk, workers=1)
    idx = idx.reshape(n, kk)
    gate = np.abs(rng_[idx] - rng_[:, None]) <= cutoff
    nb_labels = lab[idx]

    classes = np.unique(lab)
    counts = np.zeros((n, len(classes)), dtype=np.int32)
    for ci, c in enumerate(classes):
        counts[:, ci] = ((nb_labels == c) & gate).sum(axis=1)
    best = counts.max(axis=1)
    attained = counts == best[:, None]
    unique_winner = attained.sum(axis=1) == 1
    winners = classes[np.argmax(counts, axis=1)]
    return np.where(unique_winner, winners, lab).astype(lab.dtype)


def argmax_labels(scores: np.ndarray) -> np.ndarray:
    """Per-row argmax; ties resolve to the smallest class id."""
    s = np.asarray(scores)
    if s.ndim != 2 or s.shape[1] < 1:
        raise ShapeError(f"scores must be (N, C) with C >= 1, got {s.shape}")
    return np.argmax(s, axis=1).astype(np.int32)
