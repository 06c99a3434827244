"""Cross-view correspondence maps and the align-then-fuse forward pass.

A correspondence maps every pixel of a target view to a pixel of a
source view by composing view->point and point->view projections
through the shared cloud.  Alignment is then a pure gather (sentinel
pixels become zero), and fusion combines the target map with the
aligned map through a pair of small conv+batchnorm blocks whose second
output, squashed to [0, 1], gates the first elementwise before a
residual connection back onto the target map.

Both fusion directions read pre-fusion inputs, so they commute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bev import BevImage
from .ingest import _readonly
from .rv import RangeImage

BN_EPS = 1e-5
SOFTMAX_SAFE_SPREAD = 60.0  # max-min range below which a scalar shift cannot underflow


class MismatchedCloudError(ValueError):
    """Raised when view products from different clouds are composed."""


class ShapeError(ValueError):
    """Raised for inconsistent map/correspondence/parameter shapes."""


@dataclass(frozen=True)
class Correspondence:
    """Per-pixel (row, col) of the source view, (-1, -1) where undefined."""

    coords: np.ndarray
    source_shape: tuple[int, int]

    def __post_init__(self):
        c = np.ascontiguousarray(self.coords, dtype=np.int32)
        if c.ndim != 3 or c.shape[2] != 2:
            raise ShapeError(f"coords must be (H, W, 2), got {c.shape}")
        hs, ws = (int(self.source_shape[0]), int(self.source_shape[1]))
        if hs < 1 or ws < 1:
            raise ShapeError("source_shape must be positive")
        valid = c[..., 0] >= 0
        if valid.any():
            u, v = c[..., 0][valid], c[..., 1][valid]
            if u.max() >= hs or v.min() < 0 or v.max() >= ws:
                raise ShapeError("non-sentinel coords fall outside the source raster")
        if np.any((c[..., 0] < 0) & (c[..., 0] != -1)) or np.any((c[..., 1] < 0) & (c[..., 1] != -1)):
            raise ShapeError("negative coords must be the (-1, -1) sentinel")
        object.__setattr__(self, "coords", _readonly(c))
        object.__setattr__(self, "source_shape", (hs, ws))

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]

    @property
    def valid_mask(self) -> np.ndarray:
        return self.coords[..., 0] >= 0


def compose_r2b(rv: RangeImage, bev: BevImage) -> Correspondence:
    """Range-view pixel -> BEV pixel, through each pixel's kept point.

    Sentinel where the range-view pixel is empty or its point falls
    outside the BEV window.
    """
    if rv.fingerprint != bev.fingerprint:
        raise MismatchedCloudError("range and BEV images were built from different clouds")
    pi = rv.point_index.reshape(-1)
    coords = np.full((pi.size, 2), -1, dtype=np.int32)
    hit = pi >= 0
    coords[hit] = bev.point_pixels.coords[pi[hit]]
    return Correspondence(coords.reshape(*rv.shape, 2), bev.shape)


def compose_b2r(bev: BevImage, rv: RangeImage) -> Correspondence:
    """BEV pixel -> range-view pixel, through the cell's top point."""
    if rv.fingerprint != bev.fingerprint:
        raise MismatchedCloudError("range and BEV images were built from different clouds")
    rep = bev.representative_index.reshape(-1)
    coords = np.full((rep.size, 2), -1, dtype=np.int32)
    hit = rep >= 0
    coords[hit] = rv.point_pixels.coords[rep[hit]]
    return Correspondence(coords.reshape(*bev.shape, 2), rv.shape)


def scale_correspondence(
    c: Correspondence, new_target: tuple[int, int], new_source: tuple[int, int]
) -> Correspondence:
    """Resample a correspondence to new target/source resolutions.

    The target grid picks its nearest full-resolution pixel by floor
    index scaling; surviving source coordinates are floor-scaled into
    the new source raster.  Sentinels survive unchanged.  All index
    arithmetic is integral, so the identity scaling is exact.
    """
    ht2, wt2 = int(new_target[0]), int(new_target[1])
    hs2, ws2 = int(new_source[0]), int(new_source[1])
    if min(ht2, wt2, hs2, ws2) < 1:
        raise ShapeError("scaled dimensions must be >= 1")
    ht, wt = c.target_shape
    hs, ws = c.source_shape
    ii = (np.arange(ht2, dtype=np.int64) * ht) // ht2
    jj = (np.arange(wt2, dtype=np.int64) * wt) // wt2
    sub = c.coords[np.ix_(ii, jj)].astype(np.int64)
    valid = sub[..., 0] >= 0
    out = np.full((ht2, wt2, 2), -1, dtype=np.int32)
    out[..., 0] = np.where(valid, (sub[..., 0] * hs2) // hs, -1)
    out[..., 1] = np.where(valid, (sub[..., 1] * ws2) // ws, -1)
    return Correspondence(out, (hs2, ws2))


def align(source: np.ndarray, c: Correspondence) -> np.ndarray:
    """Gather source features onto the target grid; sentinels become zero."""
    src = np.asarray(source)
    if src.ndim != 3:
        raise ShapeError(f"source must be (H, W, C), got {src.shape}")
    if src.shape[:2] != c.source_shape:
        raise ShapeError(f"source shape {src.shape[:2]} != correspondence source {c.source_shape}")
    hs, ws = c.source_shape
    ht, wt = c.target_shape
    flat_coords = c.coords.reshape(-1, 2)
    valid = flat_coords[:, 0] >= 0
    flat = np.where(valid, flat_coords[:, 0].astype(np.int64) * ws + flat_coords[:, 1], 0)
    out = src.reshape(hs * ws, -1)[flat]
    out[~valid] = 0
    return out.reshape(ht, wt, src.shape[2])


@dataclass(frozen=True)
class BatchNorm:
    """Inference-mode batch normalization (fixed statistics)."""

    scale: np.ndarray
    shift: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        for name in ("scale", "shift", "mean", "var"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 1 or a.shape != np.shape(self.scale):
                raise ShapeError("batchnorm parameters must be equal-length vectors")
            if not np.isfinite(a).all():
                raise ValueError(f"non-finite batchnorm {name}")
            object.__setattr__(self, name, _readonly(a))
        if np.any(self.var <= 0):
            raise ValueError("batchnorm variances must be positive")

    def fold(self, dtype) -> tuple[np.ndarray, np.ndarray]:
        """Equivalent per-channel affine (gain, bias)."""
        gain = self.scale / np.sqrt(self.var + BN_EPS)
        return gain.astype(dtype), (self.shift - self.mean * gain).astype(dtype)

    @classmethod
    def identity(cls, channels: int) -> "BatchNorm":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))


def _check_kernel(kernel: np.ndarray, name: str) -> np.ndarray:
    k = np.asarray(kernel)
    if k.ndim != 4 or k.shape[0] != k.shape[1]:
        raise ShapeError(f"{name} kernel must be (k, k, c_in, c_out), got {k.shape}")
    if k.shape[0] % 2 != 1:
        raise ShapeError(f"{name} kernel size must be odd for same-padding")
    if not np.isfinite(k).all():
        raise ValueError(f"non-finite {name} kernel")
    return _readonly(np.ascontiguousarray(k, dtype=np.float64))


@dataclass(frozen=True)
class AttentionParams:
    """Weights of one fusion block: conv+bn+relu then conv+bn+squash.

    The first block maps the concatenated (target, aligned) channels to
    the target channel count; the second maps those back onto gating
    weights.  ``attention`` selects the squash: "softmax" normalizes
    over channels at each pixel, "sigmoid" squashes elementwise with no
    per-pixel normalization.
    """

    mu_kernel: np.ndarray
    mu_bn: BatchNorm
    theta_kernel: np.ndarray
    theta_bn: BatchNorm
    attention: str = "softmax"

    def __post_init__(self):
        mu = _check_kernel(self.mu_kernel, "mu")
        th = _check_kernel(self.theta_kernel, "theta")
        ct = mu.shape[3]
        if th.shape[2] != ct or th.shape[3] != ct:
            raise ShapeError("theta kernel must map target channels onto themselves")
        if len(self.mu_bn.scale) != ct or len(self.theta_bn.scale) != ct:
            raise ShapeError("batchnorm width must equal the target channel count")
        if self.attention not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown attention kind {self.attention!r}")
        object.__setattr__(self, "mu_kernel", mu)
        object.__setattr__(self, "theta_kernel", th)

    @property
    def kernel_size(self) -> int:
        return self.mu_kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.mu_kernel.shape[2]

    @property
    def c_target(self) -> int:
        return self.mu_kernel.shape[3]

    @classmethod
    def random(
        cls,
        c_target: int,
        c_source: int,
        kernel_size: int = 3,
        attention: str = "softmax",
        seed: int = 0,
    ) -> "AttentionParams":
        rng = np.random.default_rng(seed)
        c_in = c_target + c_source

        def kernel(ci, co):
            fan_in = kernel_size * kernel_size * ci
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (kernel_size, kernel_size, ci, co))

        def bn(c):
            return BatchNorm(
                scale=rng.uniform(0.5, 1.5, c),
                shift=rng.normal(0.0, 0.1, c),
                mean=rng.normal(0.0, 0.1, c),
                var=rng.uniform(0.5, 1.5, c),
            )

        return cls(kernel(c_in, c_target), bn(c_target), kernel(c_target, c_target), bn(c_target), attention)

    @classmethod
    def zero_attention(
        cls, c_target: int, c_source: int, kernel_size: int = 1, attention: str = "softmax"
    ) -> "AttentionParams":
        """Parameters whose first block outputs exactly zero.

        The gated product is then zero everywhere, so fusion reduces to
        the residual identity.
        """
        c_in = c_target + c_source
        zeros = np.zeros((kernel_size, kernel_size, c_in, c_target))
        zeros_t = np.zeros((kernel_size, kernel_size, c_target, c_target))
        return cls(zeros, BatchNorm.identity(c_target), zeros_t, BatchNorm.identity(c_target), attention)


def _conv2d_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 correlation, (H, W, Ci) -> (H * W, Co)."""
    h, w, ci = x.shape
    k = kernel.shape[0]
    co = kernel.shape[3]
    if k == 1:
        return x.reshape(-1, ci) @ kernel[0, 0]
    pad = k // 2
    xp = np.zeros((h + 2 * pad, w + 2 * pad, ci), dtype=x.dtype)
    xp[pad : pad + h, pad : pad + w] = x
    out = np.zeros((h * w, co), dtype=np.result_type(x.dtype, kernel.dtype))
    for dy in range(k):
        for dx in range(k):
            out += xp[dy : dy + h, dx : dx + w].reshape(h * w, ci) @ kernel[dy, dx]
    return out


def _channel_softmax(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis of an (M, C) block.

    Consumes its input in place.  When the global value spread is small
    enough the shift uses a single scalar (softmax is invariant to any
    per-pixel constant, a fortiori to a global one); otherwise it falls
    back to the exact per-pixel maximum to rule out underflow.
    """
    if x.size == 0:
        return x
    gmax = x.max()
    if gmax - x.min() <= SOFTMAX_SAFE_SPREAD:
        x -= gmax
    else:
        x -= x.max(axis=1, keepdims=True)
    np.exp(x, out=x)
    s = x @ np.ones(x.shape[1], dtype=x.dtype)  # row sums via BLAS
    x /= s[:, None]
    return x


def attention_components(
    target: np.ndarray, aligned: np.ndarray, params: AttentionParams
) -> tuple[np.ndarray, np.ndarray]:
    """First-block output and gating weights, both shaped like target."""
    tgt = np.asarray(target)
    alg = np.asarray(aligned)
    if tgt.ndim != 3 or alg.ndim != 3:
        raise ShapeError("feature maps must be (H, W, C)")
    if tgt.shape[:2] != alg.shape[:2]:
        raise ShapeError(f"spatial shapes differ: {tgt.shape[:2]} vs {alg.shape[:2]}")
    h, w, cr = tgt.shape
    cb = alg.shape[2]
    if params.c_in != cr + cb:
        raise ShapeError(f"parameters expect {params.c_in} input channels, got {cr} + {cb}")
    if params.c_target != cr:
        raise ShapeError(f"parameters produce {params.c_target} channels, target has {cr}")

    dtype = np.result_type(tgt.dtype, alg.dtype, np.float32)
    mu_gain, mu_bias = params.mu_bn.fold(dtype)
    # batchnorm gain commutes with the (linear) convolution: fold it
    # into the kernel so normalization costs no extra pass
    mu_kernel = params.mu_kernel.astype(dtype) * mu_gain
    if params.kernel_size == 1:
        # split matmul avoids materializing the channel concatenation
        m = tgt.reshape(-1, cr).astype(dtype, copy=False) @ mu_kernel[0, 0, :cr]
        m += alg.reshape(-1, cb).astype(dtype, copy=False) @ mu_kernel[0, 0, cr:]
    else:
        concat = np.concatenate([tgt, alg], axis=2).astype(dtype, copy=False)
        m = _conv2d_same(concat, mu_kernel)
    m += mu_bias
    np.maximum(m, 0, out=m)

    theta_gain, theta_bias = params.theta_bn.fold(dtype)
    theta_kernel = params.theta_kernel.astype(dtype) * theta_gain
    t = _conv2d_same(m.reshape(h, w, cr), theta_kernel)
    t += theta_bias
    if params.attention == "softmax":
        weights = _channel_softmax(t)
    else:
        with np.errstate(over="ignore"):  # exp overflow saturates cleanly to weight 0
            np.negative(t, out=t)
            np.exp(t, out=t)
            t += 1.0
            weights = np.reciprocal(t, out=t)
    return m.reshape(h, w, cr), weights.reshape(h, w, cr)


def attention_fuse(target: np.ndarray, aligned: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Gated residual fusion: target + weights * first-block output."""
    m, weights = attention_components(target, aligned, params)
    m *= weights
    m += target
    return m


def gfm_forward(
    m_r: np.ndarray,
    m_b: np.ndarray,
    c_r2b: Correspondence,
    c_b2r: Correspondence,
    p_r: AttentionParams,
    p_b: AttentionParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Bidirectional align-then-fuse; both directions read pre-fusion inputs."""
    if c_r2b.target_shape != m_r.shape[:2]:
        raise ShapeError("r->b correspondence target does not match the range-view map")
    if c_b2r.target_shape != m_b.shape[:2]:
        raise ShapeError("b->r correspondence target does not match the BEV map")
    fused_r = attention_fuse(m_r, align(m_b, c_r2b), p_r)
    fused_b = attention_fuse(m_b, align(m_r, c_b2r), p_b)
    return fused_r, fused_b
