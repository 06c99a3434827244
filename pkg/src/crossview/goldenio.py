"""Golden binary formats shared by all tools.

View images: header {magic "GFVW", u32 H, u32 W, u32 C, u8 dtype}
followed by the row-major channel-interleaved feature data and a
second plane of signed 32-bit point indices.

Named tensor blocks (magic "GFTB") serialize parameter sets and
correspondence maps: a u32 block count, then per block a u16-length
UTF-8 name, u8 dtype code, u8 ndim, u32 dims, and the raw
little-endian data.
"""

from __future__ import annotations

import struct

import numpy as np

from .flow import AttentionParams, BatchNorm, Correspondence
from .head import KpconvParams

VIEW_MAGIC = b"GFVW"
BLOCKS_MAGIC = b"GFTB"

_DTYPE_BY_CODE = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i4"),
    3: np.dtype("<u4"),
    4: np.dtype("|u1"),
    5: np.dtype("<i8"),
}
_CODE_BY_DTYPE = {v: k for k, v in _DTYPE_BY_CODE.items()}


class FormatError(ValueError):
    """Raised for corrupt or foreign files."""


def _dtype_code(a: np.ndarray) -> int:
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    dt = np.dtype(dt.str.replace("=", "<"))
    if dt not in _CODE_BY_DTYPE:
        raise FormatError(f"dtype {a.dtype} has no on-disk code")
    return _CODE_BY_DTYPE[dt]


def _take(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(buf):
        raise FormatError(f"truncated file while reading {what}")
    return buf[offset : offset + size], offset + size


def write_view_image(path, features: np.ndarray, point_index: np.ndarray) -> None:
    feats = np.asarray(features)
    if feats.ndim != 3:
        raise ValueError(f"features must be (H, W, C), got {feats.shape}")
    h, w, c = feats.shape
    pi = np.ascontiguousarray(point_index, dtype="<i4")
    if pi.shape != (h, w):
        raise ValueError(f"point_index {pi.shape} does not match features {(h, w)}")
    code = _dtype_code(feats)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIIIB", VIEW_MAGIC, h, w, c, code))
        f.write(np.ascontiguousarray(feats, dtype=_DTYPE_BY_CODE[code]).tobytes())
        f.write(pi.tobytes())


def read_view_image(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    head, off = _take(buf, 0, struct.calcsize("<4sIIIB"), "header")
    magic, h, w, c, code = struct.unpack("<4sIIIB", head)
    if magic != VIEW_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VIEW_MAGIC!r}")
    if code not in _DTYPE_BY_CODE:
        raise FormatError(f"unknown dtype code {code}")
    dt = _DTYPE_BY_CODE[code]
    data, off = _take(buf, off, h * w * c * dt.itemsize, "features")
    feats = np.frombuffer(data, dtype=dt).reshape(h, w, c)
    data, off = _take(buf, off, h * w * 4, "point index plane")
    pi = np.frombuffer(data, dtype="<i4").reshape(h, w)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes")
    return feats.copy(), pi.copy()


def write_blocks(path, blocks: dict[str, np.ndarray]) -> None:
    out = [struct.pack("<4sI", BLOCKS_MAGIC, len(blocks))]
    for name, arr in blocks.items():
        a = np.asarray(arr)
        code = _dtype_code(a)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", code, a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype=_DTYPE_BY_CODE[code]).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def read_blocks(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    head, off = _take(buf, 0, 8, "header")
    magic, count = struct.unpack("<4sI", head)
    if magic != BLOCKS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BLOCKS_MAGIC!r}")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        data, off = _take(buf, off, 2, "name length")
        (name_len,) = struct.unpack("<H", data)
        data, off = _take(buf, off, name_len, "name")
        name = data.decode("utf-8")
        data, off = _take(buf, off, 2, "dtype/ndim")
        code, ndim = struct.unpack("<BB", data)
        if code not in _DTYPE_BY_CODE:
            raise FormatError(f"unknown dtype code {code} in block {name!r}")
        data, off = _take(buf, off, 4 * ndim, "dims")
        dims = struct.unpack(f"<{ndim}I", data)
        dt = _DTYPE_BY_CODE[code]
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data, off = _take(buf, off, size * dt.itemsize, f"block {name!r}")
        blocks[name] = np.frombuffer(data, dtype=dt).reshape(dims).copy()
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes")
    return blocks


_ATTENTION_CODES = {"softmax": 0, "sigmoid": 1}


def save_attention_params(path, params: AttentionParams) -> None:
    blocks = {
        "mu_kernel": params.mu_kernel,
        "theta_kernel": params.theta_kernel,
        "attention": np.array(_ATTENTION_CODES[params.attention], dtype="|u1"),
    }
    for prefix, bn in (("mu", params.mu_bn), ("theta", params.theta_bn)):
        for name in ("scale", "shift", "mean", "var"):
            blocks[f"{prefix}_bn_{name}"] = getattr(bn, name)
    write_blocks(path, blocks)


def load_attention_params(path) -> AttentionParams:
    b = read_blocks(path)
    try:
        kind = {v: k for k, v in _ATTENTION_CODES.items()}[int(b["attention"])]
        return AttentionParams(
            mu_kernel=b["mu_kernel"],
            mu_bn=BatchNorm(b["mu_bn_scale"], b["mu_bn_shift"], b["mu_bn_mean"], b["mu_bn_var"]),
            theta_kernel=b["theta_kernel"],
            theta_bn=BatchNorm(
                b["theta_bn_scale"], b["theta_bn_shift"], b["theta_bn_mean"], b["theta_bn_var"]
            ),
            attention=kind,
        )
    except KeyError as e:
        raise FormatError(f"missing block {e} in attention parameter file") from e


def save_kpconv_params(path, params: KpconvParams) -> None:
    write_blocks(
        path,
        {
            "kernel_points": params.kernel_points,
            "weights": params.weights,
            "sigma": np.array(params.sigma, dtype="<f8"),
            "radius": np.array(params.radius, dtype="<f8"),
        },
    )


def load_kpconv_params(path) -> KpconvParams:
    b = read_blocks(path)
    try:
        return KpconvParams(
            kernel_points=b["kernel_points"],
            weights=b["weights"],
            sigma=float(b["sigma"]),
            radius=float(b["radius"]),
        )
    except KeyError as e:
        raise FormatError(f"missing block {e} in kpconv parameter file") from e


def save_correspondence(path, c: Correspondence) -> None:
    write_blocks(
        path,
        {
            "u": np.ascontiguousarray(c.coords[..., 0], dtype="<i4"),
            "v": np.ascontiguousarray(c.coords[..., 1], dtype="<i4"),
            "source_shape": np.asarray(c.source_shape, dtype="<i4"),
        },
    )


def load_correspondence(path) -> Correspondence:
    b = read_blocks(path)
    try:
        coords = np.stack([b["u"], b["v"]], axis=-1)
        hs, ws = (int(x) for x in b["source_shape"])
        return Correspondence(coords, (hs, ws))
    except KeyError as e:
        raise FormatError(f"missing block {e} in correspondence file") from e
