"""Scan/label loading, class remapping, and synthetic 64-beam scan generation.

On-disk conventions follow the public SemanticKITTI layout: scans are
N x 4 little-endian float32 records ``(x, y, z, remission)``, labels are
N little-endian uint32 words whose low 16 bits carry the semantic class
(high 16 bits are a per-object instance id and are discarded here).

The synthetic generator ray-casts an analytic scene (ground plane,
enclosing wall, boxes, vertical cylinders) so that every ray returns a
hit with exactly known geometry, which makes projection round trips
decidable in tests.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
POINT_RECORD_BYTES = 16  # 4 little-endian float32 per point
DEFAULT_IGNORE_ID = 255


class MalformedScanError(ValueError):
    """Raised for scan/label buffers that violate the on-disk format."""


class PairingError(ValueError):
    """Raised when a label array does not match its companion scan."""


class ConfigError(ValueError):
    """Raised for non-physical or inconsistent configuration values."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Immutable lidar sweep: N points with optional labels and ring ids.

    ``points`` is an (N, 4) float32 array of (x, y, z, remission) rows.
    ``labels`` holds per-point class ids, ``ring_ids`` per-point beam
    indices; both are optional and length N when present.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    ring_ids: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be (N, 4), got {pts.shape}")
        if not np.isfinite(pts).all():
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise MalformedScanError(f"non-finite coordinate at point {bad}")
        object.__setattr__(self, "points", _readonly(pts))
        n = len(pts)
        if self.labels is not None:
            lab = np.ascontiguousarray(self.labels, dtype=np.int32)
            if lab.shape != (n,):
                raise PairingError(f"labels length {lab.shape} != {n} points")
            object.__setattr__(self, "labels", _readonly(lab))
        if self.ring_ids is not None:
            rings = np.ascontiguousarray(self.ring_ids, dtype=np.int32)
            if rings.shape != (n,):
                raise PairingError(f"ring_ids length {rings.shape} != {n} points")
            if n and rings.min() < 0:
                raise ValueError("ring_ids must be non-negative")
            object.__setattr__(self, "ring_ids", _readonly(rings))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def remission(self) -> np.ndarray:
        return self.points[:, 3]

    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points[:, :3], axis=1)

    def fingerprint(self) -> bytes:
        """Cheap identity hash (N plus first/last point bytes).

        Used to detect cross-scan misuse when composing view products;
        not collision-proof, only a guard against mixed-up inputs.
        """
        h = hashlib.blake2b(digest_size=16)
        h.update(len(self).to_bytes(8, "little"))
        if len(self):
            h.update(self.points[0].tobytes())
            h.update(self.points[-1].tobytes())
        return h.digest()


@dataclass(frozen=True)
class PointPixelMap:
    """Per-point pixel coordinates in one view.

    ``coords`` is (N, 2) int32 of (row, col); points that are invalid in
    the view carry the sentinel (-1, -1).  ``view_shape`` records the
    raster the coordinates were built against so that consumers can
    rescale when sampling a map at a different resolution.
    """

    coords: np.ndarray
    view_shape: tuple[int, int]

    def __post_init__(self):
        c = np.ascontiguousarray(self.coords, dtype=np.int32)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ValueError(f"coords must be (N, 2), got {c.shape}")
        object.__setattr__(self, "coords", _readonly(c))
        object.__setattr__(self, "view_shape", (int(self.view_shape[0]), int(self.view_shape[1])))

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def valid(self) -> np.ndarray:
        return self.coords[:, 0] >= 0


@dataclass(frozen=True)
class ClassMap:
    """Raw-label to train-label mapping with an ignore id.

    Train ids form the contiguous range [0, num_classes); raw ids absent
    from the mapping resolve to ``ignore_id``, which is excluded from
    every loss and metric.
    """

    raw_to_train: dict[int, int]
    num_classes: int
    ignore_id: int = DEFAULT_IGNORE_ID

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if 0 <= self.ignore_id < self.num_classes:
            raise ConfigError("ignore_id must lie outside [0, num_classes)")
        for raw, train in self.raw_to_train.items():
            if raw < 0:
                raise ConfigError(f"raw id {raw} is negative")
            if not (0 <= train < self.num_classes or train == self.ignore_id):
                raise ConfigError(f"train id {train} for raw id {raw} is out of range")

    def lookup_table(self) -> np.ndarray:
        """Dense raw-id -> train-id table; unmapped ids land on ignore_id."""
        size = max(self.raw_to_train, default=0) + 1
        table = np.full(size, self.ignore_id, dtype=np.int32)
        for raw, train in self.raw_to_train.items():
            table[raw] = train
        return table

    def remap(self, raw_ids: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw_ids)
        if raw.size and raw.min() < 0:
            raise ValueError("raw ids must be non-negative")
        table = self.lookup_table()
        out = np.full(raw.shape, self.ignore_id, dtype=np.int32)
        known = raw < len(table)
        out[known] = table[raw[known]]
        return out

    @classmethod
    def identity(cls, num_classes: int, ignore_id: int = DEFAULT_IGNORE_ID) -> "ClassMap":
        mapping = {c: c for c in range(num_classes)}
        mapping[ignore_id] = ignore_id
        return cls(mapping, num_classes, ignore_id)

    @classmethod
    def from_file(cls, path) -> "ClassMap":
        import json

        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        mapping = {int(k): int(v) for k, v in doc["map"].items()}
        return cls(mapping, int(doc["num_classes"]), int(doc.get("ignore_id", DEFAULT_IGNORE_ID)))

    def to_file(self, path) -> None:
        import json

        doc = {
            "num_classes": self.num_classes,
            "ignore_id": self.ignore_id,
            "map": {str(k): int(v) for k, v in sorted(self.raw_to_train.items())},
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")


# SemanticKITTI 19-class training taxonomy.  Raw ids follow the public
# dataset; train ids 0..18 in the usual class order (car, bicycle,
# motorcycle, truck, other-vehicle, person, bicyclist, motorcyclist,
# road, parking, sidewalk, other-ground, building, fence, vegetation,
# trunk, terrain, pole, traffic-sign).  Moving classes fold onto their
# static counterparts; outliers/other map to ignore.
_SEMANTICKITTI_RAW_TO_TRAIN = {
    0: DEFAULT_IGNORE_ID, 1: DEFAULT_IGNORE_ID,
    10: 0, 11: 1, 13: 4, 15: 2, 16: 4, 18: 3, 20: 4,
    30: 5, 31: 6, 32: 7,
    40: 8, 44: 9, 48: 10, 49: 11,
    50: 12, 51: 13, 52: DEFAULT_IGNORE_ID,
    60: 8, 70: 14, 71: 15, 72: 16, 80: 17, 81: 18,
    99: DEFAULT_IGNORE_ID,
    252: 0, 253: 6, 254: 5, 255: 7, 256: 4, 257: 4, 258: 3, 259: 4,
}

# nuScenes lidarseg 16-class taxonomy (barrier, bicycle, bus, car,
# construction-vehicle, motorcycle, pedestrian, traffic-cone, trailer,
# truck, driveable-surface, other-flat, sidewalk, terrain, manmade,
# vegetation).  Rare/void raw classes map to ignore.
_NUSCENES_RAW_TO_TRAIN = {
    0: DEFAULT_IGNORE_ID, 1: DEFAULT_IGNORE_ID,
    2: 6, 3: 6, 4: 6, 5: DEFAULT_IGNORE_ID, 6: 6,
    7: DEFAULT_IGNORE_ID, 8: DEFAULT_IGNORE_ID, 9: 0, 10: DEFAULT_IGNORE_ID,
    11: DEFAULT_IGNORE_ID, 12: 7, 13: DEFAULT_IGNORE_ID, 14: 1, 15: 2,
    16: 2, 17: 3, 18: 4, 19: DEFAULT_IGNORE_ID, 20: DEFAULT_IGNORE_ID,
    21: 5, 22: 8, 23: 9, 24: 10, 25: 11, 26: 12, 27: 13, 28: 14,
    29: DEFAULT_IGNORE_ID, 30: 15, 31: DEFAULT_IGNORE_ID,
}

SEMANTICKITTI_CLASSMAP = ClassMap(_SEMANTICKITTI_RAW_TO_TRAIN, num_classes=19)
NUSCENES_CLASSMAP = ClassMap(_NUSCENES_RAW_TO_TRAIN, num_classes=16)

CLASSMAP_PRESETS = {
    "semantickitti": SEMANTICKITTI_CLASSMAP,
    "nuscenes": NUSCENES_CLASSMAP,
}


def read_scan(buf: bytes) -> PointCloud:
    """Decode an N x 4 float32 little-endian scan buffer."""
    if len(buf) % POINT_RECORD_BYTES != 0:
        raise MalformedScanError(
            f"scan buffer length {len(buf)} is not a multiple of {POINT_RECORD_BYTES}"
        )
    pts = np.frombuffer(buf, dtype=SCAN_DTYPE).reshape(-1, 4)
    return PointCloud(points=pts)


def write_scan(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype=SCAN_DTYPE).tobytes()


def read_labels(buf: bytes, cmap: ClassMap) -> np.ndarray:
    """Decode label words and remap to train ids; instance bits discarded."""
    if len(buf) % 4 != 0:
        raise MalformedScanError(f"label buffer length {len(buf)} is not a multiple of 4")
    words = np.frombuffer(buf, dtype=LABEL_DTYPE)
    return cmap.remap(words & 0xFFFF)


def write_labels(labels: np.ndarray) -> bytes:
    lab = np.asarray(labels)
    if lab.size and lab.min() < 0:
        raise ValueError("labels must be non-negative to serialize")
    return lab.astype(LABEL_DTYPE).tobytes()


def load_scan(path) -> PointCloud:
    with open(path, "rb") as f:
        return read_scan(f.read())


def load_labels(path, cmap: ClassMap) -> np.ndarray:
    with open(path, "rb") as f:
        return read_labels(f.read(), cmap)


def attach_labels(cloud: PointCloud, labels: np.ndarray) -> PointCloud:
    if len(labels) != len(cloud):
        raise PairingError(f"{len(labels)} labels for {len(cloud)} points")
    return PointCloud(points=cloud.points, labels=labels, ring_ids=cloud.ring_ids)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box obstacle: center (x, y, z), full size, class label."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    label: int


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder obstacle (side surface only)."""

    cx: float
    cy: float
    radius: float
    z0: float
    z1: float
    label: int


def _default_scene() -> tuple:
    # A handful of cars (boxes), trunks and poles (cylinders) at varied
    # ranges; labels use the SemanticKITTI train taxonomy.
    return (
        Box((8.0, 2.0, -1.0), (4.2, 1.8, 1.5), label=0),
        Box((15.0, -6.0, -0.9), (4.5, 1.9, 1.6), label=0),
        Box((-12.0, 5.0, -1.0), (4.0, 1.8, 1.5), label=0),
        Box((25.0, 10.0, -0.5), (8.0, 2.5, 2.8), label=3),
        Cylinder(6.0, -4.0, 0.35, -1.73, 2.5, label=15),
        Cylinder(-9.0, -9.0, 0.40, -1.73, 3.5, label=15),
        Cylinder(18.0, 4.0, 0.15, -1.73, 4.0, label=17),
        Cylinder(-20.0, 14.0, 0.15, -1.73, 4.5, label=17),
    )


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic sweep parameters for a spinning multi-beam sensor.

    ``beam_layout`` chooses the vertical spacing of beams: "uniform"
    spreads them evenly over the FOV, "blocks" packs the upper half of
    the beams into the top third (mimicking real sensors whose
    non-uniform spacing makes elevation binning collide).
    """

    num_beams: int = 64
    points_per_beam: int = 2048
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0
    dropout: float = 0.0
    order: str = "ring_major"  # or "azimuth_major"
    beam_layout: str = "blocks"  # or "uniform"
    sensor_height: float = 1.73
    wall_radius: float = 55.0
    ground_label: int = 8
    wall_label: int = 12
    obstacles: tuple = field(default_factory=_default_scene)

    def __post_init__(self):
        if self.num_beams < 1 or self.points_per_beam < 1:
            raise ConfigError("num_beams and points_per_beam must be >= 1")
        if self.fov_up_deg <= self.fov_down_deg:
            raise ConfigError("fov_up must exceed fov_down")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.order not in ("ring_major", "azimuth_major"):
            raise ConfigError(f"unknown order {self.order!r}")
        if self.beam_layout not in ("uniform", "blocks"):
            raise ConfigError(f"unknown beam_layout {self.beam_layout!r}")
        if self.sensor_height <= 0 or self.wall_radius <= 0:
            raise ConfigError("sensor_height and wall_radius must be positive")


def beam_elevations(cfg: SynthConfig) -> np.ndarray:
    """Per-beam elevation angles in radians, top beam first."""
    f_up = math.radians(cfg.fov_up_deg)
    f_down = math.radians(cfg.fov_down_deg)
    fov = f_up - f_down
    frac = (np.arange(cfg.num_beams, dtype=np.float64) + 0.5) / cfg.num_beams
    if cfg.beam_layout == "blocks":
        # upper half of the beams covers the top third of the FOV
        frac = np.where(frac < 0.5, frac * (2.0 / 3.0), 1.0 / 3.0 + (frac - 0.5) * (4.0 / 3.0))
    return f_up - frac * fov


def _raycast(directions: np.ndarray, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Closest-hit distance and label for unit rays from the origin."""
    n = len(directions)
    dx, dy, dz = directions[:, 0], directions[:, 1], directions[:, 2]
    best_t = np.full(n, np.inf)
    best_label = np.full(n, -1, dtype=np.int32)

    def consider(t, label):
        better = t < best_t
        best_t[better] = t[better]
        best_label[better] = label

    # enclosing wall guarantees every ray terminates
    horiz = np.hypot(dx, dy)
    t_wall = np.where(horiz > 0, cfg.wall_radius / np.maximum(horiz, 1e-300), np.inf)
    consider(t_wall, cfg.wall_label)

    t_ground = np.where(dz < 0, -cfg.sensor_height / np.where(dz < 0, dz, -1.0), np.inf)
    consider(t_ground, cfg.ground_label)

    for obs in cfg.obstacles:
        if isinstance(obs, Box):
            lo = np.asarray(obs.center) - np.asarray(obs.size) / 2.0
            hi = np.asarray(obs.center) + np.asarray(obs.size) / 2.0
            zero = directions == 0.0
            with np.errstate(divide="ignore"):
                inv = np.where(zero, 1.0, 1.0 / directions)
            t1 = lo[None, :] * inv
            t2 = hi[None, :] * inv
            # rays parallel to a slab: inside it -> unconstrained, else miss
            inside = (lo[None, :] <= 0.0) & (hi[None, :] >= 0.0)
            t1 = np.where(zero, np.where(inside, -np.inf, np.inf), t1)
            t2 = np.where(zero, np.where(inside, np.inf, -np.inf), t2)
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            hit = (tmax >= tmin) & (tmin > 1e-9)
            consider(np.where(hit, tmin, np.inf), obs.label)
        elif isinstance(obs, Cylinder):
            a = dx * dx + dy * dy
            b = -2.0 * (dx * obs.cx + dy * obs.cy)
            c = obs.cx**2 + obs.cy**2 - obs.radius**2
            disc = b * b - 4.0 * a * c
            ok = (disc >= 0) & (a > 0)
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t = np.where(ok, (-b - sq) / np.where(a > 0, 2.0 * a, 1.0), np.inf)
            z = t * dz
            hit = ok & (t > 1e-9) & (z >= obs.z0) & (z <= obs.z1)
            consider(np.where(hit, t, np.inf), obs.label)
        else:
            raise ConfigError(f"unknown obstacle type {type(obs).__name__}")
    return best_t, best_label


def synth_scan(cfg: SynthConfig, seed: int) -> PointCloud:
    """Deterministic synthetic sweep with exact labels and ring ids.

    With dropout 0 the cloud has exactly num_beams * points_per_beam
    points, one per (ring, azimuth step) pair, emitted in sweep order.
    """
    b, t = cfg.num_beams, cfg.points_per_beam
    elev = beam_elevations(cfg)
    # one azimuth per step, swept from +pi toward -pi (bin centers)
    azim = math.pi * (1.0 - 2.0 * (np.arange(t, dtype=np.float64) + 0.5) / t)

    phi = np.repeat(elev, t)
    psi = np.tile(azim, b)
    rings = np.repeat(np.arange(b, dtype=np.int32), t)
    if cfg.order == "azimuth_major":
        reorder = np.arange(b * t).reshape(b, t).T.reshape(-1)
        phi, psi, rings = phi[reorder], psi[reorder], rings[reorder]

    cos_phi = np.cos(phi)
    directions = np.stack([cos_phi * np.cos(psi), cos_phi * np.sin(psi), np.sin(phi)], axis=1)
    dist, labels = _raycast(directions, cfg)

    rng = np.random.default_rng(seed)
    remission = rng.random(b * t)
    keep = rng.random(b * t) >= cfg.dropout if cfg.dropout > 0 else slice(None)

    pts = np.empty((b * t, 4), dtype=np.float32)
    pts[:, :3] = (directions * dist[:, None]).astype(np.float32)
    pts[:, 3] = remission.astype(np.float32)
    return PointCloud(points=pts[keep], labels=labels[keep], ring_ids=rings[keep])
