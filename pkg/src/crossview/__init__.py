"""Multi-view lidar geometry toolkit.

Projects point clouds to range-view and polar bird's-eye-view rasters,
builds pixel-level correspondences between the two views through the
point cloud, runs the align-then-fuse forward pass across views, brings
dense scores back to points (grid sampling, kernel-point fusion head),
and evaluates predictions (losses, IoU metrics).  Everything is
forward-only and deterministic; no training is involved.

Pixel convention used throughout: ``(u, v) = (row, column)``.
"""

from .ingest import (
    ClassMap,
    ConfigError,
    MalformedScanError,
    PairingError,
    PointCloud,
    PointPixelMap,
    SynthConfig,
    read_labels,
    read_scan,
    synth_scan,
    write_labels,
    write_scan,
)
from .rv import (
    KITTI_RV,
    NUSCENES_RV,
    RangeImage,
    RvSensorConfig,
    infer_rings,
    project_rv_original,
    project_rv_scanunfold,
    rv_pixel,
    spherical_coords,
    valid_projection_rate,
)
from .bev import (
    KITTI_BEV,
    NUSCENES_BEV,
    BevGridConfig,
    BevImage,
    point_bev_features,
    polar_cell,
    project_bev,
)
from .flow import (
    AttentionParams,
    BatchNorm,
    Correspondence,
    MismatchedCloudError,
    align,
    attention_components,
    attention_fuse,
    compose_b2r,
    compose_r2b,
    gfm_forward,
    scale_correspondence,
)
from .head import (
    KpconvParams,
    argmax_labels,
    fuse_predictions,
    grid_sample,
    knn_postprocess,
    kpconv_forward,
)
from .losses import (
    LossWeights,
    UndefinedLossError,
    cross_entropy,
    loss_cl,
    loss_total,
    lovasz_softmax,
)
from .metrics import (
    ConfusionMatrix,
    UndefinedMetricError,
    accuracy,
    fwiou,
    miou,
)

__version__ = "0.1.0"
