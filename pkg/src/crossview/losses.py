"""Forward-only loss terms for scored predictions against labels.

Cross entropy and the Lovasz-Softmax surrogate of the Jaccard loss are
combined per view (weights 1:1) for the dense 2D terms; point-level
terms use plain cross entropy.  The composite weighs the five terms by
the coefficient vector (alpha, beta, gamma, rho, sigma).  Rows carrying
the ignore id are excluded from every term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-6


class UndefinedLossError(ValueError):
    """Raised when no non-ignored rows remain to average over."""


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the composite loss, all finite and >= 0."""

    alpha: float = 2.0
    beta: float = 2.0
    gamma: float = 2.0
    rho: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "rho", "sigma"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)

    @classmethod
    def from_string(cls, text: str) -> "LossWeights":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 5:
            raise ValueError(f"expected 5 comma-separated weights, got {len(parts)}")
        return cls(*parts)


def _clean(probs: np.ndarray, labels: np.ndarray, ignore_id: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if p.ndim != 2 or len(p) != len(y):
        raise ValueError(f"probs {p.shape} do not pair with {len(y)} labels")
    keep = y != ignore_id
    p, y = p[keep], y[keep]
    if len(p) == 0:
        raise UndefinedLossError("no rows left after removing the ignore id")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise ValueError("label id outside [0, num_classes)")
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > ROW_SUM_TOL:
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"row {bad} sums to {sums[bad]:.8f}, not a probability vector")
    return p, y


def cross_entropy(probs: np.ndarray, labels: np.ndarray, ignore_id: int = 255) -> float:
    """Mean -log p(true class) over non-ignored rows, probabilities floored."""
    p, y = _clean(probs, labels, ignore_id)
    picked = np.clip(p[np.arange(len(y)), y], PROB_FLOOR, 1.0)
    return float(-np.log(picked).mean())


def _jaccard_extension_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard loss along a sorted error prefix."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: np.ndarray, labels: np.ndarray, ignore_id: int = 255) -> float:
    """Lovasz extension of the per-class Jaccard loss, averaged over
    the classes present in the ground truth; always in [0, 1]."""
    p, y = _clean(probs, labels, ignore_id)
    losses = []
    for c in np.unique(y):
        fg = (y == c).astype(np.float64)
        errors = np.abs(fg - p[:, c])
        order = np.argsort(-errors, kind="stable")
        losses.append(float(errors[order] @ _jaccard_extension_grad(fg[order])))
    return float(np.mean(losses))


def loss_cl(probs: np.ndarray, labels: np.ndarray, ignore_id: int = 255) -> float:
    """Cross entropy plus Lovasz-Softmax with unit weights."""
    return cross_entropy(probs, labels, ignore_id) + lovasz_softmax(probs, labels, ignore_id)


def loss_total(
    img_scores_rv: np.ndarray,
    img_labels_rv: np.ndarray,
    img_scores_bev: np.ndarray,
    img_labels_bev: np.ndarray,
    pt_scores_rv: np.ndarray,
    pt_scores_bev: np.ndarray,
    pt_scores_fused: np.ndarray,
    pt_labels: np.ndarray,
    weights: LossWeights = LossWeights(),
    ignore_id: int = 255,
) -> tuple[float, dict[str, float]]:
    """Composite loss and its per-term breakdown.

    total = alpha * CE(fused points)
          + beta * CE(rv points) + gamma * CE(bev points)      (3D part)
          + rho * CL(rv image) + sigma * CL(bev image)         (2D part)

    Image-space scores arrive as (H, W, C) with (H, W) label rasters
    and are flattened row-wise; point terms are (N, C) against (N,)
    labels.
    """

    def flat(scores):
        s = np.asarray(scores)
        return s.reshape(-1, s.shape[-1])

    terms = {
        "ce_fused": cross_entropy(flat(pt_scores_fused), pt_labels, ignore_id),
        "ce_rv_points": cross_entropy(flat(pt_scores_rv), pt_labels, ignore_id),
        "ce_bev_points": cross_entropy(flat(pt_scores_bev), pt_labels, ignore_id),
        "cl_rv_image": loss_cl(flat(img_scores_rv), img_labels_rv, ignore_id),
        "cl_bev_image": loss_cl(flat(img_scores_bev), img_labels_bev, ignore_id),
    }
    terms.update(compose_total(terms, weights))
    return terms["total"], terms


def compose_total(terms: dict, weights: LossWeights) -> dict[str, float]:
    """Weigh the five constituent terms into the 2D/3D/total composite."""
    loss_3d = weights.beta * terms["ce_rv_points"] + weights.gamma * terms["ce_bev_points"]
    loss_2d = weights.rho * terms["cl_rv_image"] + weights.sigma * terms["cl_bev_image"]
    return {
        "loss_3d": loss_3d,
        "loss_2d": loss_2d,
        "total": weights.alpha * terms["ce_fused"] + loss_3d + loss_2d,
    }
