"""Segmentation-overlap and deformation-regularity metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractViolation
from .warp import jacobian_det


class UndefinedMetric(ValueError):
    """Raised when a metric is requested on an empty region."""


def dice(a, b, label):
    """Overlap 2|A n B| / (|A| + |B|); both regions empty counts as 1."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ContractViolation("dice: mask extents differ")
    ra, rb = a == label, b == label
    denom = int(ra.sum()) + int(rb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((ra & rb).sum()) / denom


def contour_points(mask, label):
    """4-connectivity boundary pixels of a labeled region, as (row, col)."""
    region = np.asarray(mask) == label
    padded = np.pad(region, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    boundary = region & ~interior
    return np.argwhere(boundary)


def hausdorff(a, b, label):
    """Symmetric max-min Euclidean distance between region contours."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ContractViolation("hausdorff: mask extents differ")
    pa = contour_points(a, label)
    pb = contour_points(b, label)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedMetric(f"hausdorff undefined: empty mask for label {label}")
    d2 = ((pa[:, None, :].astype(np.float64) - pb[None, :, :]) ** 2).sum(axis=2)
    forward = np.sqrt(d2.min(axis=1)).max()
    backward = np.sqrt(d2.min(axis=0)).max()
    return float(max(forward, backward))


def reliability(dices, d):
    """Fraction of Dice values strictly greater than d."""
    if len(dices) == 0:
        raise ContractViolation("reliability needs a nonempty list")
    if not 0.0 <= d <= 1.0:
        raise ContractViolation("reliability threshold must lie in [0,1]")
    return sum(1 for v in dices if v > d) / len(dices)


def count_nonpositive_jacobian(field):
    """Pixels where det(J) <= 0, i.e. local folding or collapse."""
    return int((jacobian_det(field) <= 0).sum())


@dataclass
class EvalReport:
    dice: dict = field(default_factory=dict)  # label -> value
    hausdorff_px: dict = field(default_factory=dict)
    nonpositive_jacobian: int = 0

    def to_dict(self):
        return {
            "dice": {str(k): v for k, v in self.dice.items()},
            "hausdorff_px": {str(k): v for k, v in self.hausdorff_px.items()},
            "nonpositive_jacobian": self.nonpositive_jacobian,
        }


def evaluate_masks(warped_mask, fixed_mask, field=None, labels=None):
    """Per-label Dice and Hausdorff, plus the folding count of a field."""
    warped_mask = np.asarray(warped_mask)
    fixed_mask = np.asarray(fixed_mask)
    if warped_mask.shape != fixed_mask.shape:
        raise ContractViolation("evaluate_masks: mask extents differ")
    if labels is None:
        labels = sorted(set(np.unique(fixed_mask)) - {0})
    report = EvalReport()
    for label in labels:
        label = int(label)
        report.dice[label] = dice(warped_mask, fixed_mask, label)
        report.hausdorff_px[label] = hausdorff(warped_mask, fixed_mask, label)
    if field is not None:
        report.nonpositive_jacobian = count_nonpositive_jacobian(field)
    return report
