"""Evaluation metrics: MSE, pixel differences, component counts, relative improvement and root traits.

Undefined values (e.g. an MSE over an empty gap set) are reported as ``None``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .mask_data import as_mask, skeletonize

_STRUCT = {4: ndimage.generate_binary_structure(2, 1), 8: np.ones((3, 3), dtype=bool)}


def _same_shape(a, b):
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a.astype(np.float64) - b) ** 2))


def mse_within_gaps(a, b, gaps) -> Optional[float]:
    a, b = _same_shape(a, b)
    gaps = as_mask(gaps)
    if gaps.shape != a.shape:
        raise ValueError(f"gap mask shape {gaps.shape} does not match {a.shape}")
    n = int(gaps.sum())
    if n == 0:
        return None
    return float((a[gaps] != b[gaps]).sum() / n)


def pixel_diff(a, b, region=None) -> int:
    a, b = _same_shape(a, b)
    diff = a != b
    if region is not None:
        region = as_mask(region)
        if region.shape != a.shape:
            raise ValueError(f"region shape {region.shape} does not match {a.shape}")
        diff &= region
    return int(diff.sum())


def connected_components(mask, connectivity: int = 8) -> int:
    if connectivity not in _STRUCT:
        raise ValueError("connectivity must be 4 or 8")
    return int(ndimage.label(as_mask(mask), structure=_STRUCT[connectivity])[1])


def relative_improvement(before: float, after: float) -> Optional[float]:
    """``|before - after| / before``; 0 when both are 0, ``None`` when only ``before`` is 0."""
    if before < 0:
        raise ValueError("before must be >= 0")
    if before == 0:
        return 0.0 if after == 0 else None
    return abs(before - after) / before


# --- root traits --------------------------------------------------------------------------

@dataclass(frozen=True)
class TraitSet:
    length: float
    tips: int
    hull_area: float


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list[tuple[float, float]]:
    """Andrew's monotone chain; counter-clockwise hull without collinear points."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def polygon_area(vertices) -> float:
    """Shoelace formula."""
    if len(vertices) < 3:
        return 0.0
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def hull_area(mask) -> float:
    mask = as_mask(mask)
    if not mask.any():
        return 0.0
    # only boundary pixels can be hull vertices
    edge = mask & ~ndimage.binary_erosion(mask, border_value=0)
    rows, cols = np.nonzero(edge)
    return polygon_area(convex_hull(zip(rows.tolist(), cols.tolist())))


def skeleton_length(skel) -> float:
    """Orthogonal adjacencies count 1, diagonal ones sqrt(2) unless a pixel sharing an edge
    with both ends already links them (the diagonal would short-cut that corner)."""
    s = np.pad(as_mask(skel), 1)
    c = s[1:-1, 1:-1]
    right = c & s[1:-1, 2:]
    down = c & s[2:, 1:-1]
    length = float(right.sum() + down.sum())
    # diagonal to the lower right: corners are (r, c+1) and (r+1, c)
    dr = c & s[2:, 2:] & ~s[1:-1, 2:] & ~s[2:, 1:-1]
    # diagonal to the lower left: corners are (r, c-1) and (r+1, c)
    dl = c & s[2:, :-2] & ~s[1:-1, :-2] & ~s[2:, 1:-1]
    return length + math.sqrt(2.0) * float(dr.sum() + dl.sum())


def neighbour_counts(mask) -> np.ndarray:
    m = as_mask(mask).astype(np.int32)
    return ndimage.convolve(m, np.ones((3, 3), dtype=np.int32), mode="constant") - m


def count_tips(skel) -> int:
    skel = as_mask(skel)
    return int((skel & (neighbour_counts(skel) == 1)).sum())


def root_traits(mask) -> TraitSet:
    mask = as_mask(mask)
    skel = skeletonize(mask)
    return TraitSet(skeleton_length(skel), count_tips(skel), hull_area(mask))


# --- aggregate report ---------------------------------------------------------------------

PER_IMAGE_KEYS = ("mse_overall", "mse_within_gaps", "rel_pixel_diff", "rel_comp_diff",
                  "components_gt", "components_before", "components_after",
                  "length_before", "length_after", "tips_before", "tips_after",
                  "hull_area_before", "hull_area_after")


@dataclass
class MetricsReport:
    per_image: list[dict]
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    @property
    def mse_overall(self):
        return self.mean.get("mse_overall")

    @property
    def mse_within_gaps(self):
        return self.mean.get("mse_within_gaps")

    @property
    def rel_pixel_diff(self):
        return self.mean.get("rel_pixel_diff")

    @property
    def rel_comp_diff(self):
        return self.mean.get("rel_comp_diff")

    def to_dict(self) -> dict:
        return asdict(self)


def image_metrics(gt, corrupted, inpainted, gaps, connectivity: int = 8,
                  pixel_diff_in_gaps: bool = True, traits: bool = True) -> dict:
    gt, corrupted = _same_shape(gt, corrupted)
    inpainted = as_mask(inpainted)
    gaps = as_mask(gaps)
    region = gaps if pixel_diff_in_gaps else None
    comp_gt = connected_components(gt, connectivity)
    comp_before = connected_components(corrupted, connectivity)
    comp_after = connected_components(inpainted, connectivity)
    row = {
        "mse_overall": mse(gt, inpainted),
        "mse_within_gaps": mse_within_gaps(gt, inpainted, gaps),
        "rel_pixel_diff": relative_improvement(pixel_diff(gt, corrupted, region),
                                               pixel_diff(gt, inpainted, region)),
        "rel_comp_diff": relative_improvement(comp_before, comp_after),
        "components_gt": comp_gt,
        "components_before": comp_before,
        "components_after": comp_after,
    }
    if traits:
        tb, ta = root_traits(corrupted), root_traits(inpainted)
        row.update(length_before=tb.length, length_after=ta.length, tips_before=tb.tips,
                   tips_after=ta.tips, hull_area_before=tb.hull_area, hull_area_after=ta.hull_area)
    return row


def _mean_std(values: Sequence[float]) -> tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


def aggregate(rows: list[dict]) -> MetricsReport:
    report = MetricsReport(per_image=rows)
    keys = [k for k in PER_IMAGE_KEYS if any(k in r for r in rows)]
    for k in keys:
        vals = [r[k] for r in rows if r.get(k) is not None]
        report.mean[k], report.std[k] = _mean_std(vals)
        report.excluded[k] = sum(1 for r in rows if r.get(k) is None)
    return report


def evaluate(ground_truth: Sequence, corrupted: Sequence, inpainted: Sequence, gaps: Sequence,
             connectivity: int = 8, pixel_diff_in_gaps: bool = True,
             traits: bool = True) -> MetricsReport:
    """Per-image metrics plus mean and sample (n-1) standard deviation."""
    n = len(ground_truth)
    if not (len(corrupted) == len(inpainted) == len(gaps) == n):
        raise ValueError(f"misaligned inputs: {n}, {len(corrupted)}, {len(inpainted)}, {len(gaps)}")
    rows = [image_metrics(y, x, xh, m, connectivity, pixel_diff_in_gaps, traits)
            for y, x, xh, m in zip(ground_truth, corrupted, inpainted, gaps)]
    return aggregate(rows)
