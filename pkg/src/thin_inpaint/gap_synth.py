"""Artificial gap generation: square, free-form brush, blob and mixed gaps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .mask_data import as_mask, disk

GAP_KINDS = ("square", "brush", "blob", "mix")
BLOB_SIZE = 32


@dataclass(frozen=True)
class BrushConfig:
    vertex_count_range: tuple[int, int] = (4, 8)
    stroke_width_range: tuple[int, int] = (6, 24)
    max_turn: float = 60.0
    segment_length_range: tuple[int, int] = (16, 64)


@dataclass(frozen=True)
class GapConfig:
    kind: str = "mix"
    count_range: tuple[int, int] = (1, 4)
    square_size_range: tuple[int, int] = (16, 48)
    brush: BrushConfig = field(default_factory=BrushConfig)
    blob_scale_range: tuple[float, float] = (1.0, 2.0)
    blob_count: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GAP_KINDS:
            raise ValueError(f"gap kind must be one of {GAP_KINDS}, got {self.kind!r}")
        ranges = {
            "count_range": self.count_range,
            "square_size_range": self.square_size_range,
            "brush.vertex_count_range": self.brush.vertex_count_range,
            "brush.stroke_width_range": self.brush.stroke_width_range,
            "brush.segment_length_range": self.brush.segment_length_range,
            "blob_scale_range": self.blob_scale_range,
        }
        for name, (lo, hi) in ranges.items():
            if lo > hi or lo <= 0:
                raise ValueError(f"{name} must satisfy 0 < lower <= upper, got ({lo}, {hi})")
        if self.blob_count < 1:
            raise ValueError("blob_count must be >= 1")


def scale_gap_config(cfg: GapConfig, factor: float) -> GapConfig:
    """Shrink or grow every pixel-sized range by ``factor`` (counts are left alone)."""
    def px(lo_hi):
        lo, hi = lo_hi
        return max(2, round(lo * factor)), max(3, round(hi * factor))

    return replace(
        cfg,
        square_size_range=px(cfg.square_size_range),
        brush=replace(cfg.brush, stroke_width_range=px(cfg.brush.stroke_width_range),
                      segment_length_range=px(cfg.brush.segment_length_range)),
        blob_scale_range=tuple(max(0.1, v * factor) for v in cfg.blob_scale_range),
    )


def desk_gap_config(patch_size: int = 64, kind: str = "mix", seed: int = 0) -> GapConfig:
    """Gap sizes scaled down from the 256-pixel defaults to a smaller patch."""
    return scale_gap_config(GapConfig(kind=kind, seed=seed), patch_size / 256.0)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def make_blob_library(seed: int, count: int) -> list[np.ndarray]:
    """``count`` blobs of 32x32: smoothed seeded noise cut at its 70th percentile, largest component kept."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return list(_blob_library(seed, count))


@lru_cache(maxsize=16)
def _blob_library(seed: int, count: int) -> tuple[np.ndarray, ...]:
    blobs = []
    for i in range(count):
        attempt = 0
        while True:
            rng = np.random.default_rng([seed, i, attempt])
            noise = rng.standard_normal((BLOB_SIZE, BLOB_SIZE))
            sigma = rng.uniform(2.5, 5.0)
            smooth = ndimage.gaussian_filter(noise, sigma=sigma, mode="constant")
            blob = _largest_component(smooth > np.percentile(smooth, 70))
            if blob.any():
                break
            attempt += 1
        blob.setflags(write=False)
        blobs.append(blob)
    return tuple(blobs)


def _stamp_square(gap, rng, cfg):
    h, w = gap.shape
    side = int(rng.integers(cfg.square_size_range[0], cfg.square_size_range[1] + 1))
    r = int(rng.integers(0, max(1, h - side + 1)))
    c = int(rng.integers(0, max(1, w - side + 1)))
    gap[r:r + side, c:c + side] = True


def brush_polyline(rng, shape, brush: BrushConfig) -> tuple[np.ndarray, int]:
    """Random polyline vertices (rows, cols as float) with bounded turning, and a stroke width."""
    h, w = shape
    n_vertex = int(rng.integers(brush.vertex_count_range[0], brush.vertex_count_range[1] + 1))
    width = int(rng.integers(brush.stroke_width_range[0], brush.stroke_width_range[1] + 1))
    pts = [(rng.uniform(0, h), rng.uniform(0, w))]
    heading = rng.uniform(0, 2 * math.pi)
    max_turn = math.radians(brush.max_turn)
    for _ in range(n_vertex - 1):
        heading += rng.uniform(-max_turn, max_turn)
        length = rng.uniform(brush.segment_length_range[0], brush.segment_length_range[1])
        r0, c0 = pts[-1]
        r1 = float(np.clip(r0 + length * math.sin(heading), 0, h - 1))
        c1 = float(np.clip(c0 + length * math.cos(heading), 0, w - 1))
        pts.append((r1, c1))
    return np.array(pts), width


def _stamp_brush(gap, rng, cfg, record=None):
    pts, width = brush_polyline(rng, gap.shape, cfg.brush)
    if record is not None:
        record.append((pts, width))
    centre = np.zeros_like(gap)
    h, w = gap.shape
    for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
        n = int(math.ceil(max(abs(r1 - r0), abs(c1 - c0)))) + 1
        rr = np.rint(np.linspace(r0, r1, n)).astype(int)
        cc = np.rint(np.linspace(c0, c1, n)).astype(int)
        centre[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)] = True
    gap |= ndimage.binary_dilation(centre, structure=disk(width / 2.0))


def _scale_nearest(blob: np.ndarray, scale: float) -> np.ndarray:
    size = max(1, int(round(BLOB_SIZE * scale)))
    idx = np.minimum((np.arange(size) / scale).astype(int), BLOB_SIZE - 1)
    return blob[np.ix_(idx, idx)]


def _stamp_blob(gap, rng, cfg, blobs):
    blob = blobs[int(rng.integers(0, len(blobs)))]
    scale = float(rng.uniform(cfg.blob_scale_range[0], cfg.blob_scale_range[1]))
    b = _scale_nearest(blob, scale)
    h, w = gap.shape
    bh, bw = b.shape
    r = int(rng.integers(0, max(1, h - bh + 1)))
    c = int(rng.integers(0, max(1, w - bw + 1)))
    gap[r:r + bh, c:c + bw] |= b[: h - r, : w - c]


def sample_gap_mask(cfg: GapConfig, patch_shape: tuple[int, int], rng: np.random.Generator,
                    kinds_out: list | None = None) -> np.ndarray:
    """Draw a gap mask for one patch; placements are uniform over the patch and clipped at borders.

    ``kinds_out``, if given, receives the family chosen for each gap (useful under ``mix``).
    """
    gap = np.zeros(patch_shape, dtype=bool)
    blobs = _blob_library(cfg.seed, cfg.blob_count)
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    for _ in range(count):
        kind = cfg.kind
        if kind == "mix":
            kind = ("square", "brush", "blob")[int(rng.integers(0, 3))]
        if kinds_out is not None:
            kinds_out.append(kind)
        if kind == "square":
            _stamp_square(gap, rng, cfg)
        elif kind == "brush":
            _stamp_brush(gap, rng, cfg)
        else:
            _stamp_blob(gap, rng, cfg, blobs)
    return gap


def corrupt(patch: np.ndarray, gaps: np.ndarray) -> np.ndarray:
    """Force gap pixels to background: ``patch AND NOT gaps``."""
    patch, gaps = as_mask(patch), as_mask(gaps)
    if patch.shape != gaps.shape:
        raise ValueError(f"shape mismatch: patch {patch.shape} vs gaps {gaps.shape}")
    return patch & ~gaps


def corrupt_image(mask: np.ndarray, cfg: GapConfig, patch_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gap a whole mask tile by tile (one independent stream per tile); returns ``(corrupted, gaps)``."""
    mask = as_mask(mask)
    h, w = mask.shape
    rows, cols = -(-h // patch_size), -(-w // patch_size)
    gaps = np.zeros((rows * patch_size, cols * patch_size), dtype=bool)
    for i in range(rows * cols):
        r, c = divmod(i, cols)
        tile = sample_gap_mask(cfg, (patch_size, patch_size), np.random.default_rng([seed, i]))
        gaps[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = tile
    gaps = gaps[:h, :w]
    return corrupt(mask, gaps), gaps
