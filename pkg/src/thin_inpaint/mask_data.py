"""Binary mask I/O, synthetic thin-structure generation and augmentation.

Masks are plain 2-D ``numpy`` arrays of dtype ``bool`` (True = foreground).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

PathLike = Union[str, Path]

_LUMA = np.array([0.299, 0.587, 0.114])


class MaskIOError(OSError):
    """Raised when a mask file cannot be read or written."""


def as_mask(a) -> np.ndarray:
    """Validate and convert ``a`` to a 2-D boolean mask."""
    arr = np.asarray(a)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
    if arr.dtype == np.bool_:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return arr.astype(bool)


def load_mask(path: PathLike, threshold: int = 127) -> np.ndarray:
    """Read a PNG and binarize it: values strictly above ``threshold`` become foreground.

    Colour images are reduced with BT.601 luma (0.299 R + 0.587 G + 0.114 B).
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise MaskIOError(f"{path}: unsupported bit depth (mode {mode}); expected 8-bit")
            if mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
                mode = img.mode
            if mode == "1":
                img = img.convert("L")
                mode = "L"
            arr = np.asarray(img)
    except MaskIOError:
        raise
    except (OSError, ValueError) as exc:
        raise MaskIOError(f"cannot read mask {path}: {exc}") from exc

    if mode in ("L", "LA"):
        gray = arr if arr.ndim == 2 else arr[..., 0]
        return gray.astype(np.int32) > threshold
    if mode in ("RGB", "RGBA"):
        luma = arr[..., :3].astype(np.float64) @ _LUMA
        return luma > threshold
    raise MaskIOError(f"{path}: unsupported image mode {mode}")


def save_mask(mask: np.ndarray, path: PathLike) -> None:
    """Write ``mask`` as an 8-bit grayscale PNG (foreground 255, background 0)."""
    mask = as_mask(mask)
    path = Path(path)
    try:
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise MaskIOError(f"cannot write mask {path}: {exc}") from exc


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    canvas: tuple[int, int] = (512, 512)
    stem_count: int = 3
    branch_prob: float = 0.015
    step_jitter: float = 8.0
    thickness: int = 3
    min_length: int = 200

    def __post_init__(self):
        if not 0.0 <= self.branch_prob <= 1.0:
            raise ValueError(f"branch_prob must lie in [0, 1], got {self.branch_prob}")
        if self.thickness < 1:
            raise ValueError(f"thickness must be >= 1, got {self.thickness}")
        if min(self.canvas) < 64:
            raise ValueError(f"canvas dims must be >= 64, got {self.canvas}")
        if self.stem_count < 1:
            raise ValueError(f"stem_count must be >= 1, got {self.stem_count}")


def disk(radius: float) -> np.ndarray:
    r = int(math.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= radius * radius + 1e-9


def _walk(rng, canvas, start, angle, budget, jitter, branch_prob, depth, out):
    """Trace one stroke; children are traced recursively.  Returns the step count."""
    h, w = canvas
    r, c = start
    steps = 0
    for _ in range(int(budget)):
        angle += rng.normal(0.0, jitter)
        # weak pull back towards straight down (90 deg)
        angle += 0.03 * (90.0 - angle)
        r += math.sin(math.radians(angle))
        c += math.cos(math.radians(angle))
        ir, ic = int(round(r)), int(round(c))
        if not (0 <= ir < h and 0 <= ic < w):
            break
        out[ir, ic] = True
        steps += 1
        if depth < 3 and branch_prob > 0 and rng.random() < branch_prob:
            side = 1.0 if rng.random() < 0.5 else -1.0
            child_angle = angle + side * rng.uniform(30.0, 70.0)
            child_budget = (budget - steps) * rng.uniform(0.2, 0.5)
            steps += _walk(rng, canvas, (r, c), child_angle, child_budget, jitter,
                           branch_prob * 0.7, depth + 1, out)
    return steps


def generate_structure(cfg: SynthConfig) -> np.ndarray:
    """Seeded branching random walk: root-like strokes hanging from one seed point on the top edge."""
    h, w = cfg.canvas
    if cfg.min_length > h * w // max(cfg.thickness, 1):
        raise ValueError(f"canvas {cfg.canvas} too small to place min_length={cfg.min_length}")
    for attempt in range(50):
        rng = np.random.default_rng([cfg.seed, attempt])
        centre = np.zeros((h, w), dtype=bool)
        seed_pt = (0.0, w / 2.0 + rng.uniform(-0.1, 0.1) * w)
        centre[0, int(round(seed_pt[1]))] = True
        total = 0
        for k in range(cfg.stem_count):
            if cfg.stem_count == 1:
                angle = 90.0 + rng.uniform(-10.0, 10.0)
            else:
                angle = 90.0 + (k / (cfg.stem_count - 1) - 0.5) * 100.0 + rng.uniform(-8.0, 8.0)
            budget = h * rng.uniform(0.9, 1.6)
            total += _walk(rng, (h, w), seed_pt, angle, budget, cfg.step_jitter,
                           cfg.branch_prob, 0, centre)
        if total >= cfg.min_length:
            if cfg.thickness == 1:
                return centre
            return ndimage.binary_dilation(centre, structure=disk((cfg.thickness - 1) / 2.0))
    raise ValueError(f"could not place a structure of length >= {cfg.min_length} on {cfg.canvas}")


# Zhang-Suen neighbour order: P2 (north) clockwise to P9 (north-west).
_NEIGHBOURS = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _zs_neighbours(img: np.ndarray) -> list[np.ndarray]:
    p = np.pad(img, 1)
    h, w = img.shape
    return [p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] for dr, dc in _NEIGHBOURS]


def _zs_pass(img: np.ndarray) -> None:
    while True:
        changed = False
        for first in (True, False):
            n = _zs_neighbours(img)
            p2, p3, p4, p5, p6, p7, p8, p9 = n
            b = sum(n)
            seq = n + [p2]
            a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.uint8) for i in range(8))
            if first:
                c1 = (p2 * p4 * p6) == 0
                c2 = (p4 * p6 * p8) == 0
            else:
                c1 = (p2 * p4 * p8) == 0
                c2 = (p2 * p6 * p8) == 0
            delete = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if delete.any():
                img[delete] = 0
                changed = True
        if not changed:
            return


def _is_simple(img: np.ndarray, r: int, c: int) -> bool:
    """True if removing (r, c) keeps its foreground neighbours 8-connected to each other."""
    h, w = img.shape
    ring = [(r + dr, c + dc) for dr, dc in _NEIGHBOURS
            if 0 <= r + dr < h and 0 <= c + dc < w and img[r + dr, c + dc]]
    if len(ring) < 2:
        return False
    seen = {ring[0]}
    stack = [ring[0]]
    members = set(ring)
    while stack:
        pr, pc = stack.pop()
        for q in members:
            if q not in seen and max(abs(q[0] - pr), abs(q[1] - pc)) == 1:
                seen.add(q)
                stack.append(q)
    return len(seen) == len(members)


def _break_blocks(img: np.ndarray) -> bool:
    removed = False
    blocks = img[:-1, :-1] & img[1:, :-1] & img[:-1, 1:] & img[1:, 1:]
    for r, c in zip(*np.nonzero(blocks)):
        if not (img[r, c] and img[r + 1, c] and img[r, c + 1] and img[r + 1, c + 1]):
            continue
        for pr, pc in ((r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)):
            if _is_simple(img, pr, pc):
                img[pr, pc] = 0
                removed = True
                break
    return removed


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning to a one-pixel-wide skeleton.

    Plain Zhang-Suen can leave isolated 2x2 blocks; those are broken by deleting one
    connectivity-preserving corner, and thinning repeats until nothing changes.
    """
    img = as_mask(mask).astype(np.uint8)
    while True:
        _zs_pass(img)
        if not _break_blocks(img):
            return img.astype(bool)


@dataclass(frozen=True)
class Dilate:
    radius: int


@dataclass(frozen=True)
class Rotate:
    angle: float


@dataclass(frozen=True)
class Noise:
    p: float
    seed: int


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilation with a (2r+1) x (2r+1) square."""
    mask = as_mask(mask)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    return ndimage.maximum_filter(mask, size=2 * radius + 1, mode="constant", cval=False)


def rotate(mask: np.ndarray, angle: float) -> np.ndarray:
    """Clockwise rotation on the same canvas.

    Multiples of 90 deg are exact (pixel (r, c) -> (c, H-1-r) for 90 deg); other angles use
    nearest-neighbour inverse mapping about the canvas centre.
    """
    mask = as_mask(mask)
    quarter = angle / 90.0
    if float(quarter).is_integer():
        return np.rot90(mask, k=-int(quarter) % 4).copy()
    h, w = mask.shape
    theta = math.radians(angle)
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc_ = np.mgrid[0:h, 0:w].astype(np.float64)
    dr, dc = rr - cr, cc_ - cc
    # inverse of the clockwise rotation
    src_r = cr + dr * math.cos(theta) - dc * math.sin(theta)
    src_c = cc + dr * math.sin(theta) + dc * math.cos(theta)
    ir, ic = np.rint(src_r).astype(int), np.rint(src_c).astype(int)
    ok = (ir >= 0) & (ir < h) & (ic >= 0) & (ic < w)
    out = np.zeros_like(mask)
    out[ok] = mask[ir[ok], ic[ok]]
    return out


def add_noise(mask: np.ndarray, p: float, seed: int) -> np.ndarray:
    mask = as_mask(mask)
    if not 0.0 <= p <= 1.0:
        raise ValueError("noise probability must lie in [0, 1]")
    flips = np.random.default_rng(seed).random(mask.shape) < p
    return mask ^ flips


def augment(mask: np.ndarray, ops: Sequence[Union[Dilate, Rotate, Noise]]) -> np.ndarray:
    out = as_mask(mask)
    for op in ops:
        if isinstance(op, Dilate):
            out = dilate(out, op.radius)
        elif isinstance(op, Rotate):
            out = rotate(out, op.angle)
        elif isinstance(op, Noise):
            out = add_noise(out, op.p, op.seed)
        else:
            raise TypeError(f"unknown augmentation {op!r}")
    return out


SPLITS = ("train", "val", "test")


def list_split(root: PathLike, split: str) -> list[Path]:
    """PNG files of one dataset split, sorted lexicographically."""
    return sorted(Path(root, split).glob("*.png"))


def load_split(root: PathLike, split: str) -> list[np.ndarray]:
    return [load_mask(p) for p in list_split(root, split)]
