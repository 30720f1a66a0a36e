"""Non-overlapping patch decomposition, re-composition and binarization of probability maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mask_data import as_mask


@dataclass(frozen=True)
class PatchLayout:
    parent_shape: tuple[int, int]
    padded_shape: tuple[int, int]
    patch_size: int
    grid: tuple[int, int]

    @classmethod
    def for_shape(cls, shape: tuple[int, int], patch_size: int = 256) -> "PatchLayout":
        if patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        h, w = int(shape[0]), int(shape[1])
        rows, cols = -(-h // patch_size), -(-w // patch_size)
        return cls((h, w), (rows * patch_size, cols * patch_size), patch_size, (rows, cols))

    @property
    def count(self) -> int:
        return self.grid[0] * self.grid[1]

    def origin(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.count:
            raise IndexError(f"patch index {index} out of range [0, {self.count})")
        r, c = divmod(index, self.grid[1])
        return r * self.patch_size, c * self.patch_size

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [self.origin(i) for i in range(self.count)]


def pad_to_layout(image: np.ndarray, layout: PatchLayout) -> np.ndarray:
    h, w = layout.parent_shape
    ph, pw = layout.padded_shape
    return np.pad(image, ((0, ph - h), (0, pw - w)))


def extract_patches(mask: np.ndarray, patch_size: int = 256) -> tuple[list[np.ndarray], PatchLayout]:
    """Zero-pad bottom/right to a multiple of ``patch_size`` and cut row-major tiles."""
    layout = PatchLayout.for_shape(np.shape(mask), patch_size)
    padded = pad_to_layout(np.asarray(mask), layout)
    s = patch_size
    patches = [padded[r:r + s, c:c + s].copy() for r, c in layout.origins]
    return patches, layout


def _check_patches(patches: Sequence[np.ndarray], expected: int, layout: PatchLayout):
    if len(patches) != expected:
        raise ValueError(f"expected {expected} patches, got {len(patches)}")
    s = layout.patch_size
    for i, p in enumerate(patches):
        if np.shape(p) != (s, s):
            raise ValueError(f"patch {i} has shape {np.shape(p)}, expected ({s}, {s})")


def recompose(patches: Sequence[np.ndarray], layout: PatchLayout) -> np.ndarray:
    """Place tiles back on the padded canvas and crop to the parent shape."""
    _check_patches(patches, layout.count, layout)
    dtype = np.result_type(*[np.asarray(p).dtype for p in patches])
    canvas = np.zeros(layout.padded_shape, dtype=dtype)
    s = layout.patch_size
    for (r, c), p in zip(layout.origins, patches):
        canvas[r:r + s, c:c + s] = p
    h, w = layout.parent_shape
    return canvas[:h, :w]


def partial_recompose(base: np.ndarray, patches: Sequence[np.ndarray], indices: Sequence[int],
                      layout: PatchLayout) -> np.ndarray:
    """Copy of ``base`` with the rectangles of ``indices`` replaced by ``patches``."""
    if np.shape(base) != layout.parent_shape:
        raise ValueError(f"base shape {np.shape(base)} does not match layout {layout.parent_shape}")
    _check_patches(patches, len(indices), layout)
    canvas = pad_to_layout(np.asarray(base), layout).copy()
    s = layout.patch_size
    for idx, p in zip(indices, patches):
        r, c = layout.origin(int(idx))
        canvas[r:r + s, c:c + s] = p
    h, w = layout.parent_shape
    return canvas[:h, :w]


def foreground_channel(prob) -> np.ndarray:
    """Foreground probability from a 2-channel map ``(2, H, W)`` / ``(B, 2, H, W)`` or a plain map."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim == 3 and prob.shape[0] == 2:
        return prob[1]
    if prob.ndim == 4 and prob.shape[1] == 2:
        return prob[:, 1]
    return prob


def bernoulli_binarize(prob, rng: np.random.Generator) -> np.ndarray:
    """Sample each pixel independently as foreground with its predicted probability."""
    p = foreground_channel(prob)
    if p.size and (p.min() < -1e-6 or p.max() > 1 + 1e-6):
        raise ValueError(f"probabilities outside [0, 1]: range [{p.min()}, {p.max()}]")
    return rng.random(p.shape) < p


def threshold_binarize(prob, t: float = 0.5) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return foreground_channel(prob) >= t


def split_image(mask: np.ndarray, patch_size: int) -> tuple[np.ndarray, PatchLayout]:
    """``extract_patches`` stacked into one ``(N, s, s)`` array."""
    patches, layout = extract_patches(as_mask(mask), patch_size)
    return np.stack(patches), layout
