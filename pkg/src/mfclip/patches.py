"""Richest-patch selection by GLCM homogeneity.

Images are tiled into non-overlapping p x p patches; each patch is scored by
the homogeneity of its gray-level co-occurrence matrix and the patch with the
lowest score (largest texture diversity) wins.  GLCM parameters follow the
textbook defaults: 8 gray levels, offsets (0,1) and (1,0), symmetric counting,
per-offset normalization, scores averaged over offsets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_LEVELS = 8
DEFAULT_OFFSETS = ((0, 1), (1, 0))


@dataclass
class PatchGrid:
    """Row-major grid of disjoint patches exactly tiling the image."""

    patches: np.ndarray  # (n, 3, p, p)
    coords: list[tuple[int, int]]  # pixel origins, row-major
    p: int


@dataclass
class RichestPatch:
    pixels: np.ndarray  # (3, p, p)
    homogeneity: float
    coords: tuple[int, int]
    index: int


def split_patches(pixels: np.ndarray, p: int) -> PatchGrid:
    """Tile a CHW image into (H/p)*(W/p) patches of size p."""
    c, h, w = pixels.shape
    if h % p != 0 or w % p != 0:
        raise ValueError(f"patch size {p} does not divide image size {h}x{w}")
    rows, cols = h // p, w // p
    grid = pixels.reshape(c, rows, p, cols, p)
    patches = grid.transpose(1, 3, 0, 2, 4).reshape(rows * cols, c, p, p)
    coords = [(r * p, col * p) for r in range(rows) for col in range(cols)]
    return PatchGrid(np.ascontiguousarray(patches), coords, p)


def assemble_patches(grid: PatchGrid, image_size: int) -> np.ndarray:
    """Inverse of split_patches for a square image."""
    n, c, p, _ = grid.patches.shape
    rows = image_size // p
    stacked = grid.patches.reshape(rows, rows, c, p, p)
    return stacked.transpose(2, 0, 3, 1, 4).reshape(c, image_size, image_size)


def to_gray(pixels: np.ndarray) -> np.ndarray:
    """Rec.601 luminance of a CHW image in [0, 1]."""
    r, g, b = GRAY_WEIGHTS
    return r * pixels[0] + g * pixels[1] + b * pixels[2]


def quantize_gray(gray: np.ndarray, levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Uniform quantization of [0, 1] gray values to integer levels."""
    q = np.floor(gray * levels).astype(np.int64)
    return np.minimum(q, levels - 1)


def glcm_counts(
    level_img: np.ndarray, offset: tuple[int, int], levels: int
) -> np.ndarray:
    """Symmetric integer co-occurrence counts for one offset."""
    dr, dc = offset
    h, w = level_img.shape
    a = level_img[: h - dr, : w - dc]
    b = level_img[dr:, dc:]
    codes = (a * levels + b).ravel()
    counts = np.bincount(codes, minlength=levels * levels).reshape(levels, levels)
    return counts + counts.T


def homogeneity_weights(levels: int) -> np.ndarray:
    idx = np.arange(levels)
    return 1.0 / (1.0 + np.abs(idx[:, None] - idx[None, :]))


def glcm_homogeneity(
    patch: np.ndarray,
    levels: int = DEFAULT_LEVELS,
    offsets: Sequence[tuple[int, int]] = DEFAULT_OFFSETS,
) -> float:
    """Mean over offsets of sum_ij P(i,j) / (1 + |i-j|); always in (0, 1]."""
    lv = quantize_gray(to_gray(patch), levels)
    weights = homogeneity_weights(levels)
    scores = []
    for off in offsets:
        counts = glcm_counts(lv, off, levels)
        total = counts.sum()
        scores.append(float((counts * weights).sum() / total))
    return float(np.mean(scores))


def patch_scores(
    pixels: np.ndarray,
    p: int,
    levels: int = DEFAULT_LEVELS,
    offsets: Sequence[tuple[int, int]] = DEFAULT_OFFSETS,
) -> tuple[PatchGrid, np.ndarray]:
    grid = split_patches(pixels, p)
    scores = np.array(
        [glcm_homogeneity(patch, levels, offsets) for patch in grid.patches]
    )
    return grid, scores


def select_richest(
    pixels: np.ndarray,
    p: int,
    levels: int = DEFAULT_LEVELS,
    offsets: Sequence[tuple[int, int]] = DEFAULT_OFFSETS,
) -> RichestPatch:
    """Patch with minimal homogeneity; ties go to the lowest row-major index."""
    grid, scores = patch_scores(pixels, p, levels, offsets)
    index = int(np.argmin(scores))
    return RichestPatch(
        pixels=grid.patches[index],
        homogeneity=float(scores[index]),
        coords=grid.coords[index],
        index=index,
    )


def select_richest_batch(
    images: np.ndarray,
    p: int,
    levels: int = DEFAULT_LEVELS,
    offsets: Sequence[tuple[int, int]] = DEFAULT_OFFSETS,
) -> np.ndarray:
    """Richest patches for a b x 3 x H x W batch, stacked to b x 3 x p x p."""
    return np.stack(
        [select_richest(img, p, levels, offsets).pixels for img in images]
    )
