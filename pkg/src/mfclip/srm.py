"""Fixed SRM high-pass residual extraction.

The bank holds the three residual filters common across forensics pipelines:
a first-order 3x3 edge residual (x1/2), a second-order 3x3 Laplacian-type
residual (x1/4), and the 5x5 "KV" predictor residual (x1/12).  Filters are
applied to the 8-bit-scale RGB mean with reflect padding, one output channel
per filter, and the result is truncated to [-q, q] with q = 2.
"""

from __future__ import annotations

import numpy as np

TRUNCATION = 2.0

_FIRST_ORDER = np.array(
    [
        [0, 0, 0],
        [0, -1, 1],
        [0, 0, 0],
    ],
    dtype=np.float64,
)

_SECOND_ORDER = np.array(
    [
        [-1, 2, -1],
        [2, -4, 2],
        [-1, 2, -1],
    ],
    dtype=np.float64,
)

_KV = np.array(
    [
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, -12, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ],
    dtype=np.float64,
)

# (name, kernel, normalizer); kernels all sum to zero.
SRM_BANK = (
    ("first_order", _FIRST_ORDER, 0.5),
    ("second_order", _SECOND_ORDER, 0.25),
    ("kv", _KV, 1.0 / 12.0),
)


def srm_kernels() -> list[np.ndarray]:
    """Normalizer-scaled kernels, in bank order."""
    return [kernel * norm for _, kernel, norm in SRM_BANK]


def _correlate_reflect(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Cross-correlation with reflect padding, same output size."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(image, ((ph, ph), (pw, pw)), mode="reflect")
    out = np.zeros_like(image, dtype=np.float64)
    h, w = image.shape
    for u in range(kh):
        for v in range(kw):
            coeff = kernel[u, v]
            if coeff != 0.0:
                out += coeff * padded[u : u + h, v : v + w]
    return out


def srm_extract(patch: np.ndarray, q: float = TRUNCATION) -> np.ndarray:
    """Noise residual of a 3 x p x p patch with pixel values in [0, 1].

    The patch is collapsed to its RGB mean on the 0..255 scale before
    filtering; each bank filter contributes one output channel.
    """
    if patch.ndim != 3 or patch.shape[0] != 3:
        raise ValueError(f"expected a 3xHxW patch, got shape {patch.shape}")
    gray = patch.astype(np.float64).mean(axis=0) * 255.0
    channels = [
        np.clip(_correlate_reflect(gray, k), -q, q) for k in srm_kernels()
    ]
    return np.stack(channels)


def srm_extract_batch(patches: np.ndarray, q: float = TRUNCATION) -> np.ndarray:
    """Residuals for a b x 3 x p x p batch."""
    return np.stack([srm_extract(patch, q) for patch in patches])
