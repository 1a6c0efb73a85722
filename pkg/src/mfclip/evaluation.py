"""Metrics, image perturbations, and the protocol/robustness runner.

AUC is the tie-adjusted Mann-Whitney rank statistic.  The perturbation suite
covers seven corruption kinds, each with five severity levels plus level 0,
which is bit-exactly the identity for every kind.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .data import DatasetManifest, batch_iterator

BLOCK_SIZE = 16

PERTURBATION_LEVELS: dict[str, tuple] = {
    "saturation": (1.0, 0.8, 0.6, 0.4, 0.2, 0.0),
    "contrast": (1.0, 0.85, 0.7, 0.55, 0.4, 0.25),
    "block": (0, 2, 4, 6, 8, 10),
    "gaussian_noise": (0.0, 0.01, 0.02, 0.05, 0.1, 0.15),
    "blur": (1, 3, 5, 7, 9, 11),
    "pixelation": (1, 2, 4, 8, 16, 32),
    "compression": (100, 90, 70, 50, 30, 10),
}
PERTURBATION_KINDS = tuple(PERTURBATION_LEVELS)
N_LEVELS = 6  # identity level 0 plus five severities


class MetricError(ValueError):
    pass


@dataclass
class ScoreSet:
    """Per-sample fake probabilities and binary labels (1 = fake)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape:
            raise MetricError("scores and labels must have equal length")


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    level: int

    def __post_init__(self):
        if self.kind not in PERTURBATION_LEVELS:
            raise ValueError(f"unknown perturbation {self.kind!r}")
        if not 0 <= self.level < N_LEVELS:
            raise ValueError(f"level must be in 0..{N_LEVELS - 1}")


def accuracy(s: ScoreSet, threshold: float = 0.5) -> float:
    if len(s.scores) == 0:
        raise MetricError("empty score set")
    preds = (s.scores >= threshold).astype(int)
    return float((preds == s.labels).mean())


def auc(s: ScoreSet) -> float:
    """Mann-Whitney AUC with midrank tie handling."""
    labels = np.asarray(s.labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    order = np.argsort(s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    ranks = np.empty(len(labels), dtype=np.float64)
    i = 0
    while i < len(labels):
        j = i
        while j + 1 < len(labels) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --- perturbations -----------------------------------------------------------


def _luminance(pixels: np.ndarray) -> np.ndarray:
    return 0.299 * pixels[0] + 0.587 * pixels[1] + 0.114 * pixels[2]


def _box_blur(pixels: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    out = np.zeros_like(pixels)
    padded = np.pad(pixels, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    h, w = pixels.shape[1:]
    for dr in range(k):
        for dc in range(k):
            out += padded[:, dr : dr + h, dc : dc + w]
    return out / (k * k)


def _pixelate(pixels: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = pixels.shape
    hb, wb = h // factor, w // factor
    blocks = pixels.reshape(c, hb, factor, wb, factor).mean(axis=(2, 4))
    return np.repeat(np.repeat(blocks, factor, axis=1), factor, axis=2)


def _jpeg_roundtrip(pixels: np.ndarray, quality: int) -> np.ndarray:
    img8 = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img8.transpose(1, 2, 0)).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    decoded = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return decoded.transpose(2, 0, 1)


def apply_perturbation(
    pixels: np.ndarray, spec: PerturbSpec, seed: int = 0
) -> np.ndarray:
    """Corrupt a CHW float image in [0, 1]; level 0 returns it untouched."""
    if spec.level == 0:
        return pixels.copy()
    value = PERTURBATION_LEVELS[spec.kind][spec.level]
    rng = np.random.default_rng(seed)
    px = pixels.astype(np.float64)
    if spec.kind == "saturation":
        gray = _luminance(px)
        out = gray[None] + value * (px - gray[None])
    elif spec.kind == "contrast":
        mean = _luminance(px).mean()
        out = mean + value * (px - mean)
    elif spec.kind == "block":
        out = px.copy()
        h, w = px.shape[1:]
        for _ in range(value):
            r = int(rng.integers(0, h - BLOCK_SIZE + 1))
            c = int(rng.integers(0, w - BLOCK_SIZE + 1))
            out[:, r : r + BLOCK_SIZE, c : c + BLOCK_SIZE] = 0.5
    elif spec.kind == "gaussian_noise":
        out = px + rng.normal(0.0, value, size=px.shape)
    elif spec.kind == "blur":
        out = _box_blur(px, value)
    elif spec.kind == "pixelation":
        out = _pixelate(px, value)
    elif spec.kind == "compression":
        out = _jpeg_roundtrip(px, value)
    else:  # unreachable; PerturbSpec validates
        raise AssertionError(spec.kind)
    return np.clip(out, 0.0, 1.0).astype(pixels.dtype)


# --- protocol runner ---------------------------------------------------------


def score_manifest(
    model,
    manifest: DatasetManifest,
    batch_size: int = 32,
    seed: int = 0,
    perturb: PerturbSpec | None = None,
    perturb_seed: int = 0,
) -> ScoreSet:
    """Run vision-only inference over a manifest and collect fake scores."""
    import torch

    from .data import FAKE_INDEX

    scores, labels = [], []
    for samples, _ in batch_iterator(
        manifest, batch_size, seed=seed, train=False
    ):
        pixels = np.stack([s.pixels for s in samples])
        if perturb is not None:
            pixels = np.stack(
                [
                    apply_perturbation(
                        p,
                        perturb,
                        seed=_sample_seed(perturb_seed, s.source_id, perturb),
                    )
                    for p, s in zip(pixels, samples)
                ]
            )
        dtype = next(model.parameters()).dtype
        probs = model.infer(torch.from_numpy(pixels).to(dtype))
        scores.extend(probs[:, FAKE_INDEX].tolist())
        labels.extend(int(s.label.is_fake) for s in samples)
    return ScoreSet(np.array(scores), np.array(labels))


def _sample_seed(base: int, source_id: str, spec: PerturbSpec) -> int:
    import zlib

    key = f"{base}|{source_id}|{spec.kind}|{spec.level}".encode()
    return zlib.crc32(key)


def run_protocol(
    model,
    test_manifests: Mapping[str, DatasetManifest],
    batch_size: int = 32,
    threshold: float = 0.5,
) -> list[dict]:
    """Clean ACC/AUC per test set, in the given order.

    Single-class sets report AUC as None (rendered "-" in tables).
    """
    rows = []
    for name, manifest in test_manifests.items():
        scores = score_manifest(model, manifest, batch_size)
        try:
            set_auc = auc(scores)
        except MetricError:
            set_auc = None
        rows.append(
            {
                "test_set": name,
                "n": len(scores.scores),
                "acc": accuracy(scores, threshold),
                "auc": set_auc,
            }
        )
    return rows


def robustness_curves(
    model,
    manifest: DatasetManifest,
    kinds: Sequence[str] = PERTURBATION_KINDS,
    seeds: Iterable[int] = (0,),
    batch_size: int = 32,
) -> dict[str, list[float]]:
    """Per-kind AUC over levels 0..5 (seed-median), plus the kind-mean curve."""
    curves: dict[str, list[float]] = {}
    for kind in kinds:
        per_level = []
        for level in range(N_LEVELS):
            spec = PerturbSpec(kind, level)
            values = [
                auc(
                    score_manifest(
                        model, manifest, batch_size, perturb=spec, perturb_seed=s
                    )
                )
                for s in seeds
            ]
            per_level.append(float(np.median(values)))
        curves[kind] = per_level
    curves["mean"] = [
        float(np.mean([curves[k][lvl] for k in kinds])) for lvl in range(N_LEVELS)
    ]
    return curves


def write_results_tsv(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("test_set\tn\tacc\tauc\n")
        for row in rows:
            auc_s = "-" if row["auc"] is None else repr(row["auc"])
            fh.write(f"{row['test_set']}\t{row['n']}\t{row['acc']!r}\t{auc_s}\n")


def write_curves_tsv(curves: dict[str, list[float]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("kind\t" + "\t".join(f"level{i}" for i in range(N_LEVELS)) + "\n")
        for kind, values in curves.items():
            fh.write(kind + "\t" + "\t".join(repr(v) for v in values) + "\n")


def render_curves_png(curves: dict[str, list[float]], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for kind, values in curves.items():
        style = {"linewidth": 2.5, "color": "black"} if kind == "mean" else {}
        ax.plot(range(len(values)), values, marker="o", label=kind, **style)
    ax.set_xlabel("intensity level")
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
