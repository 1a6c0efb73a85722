"""Label taxonomy, dataset manifests, image ingestion, synthetic data.

A manifest is a UTF-8 text file with one tab-separated record per line:

    path<TAB>authenticity<TAB>forgery_type|-<TAB>family|-<TAB>generator|-

Absent levels are written as "-".  Relative paths are resolved against the
manifest's own directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

IMAGE_SIZE = 224

AUTHENTICITIES = ("real", "fake")
FORGERY_TYPES = ("EFS", "AM", "FS")
FAMILIES = ("diffusion", "GAN")

# generator -> (forgery_type, family)
KNOWN_GENERATORS = {
    "DDPM": ("EFS", "diffusion"),
    "LatDiff": ("EFS", "diffusion"),
    "CollDiff": ("EFS", "diffusion"),
    "DiffFace": ("FS", "diffusion"),
    "Diffae": ("AM", "diffusion"),
    "LatTrans": ("AM", "GAN"),
    "IAFaces": ("AM", "GAN"),
    "FSLSD": ("FS", "GAN"),
    "FaceSwapper": ("FS", "GAN"),
}

# class index layout for one-hot labels: real -> [1, 0], fake -> [0, 1]
REAL_INDEX = 0
FAKE_INDEX = 1


class LabelError(ValueError):
    """A hierarchical label violates the level-nesting rules."""


class ManifestError(ValueError):
    """A manifest file is missing, malformed, or inconsistent."""


class DecodeError(RuntimeError):
    """An image file could not be decoded."""


@dataclass(frozen=True)
class HierLabel:
    """Four-level forgery label: authenticity > forgery type > family > generator.

    Real images carry only the first level.  For fakes, deeper levels may be
    present but must nest: a generator implies a family, a family implies a
    forgery type.
    """

    authenticity: str
    forgery_type: str | None = None
    family: str | None = None
    generator: str | None = None

    def __post_init__(self):
        if self.authenticity not in AUTHENTICITIES:
            raise LabelError(f"unknown authenticity {self.authenticity!r}")
        if self.authenticity == "real":
            if self.forgery_type or self.family or self.generator:
                raise LabelError("real labels must not carry forgery levels")
            return
        if self.forgery_type is not None and self.forgery_type not in FORGERY_TYPES:
            raise LabelError(f"unknown forgery type {self.forgery_type!r}")
        if self.family is not None and self.family not in FAMILIES:
            raise LabelError(f"unknown family {self.family!r}")
        if self.generator is not None and self.family is None:
            raise LabelError(
                f"generator {self.generator!r} given without a family"
            )
        if self.family is not None and self.forgery_type is None:
            raise LabelError(
                f"family {self.family!r} given without a forgery type"
            )

    @property
    def is_fake(self) -> bool:
        return self.authenticity == "fake"

    @property
    def class_index(self) -> int:
        return FAKE_INDEX if self.is_fake else REAL_INDEX


def fake_label(generator: str) -> HierLabel:
    """Full four-level fake label for one of the known generators."""
    ftype, family = KNOWN_GENERATORS[generator]
    return HierLabel("fake", ftype, family, generator)


REAL_LABEL = HierLabel("real")


@dataclass
class OneHotLabel:
    """Two-way one-hot target; exactly one component is 1."""

    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if self.y.shape != (2,) or sorted(self.y.tolist()) != [0, 1]:
            raise LabelError(f"not a 2-way one-hot vector: {self.y}")


def one_hot(label: HierLabel) -> np.ndarray:
    y = np.zeros(2, dtype=np.float64)
    y[label.class_index] = 1.0
    return y


@dataclass
class ImageSample:
    """A decoded RGB image in [0, 1], shaped 3 x 224 x 224."""

    pixels: np.ndarray
    label: HierLabel
    source_id: str

    def __post_init__(self):
        if self.pixels.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"bad image shape {self.pixels.shape}")


@dataclass
class DatasetManifest:
    entries: list[tuple[str, HierLabel]]
    split_tag: str = "train"
    protocol_tag: str = ""
    interp: str = "bilinear"

    def __len__(self) -> int:
        return len(self.entries)

    def class_counts(self) -> tuple[int, int]:
        n_real = sum(1 for _, lab in self.entries if not lab.is_fake)
        return n_real, len(self.entries) - n_real


def _parse_level(raw: str) -> str | None:
    return None if raw == "-" else raw


def parse_manifest_line(line: str, lineno: int, base_dir: str) -> tuple[str, HierLabel]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise ManifestError(
            f"line {lineno}: expected 5 tab-separated fields, got {len(parts)}"
        )
    path, auth, ftype, family, gen = parts
    try:
        label = HierLabel(
            auth, _parse_level(ftype), _parse_level(family), _parse_level(gen)
        )
    except LabelError as exc:
        raise ManifestError(f"line {lineno} ({path}): {exc}") from exc
    if not os.path.isabs(path):
        path = os.path.normpath(os.path.join(base_dir, path))
    return path, label


def load_manifest(
    path: str, split_tag: str = "train", protocol_tag: str = ""
) -> DatasetManifest:
    """Parse and validate a manifest file.

    Raises ManifestError with the offending line number on parse failures,
    label-nesting violations, or missing image files.
    """
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    base_dir = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            img_path, label = parse_manifest_line(line, lineno, base_dir)
            if not os.path.exists(img_path):
                raise ManifestError(f"line {lineno}: image not found: {img_path}")
            entries.append((img_path, label))
    manifest = DatasetManifest(entries, split_tag=split_tag, protocol_tag=protocol_tag)
    if split_tag == "train":
        n_real, n_fake = manifest.class_counts()
        if n_real == 0 or n_fake == 0:
            raise ManifestError(
                f"training manifest needs both classes (real={n_real}, fake={n_fake})"
            )
    return manifest


def _format_level(value: str | None) -> str:
    return value if value is not None else "-"


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for img_path, label in manifest.entries:
            rel = os.path.relpath(img_path, base_dir)
            fh.write(
                "\t".join(
                    [
                        rel,
                        label.authenticity,
                        _format_level(label.forgery_type),
                        _format_level(label.family),
                        _format_level(label.generator),
                    ]
                )
                + "\n"
            )


def load_image(path: str, interp: str = "bilinear") -> np.ndarray:
    """Decode to RGB, resize to 224 x 224, return float32 CHW in [0, 1]."""
    resample = {
        "bilinear": Image.Resampling.BILINEAR,
        "nearest": Image.Resampling.NEAREST,
        "bicubic": Image.Resampling.BICUBIC,
    }[interp]
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (IMAGE_SIZE, IMAGE_SIZE):
                img = img.resize((IMAGE_SIZE, IMAGE_SIZE), resample)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def batch_iterator(
    manifest: DatasetManifest,
    b: int,
    seed: int,
    train: bool = True,
    on_decode_error: str = "abort",
):
    """Yield (samples, one_hot_labels) batches in a seed-deterministic order.

    The final partial batch is dropped when ``train`` is true and kept
    otherwise.  ``on_decode_error`` is "abort" or "skip"; skipped files are
    dropped from the batch (a batch may then come up short).
    """
    if b <= 0:
        raise ValueError("batch size must be positive")
    if len(manifest) == 0:
        raise ManifestError("empty manifest")
    if on_decode_error not in ("abort", "skip"):
        raise ValueError(f"bad on_decode_error {on_decode_error!r}")
    order = np.random.default_rng(seed).permutation(len(manifest))
    n_batches = len(order) // b if train else -(-len(order) // b)
    for k in range(n_batches):
        idx = order[k * b : (k + 1) * b]
        samples = []
        for i in idx:
            path, label = manifest.entries[int(i)]
            try:
                pixels = load_image(path, manifest.interp)
            except DecodeError:
                if on_decode_error == "abort":
                    raise
                continue
            samples.append(ImageSample(pixels, label, source_id=path))
        if not samples:
            continue
        labels = np.stack([one_hot(s.label) for s in samples])
        yield samples, labels


# --- synthetic data ---------------------------------------------------------

QUADRANT = IMAGE_SIZE // 2

GENERATOR_CYCLE = tuple(KNOWN_GENERATORS)


def _smooth_field(rng: np.random.Generator, grid: int = 8) -> np.ndarray:
    """Bilinearly upsampled coarse random field, one channel, 224 x 224."""
    coarse = rng.uniform(0.25, 0.75, size=(grid, grid))
    xs = np.linspace(0.0, grid - 1.0, IMAGE_SIZE)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, grid - 1)
    f = xs - i0
    rows = coarse[i0] * (1.0 - f)[:, None] + coarse[i1] * f[:, None]
    cols = rows[:, i0] * (1.0 - f)[None, :] + rows[:, i1] * f[None, :]
    return cols


def synth_image(
    base_seed: int, p_signal: float, fake: bool
) -> tuple[np.ndarray, tuple[int, int]]:
    """Render one synthetic face stand-in as uint8 HWC.

    The smooth base image depends only on ``base_seed``, so the real and fake
    renderings for the same seed agree bit-exactly outside the signed
    quadrant.  Fakes add a half-checker, half-noise high-frequency signature
    of amplitude ``p_signal`` inside one quadrant; the quadrant origin is
    returned.
    """
    base_rng = np.random.default_rng([base_seed, 0])
    channels = np.stack([_smooth_field(base_rng) for _ in range(3)])
    sig_rng = np.random.default_rng([base_seed, 1])
    quad = int(sig_rng.integers(4))
    origin = (QUADRANT * (quad // 2), QUADRANT * (quad % 2))
    if fake:
        rr, cc = np.meshgrid(
            np.arange(QUADRANT), np.arange(QUADRANT), indexing="ij"
        )
        checker = ((rr + cc) % 2 * 2 - 1).astype(np.float64)
        noise = sig_rng.uniform(-1.0, 1.0, size=(QUADRANT, QUADRANT))
        signature = p_signal * (0.3 * checker + 0.25 * noise)
        r0, c0 = origin
        channels[:, r0 : r0 + QUADRANT, c0 : c0 + QUADRANT] += signature
    img = np.clip(channels, 0.0, 1.0)
    img8 = np.round(img * 255.0).astype(np.uint8)
    return img8.transpose(1, 2, 0), origin


def make_synthetic_dataset(
    n_real: int,
    n_fake: int,
    p_signal: float,
    seed: int,
    out_dir: str,
    split_tag: str = "train",
) -> DatasetManifest:
    """Write a separable toy dataset to ``out_dir`` and return its manifest.

    Fake labels cycle through the known generator taxonomy so every prompt
    level is exercised.  Also writes ``manifest.tsv`` into ``out_dir``.
    """
    if n_real < 1 or n_fake < 1:
        raise ValueError("need at least one sample of each class")
    if not 0.0 <= p_signal <= 1.0:
        raise ValueError("p_signal must be in [0, 1]")
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    entries: list[tuple[str, HierLabel]] = []
    seeds = np.random.SeedSequence(seed).generate_state(n_real + n_fake)
    for k in range(n_real):
        img, _ = synth_image(int(seeds[k]), p_signal, fake=False)
        path = os.path.join(img_dir, f"real_{k:05d}.png")
        Image.fromarray(img).save(path)
        entries.append((path, REAL_LABEL))
    for k in range(n_fake):
        img, _ = synth_image(int(seeds[n_real + k]), p_signal, fake=True)
        path = os.path.join(img_dir, f"fake_{k:05d}.png")
        Image.fromarray(img).save(path)
        entries.append((path, fake_label(GENERATOR_CYCLE[k % len(GENERATOR_CYCLE)])))
    manifest = DatasetManifest(entries, split_tag=split_tag, protocol_tag="synthetic")
    save_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest
