import numpy as np
import pytest
import torch
from PIL import Image

from mfclip.data import DatasetManifest, HierLabel, fake_label, REAL_LABEL
from mfclip.ftg import Vocabulary


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.build()


@pytest.fixture(scope="session")
def tiny_png(tmp_path_factory):
    """A small decodable image, reusable across manifest entries."""
    rng = np.random.default_rng(7)
    path = tmp_path_factory.mktemp("img") / "tiny.png"
    arr = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)
    return str(path)


def write_manifest(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")
    return str(path)


def manifest_of_size(tiny_png, tmp_path, n, name="m.tsv", alternate=True):
    """n entries alternating real/fake, all pointing at the same tiny image."""
    rows = []
    for i in range(n):
        if alternate and i % 2 == 0:
            rows.append([tiny_png, "real", "-", "-", "-"])
        else:
            rows.append([tiny_png, "fake", "FS", "diffusion", "DiffFace"])
    return write_manifest(tmp_path / name, rows)


@pytest.fixture
def label_examples():
    return [
        REAL_LABEL,
        fake_label("DiffFace"),
        fake_label("IAFaces"),
        HierLabel("fake"),
        HierLabel("fake", "EFS"),
        HierLabel("fake", "AM", "GAN"),
    ]


def seeded_images(n, seed=0, size=224):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3, size, size))


@pytest.fixture(autouse=True)
def _torch_default_seed():
    torch.manual_seed(1234)
