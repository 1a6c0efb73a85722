import numpy as np
import pytest
import torch

from mfclip.ftg import Vocabulary
from mfclip.model import ModelConfig, build_model
from mfclip.nn import zero_output_projections_
from mfclip.vision import (
    NE_STAGES,
    ImageEncoder,
    NoiseBackbone,
    NoiseEncoder,
    VisionEncoder,
    conv_out_size,
)

from conftest import seeded_images


def toy_model(vocab, **overrides):
    cfg = dict(
        d=16,
        p=112,
        not_blocks=1,
        fle_blocks=1,
        heads=2,
        ie_blocks=1,
        ie_stem=(4, 8, 8, 8),
        ne_stem=(4, 8, 8, 8),
        batch_size=3,
    )
    cfg.update(overrides)
    return build_model(ModelConfig(**cfg), vocab, seed=0)


# --- image encoder ---------------------------------------------------------------


def test_ie_paper_scale_shape():
    torch.manual_seed(0)
    ie = ImageEncoder(512, blocks=6, heads=8)
    with torch.no_grad():
        out = ie(torch.randn(24, 3, 224, 224))
    assert out.shape == (24, 512)


def test_ie_identical_images_identical_rows():
    torch.manual_seed(1)
    ie = ImageEncoder(16, blocks=1, heads=2, stem_channels=(4, 8, 8, 8)).double()
    img = torch.randn(1, 3, 224, 224, dtype=torch.float64)
    batch = torch.cat([img, img], dim=0)
    with torch.no_grad():
        out = ie(batch)
    assert torch.equal(out[0], out[1])


def test_ie_batch_permutation_equivariance():
    torch.manual_seed(2)
    ie = ImageEncoder(16, blocks=1, heads=2, stem_channels=(4, 8, 8, 8)).double()
    batch = torch.randn(4, 3, 224, 224, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        out = ie(batch)
        out_perm = ie(batch[perm])
    assert torch.allclose(out[perm], out_perm, atol=1e-12)


# --- noise backbone / encoder -------------------------------------------------------


def test_ne_backbone_paper_shape():
    torch.manual_seed(0)
    ne = NoiseBackbone(channels=(16, 32, 64, 64))
    with torch.no_grad():
        out = ne(torch.randn(24, 3, 112, 112))
    assert out.shape == (24, 64, 8, 8)


def test_ne_backbone_zero_input_batch_constant():
    torch.manual_seed(3)
    ne = NoiseBackbone(channels=(4, 8, 8, 8)).double()
    with torch.no_grad():
        out = ne(torch.zeros(5, 3, 112, 112, dtype=torch.float64))
        single = ne(torch.zeros(1, 3, 112, 112, dtype=torch.float64))
    assert torch.equal(out, single.expand_as(out))


def test_ne_backbone_spatial_matches_stride_arithmetic():
    for p in (16, 28, 32, 56, 112, 224):
        expected = p
        for k, s, pad in NE_STAGES:
            expected = conv_out_size(expected, k, s, pad)
        assert NoiseBackbone.out_spatial(p) == expected
        torch.manual_seed(0)
        ne = NoiseBackbone(channels=(2, 2, 2, 2))
        with torch.no_grad():
            out = ne(torch.randn(1, 3, p, p))
        assert out.shape[-2:] == (expected, expected)


def test_ne_tokenize_projection_arithmetic():
    torch.manual_seed(0)
    ne = NoiseEncoder(512, p=112, blocks=3, heads=8, stem_channels=(16, 32, 64, 64))
    assert ne.proj.in_features == 64 * 8 * 8 == 4096
    with torch.no_grad():
        tokens = ne.tokenize(torch.randn(24, 64, 8, 8))
    assert tokens.shape == (24, 2, 512)


def test_ne_class_token_shared_across_batch():
    torch.manual_seed(4)
    ne = NoiseEncoder(16, p=112, blocks=1, heads=2, stem_channels=(4, 8, 8, 8)).double()
    with torch.no_grad():
        tokens = ne.tokenize(torch.randn(6, 8, 8, 8, dtype=torch.float64))
        pre_position = tokens - ne.pos
    cls_rows = pre_position[:, 1, :]
    assert torch.allclose(cls_rows, cls_rows[0].expand_as(cls_rows), atol=1e-12)


def test_ne_tokenize_zero_weights_degenerate():
    torch.manual_seed(5)
    ne = NoiseEncoder(16, p=112, blocks=1, heads=2, stem_channels=(4, 8, 8, 8)).double()
    with torch.no_grad():
        ne.proj.weight.zero_()
        tokens = ne.tokenize(torch.randn(3, 8, 8, 8, dtype=torch.float64))
        expected = ne.proj.bias + ne.pos[0, 0]
    assert torch.allclose(tokens[:, 0, :], expected.expand(3, -1), atol=1e-12)


def test_not_forward_paper_shape():
    torch.manual_seed(0)
    ne = NoiseEncoder(512, p=112, blocks=3, heads=8, stem_channels=(16, 32, 64, 64))
    with torch.no_grad():
        out = ne(torch.randn(24, 3, 112, 112))
    assert out.shape == (24, 512)


def test_not_identity_blocks_reads_class_row():
    torch.manual_seed(6)
    ne = NoiseEncoder(16, p=112, blocks=3, heads=2, stem_channels=(4, 8, 8, 8)).double()
    for block in ne.blocks:
        zero_output_projections_(block)
    with torch.no_grad():
        tokens = ne.tokenize(torch.randn(4, 8, 8, 8, dtype=torch.float64))
        out = ne.transform(tokens)
    assert torch.equal(out, tokens[:, 1, :])


def test_not_single_block_matches_manual_composition():
    torch.manual_seed(7)
    ne = NoiseEncoder(16, p=112, blocks=1, heads=2, stem_channels=(4, 8, 8, 8)).double()
    tokens = torch.randn(2, 2, 16, dtype=torch.float64)
    with torch.no_grad():
        manual = ne.blocks[0](tokens)[:, 1, :]
        assert torch.equal(ne.transform(tokens), manual)


# --- fused vision path ----------------------------------------------------------------


def test_mve_fusion_is_exact_addition(vocab):
    model = toy_model(vocab).double()
    images = torch.from_numpy(seeded_images(3, seed=12)).double()
    with torch.no_grad():
        out = model.mve(images)
    assert torch.equal(out["X_v"], out["X_i"] + out["N_n"])
    residual = out["X_v"] - out["X_i"] - out["N_n"]
    assert residual.abs().max().item() < 1e-15  # re-subtraction rounding only


def test_mve_zeroed_ne_projection_gives_batch_constant_offset(vocab):
    model = toy_model(vocab).double()
    ne = model.mve.ne
    with torch.no_grad():
        ne.proj.weight.zero_()
    images = torch.from_numpy(seeded_images(4, seed=13)).double()
    with torch.no_grad():
        out = model.mve(images)
    offset = out["X_v"] - out["X_i"]
    assert torch.allclose(offset, offset[0].expand_as(offset), atol=1e-12)


def test_mve_toy_shape_audit(vocab):
    model = toy_model(vocab, d=64)
    images = torch.from_numpy(seeded_images(2, seed=14)).float()
    with torch.no_grad():
        out = model.mve(images)
    assert out["X_v"].shape == (2, 64)
    assert out["X_i"].shape == (2, 64)
    assert out["N_n"].shape == (2, 64)


def test_mve_noise_path_blocks_gradient_to_pixels(vocab):
    model = toy_model(vocab, use_ie=False).double()
    images = torch.from_numpy(seeded_images(2, seed=15)).double()
    images.requires_grad_(True)
    out = model.mve(images)
    out["X_v"].sum().backward()
    assert images.grad is None  # pixels never enter the autograd graph
    conv_grad = model.mve.ne.backbone.net[0].weight.grad
    assert conv_grad is not None and conv_grad.abs().sum() > 0


def test_mve_per_sample_independence(vocab):
    model = toy_model(vocab).double()
    images = seeded_images(3, seed=16)
    edited = images.copy()
    edited[1] = np.random.default_rng(99).random(edited[1].shape)
    with torch.no_grad():
        out1 = model.mve(torch.from_numpy(images).double())
        out2 = model.mve(torch.from_numpy(edited).double())
    assert torch.equal(out1["X_v"][0], out2["X_v"][0])
    assert torch.equal(out1["X_v"][2], out2["X_v"][2])
    assert not torch.equal(out1["X_v"][1], out2["X_v"][1])


def test_mve_requires_a_branch():
    with pytest.raises(ValueError):
        VisionEncoder(16, p=112, ie=None, ne=None)


def test_mve_normalization_stats_applied(vocab):
    model = toy_model(vocab, use_ne=False).double()
    images = torch.from_numpy(seeded_images(2, seed=17)).double()
    with torch.no_grad():
        base = model.mve(images)["X_v"]
        model.mve.set_normalization([0.1, 0.2, 0.3], [0.5, 0.5, 0.5])
        shifted = model.mve(images)["X_v"]
    assert not torch.equal(base, shifted)
