"""Multi-modal vision encoder: image branch, noise branch, additive fusion.

The image branch is a compact conv-ViT: a strided conv stem maps 224 x 224
RGB down to a 14 x 14 feature map whose cells become tokens, a class token is
prepended, learnable position embeddings are added, and a transformer stack
produces the class-token embedding.  The noise branch scores texture-richest
patches, extracts SRM residuals (non-trainable, gradient-blocked), runs a
small conv backbone plus a two-token transformer, and reads its class token.
The two branch embeddings are summed element-wise.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import patches, srm
from .data import IMAGE_SIZE
from .nn import TransformerBlock, init_linear, trunc_normal_

DEFAULT_IE_STEM = (32, 64, 128, 256)
DEFAULT_NE_STEM = (16, 32, 64, 64)
# kernel/stride/padding per noise-backbone stage; the final pad of 2 lands a
# 112-pixel patch on an 8 x 8 map (112 -> 56 -> 28 -> 14 -> 8)
NE_STAGES = ((3, 2, 1), (3, 2, 1), (3, 2, 1), (3, 2, 2))


def conv_out_size(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


class ImageEncoder(nn.Module):
    """Conv-ViT over full images; returns the class-token embedding."""

    def __init__(
        self,
        d: int,
        blocks: int = 6,
        heads: int = 8,
        stem_channels: tuple[int, ...] = DEFAULT_IE_STEM,
        mlp_ratio: int = 4,
        image_size: int = IMAGE_SIZE,
    ):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        size = image_size
        for out_ch in stem_channels:
            layers += [nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), nn.ReLU()]
            in_ch = out_ch
            size = conv_out_size(size, 3, 2, 1)
        self.stem = nn.Sequential(*layers)
        self.grid = size
        self.proj = nn.Linear(in_ch, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(torch.zeros(1, size * size + 1, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, heads, mlp_ratio) for _ in range(blocks)
        )
        init_linear(self)
        trunc_normal_(self.cls_token)
        trunc_normal_(self.pos)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        feat = self.stem(x)
        tokens = feat.flatten(2).transpose(1, 2)  # b x (grid*grid) x c
        tokens = self.proj(tokens)
        cls = self.cls_token.expand(b, -1, -1)
        seq = torch.cat([cls, tokens], dim=1) + self.pos
        for block in self.blocks:
            seq = block(seq)
        return seq[:, 0]


class NoiseBackbone(nn.Module):
    """Strided conv stack mapping residual patches to a local feature map."""

    def __init__(self, channels: tuple[int, ...] = DEFAULT_NE_STEM):
        super().__init__()
        if len(channels) != len(NE_STAGES):
            raise ValueError(f"need {len(NE_STAGES)} stage widths, got {channels}")
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch, (k, s, pad) in zip(channels, NE_STAGES):
            layers += [nn.Conv2d(in_ch, out_ch, k, stride=s, padding=pad), nn.ReLU()]
            in_ch = out_ch
        self.net = nn.Sequential(*layers)
        self.out_channels = in_ch
        init_linear(self)

    @staticmethod
    def out_spatial(p: int) -> int:
        size = p
        for k, s, pad in NE_STAGES:
            size = conv_out_size(size, k, s, pad)
            if size < 1:
                raise ValueError(
                    f"patch size {p} collapses below 1 px in the noise stem; "
                    f"supported sizes keep every stage >= 1"
                )
        return size

    def forward(self, noise: torch.Tensor) -> torch.Tensor:
        return self.net(noise)


class NoiseEncoder(nn.Module):
    """Backbone + flatten-project + class token + transformer over 2 tokens."""

    def __init__(
        self,
        d: int,
        p: int,
        blocks: int = 3,
        heads: int = 8,
        stem_channels: tuple[int, ...] = DEFAULT_NE_STEM,
        mlp_ratio: int = 4,
    ):
        super().__init__()
        self.backbone = NoiseBackbone(stem_channels)
        hw = NoiseBackbone.out_spatial(p)
        self.local_shape = (self.backbone.out_channels, hw, hw)
        flat = self.backbone.out_channels * hw * hw
        self.proj = nn.Linear(flat, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(torch.zeros(1, 2, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, heads, mlp_ratio) for _ in range(blocks)
        )
        init_linear(self)
        trunc_normal_(self.cls_token)
        trunc_normal_(self.pos)

    def tokenize(self, n_loc: torch.Tensor) -> torch.Tensor:
        """Flattened projection token plus class token, position-embedded."""
        b = n_loc.shape[0]
        flat = n_loc.reshape(b, -1)
        map_token = self.proj(flat).unsqueeze(1)
        cls = self.cls_token.expand(b, -1, -1)
        return torch.cat([map_token, cls], dim=1) + self.pos

    def transform(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run the noise-transformer stack; the class token is the output."""
        for block in self.blocks:
            tokens = block(tokens)
        return tokens[:, 1]

    def forward(self, noise: torch.Tensor) -> torch.Tensor:
        return self.transform(self.tokenize(self.backbone(noise)))


class VisionEncoder(nn.Module):
    """Full vision path: normalization + IE, patch select + SRM + NE, fusion.

    Patch selection and SRM extraction are parameter-free preprocessing; they
    run outside autograd, so no gradient crosses the residual boundary.
    """

    def __init__(
        self,
        d: int,
        p: int = 112,
        ie: ImageEncoder | None = None,
        ne: NoiseEncoder | None = None,
        glcm_levels: int = patches.DEFAULT_LEVELS,
        srm_q: float = srm.TRUNCATION,
    ):
        super().__init__()
        if ie is None and ne is None:
            raise ValueError("at least one of the IE/NE branches must exist")
        if IMAGE_SIZE % p != 0:
            raise ValueError(f"patch size {p} does not divide {IMAGE_SIZE}")
        self.ie = ie
        self.ne = ne
        self.p = p
        self.glcm_levels = glcm_levels
        self.srm_q = srm_q
        self.register_buffer("norm_mean", torch.full((3, 1, 1), 0.5))
        self.register_buffer("norm_std", torch.full((3, 1, 1), 0.5))

    def set_normalization(self, mean, std) -> None:
        with torch.no_grad():
            self.norm_mean.copy_(
                torch.as_tensor(mean, dtype=self.norm_mean.dtype).view(3, 1, 1)
            )
            self.norm_std.copy_(
                torch.as_tensor(std, dtype=self.norm_std.dtype).view(3, 1, 1)
            )

    def extract_noise(self, images) -> torch.Tensor:
        """Richest-patch SRM residuals for a batch, detached from autograd."""
        if isinstance(images, torch.Tensor):
            arr = images.detach().cpu().double().numpy()
        else:
            arr = np.asarray(images, dtype=np.float64)
        rich = patches.select_richest_batch(arr, self.p, self.glcm_levels)
        residual = srm.srm_extract_batch(rich, self.srm_q)
        return torch.from_numpy(residual).to(self.norm_mean.dtype)

    def forward(
        self, images: torch.Tensor, noise: torch.Tensor | None = None
    ) -> dict[str, torch.Tensor]:
        parts = {}
        x_v = None
        if self.ie is not None:
            normalized = (images - self.norm_mean) / self.norm_std
            x_i = self.ie(normalized)
            parts["X_i"] = x_i
            x_v = x_i
        if self.ne is not None:
            if noise is None:
                noise = self.extract_noise(images)
            n_n = self.ne(noise)
            parts["N_n"] = n_n
            x_v = n_n if x_v is None else x_v + n_n
        parts["X_v"] = x_v
        return parts
