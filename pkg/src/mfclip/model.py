"""Full model assembly: vision/language encoders, gate, predictor, head.

Training consumes image-prompt pairs and the composite objective
(cross-entropy + KL + contrastive); inference is vision-only — images flow
through the vision encoder and the classification head, and no language,
gate, or predictor parameter is touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from . import patches, srm, spa
from .ftg import Vocabulary
from .language import LanguageEncoder
from .vision import (
    DEFAULT_IE_STEM,
    DEFAULT_NE_STEM,
    ImageEncoder,
    NoiseEncoder,
    VisionEncoder,
)


@dataclass
class ModelConfig:
    d: int = 512
    p: int = 112
    not_blocks: int = 3  # noise-transformer depth
    fle_blocks: int = 6  # language-transformer depth
    heads: int = 8
    mlp_ratio: int = 4
    ie_blocks: int = 6
    ie_stem: tuple[int, ...] = DEFAULT_IE_STEM
    ne_stem: tuple[int, ...] = DEFAULT_NE_STEM
    batch_size: int = 24  # pair-gate dimension
    tau_init: float = spa.DEFAULT_TAU
    glcm_levels: int = patches.DEFAULT_LEVELS
    srm_q: float = srm.TRUNCATION
    use_ie: bool = True
    use_ne: bool = True
    use_fle: bool = True
    use_predictor: bool = True
    use_spa: bool = True

    def __post_init__(self):
        self.ie_stem = tuple(self.ie_stem)
        self.ne_stem = tuple(self.ne_stem)
        if not (self.use_ie or self.use_ne):
            raise ValueError("at least one vision branch (ie/ne) must be enabled")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ie_stem"] = list(self.ie_stem)
        out["ne_stem"] = list(self.ne_stem)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["ie_stem"] = tuple(raw["ie_stem"])
        raw["ne_stem"] = tuple(raw["ne_stem"])
        return cls(**raw)


class MFCLIP(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        ie = (
            ImageEncoder(
                cfg.d,
                blocks=cfg.ie_blocks,
                heads=cfg.heads,
                stem_channels=cfg.ie_stem,
                mlp_ratio=cfg.mlp_ratio,
            )
            if cfg.use_ie
            else None
        )
        ne = (
            NoiseEncoder(
                cfg.d,
                cfg.p,
                blocks=cfg.not_blocks,
                heads=cfg.heads,
                stem_channels=cfg.ne_stem,
                mlp_ratio=cfg.mlp_ratio,
            )
            if cfg.use_ne
            else None
        )
        self.mve = VisionEncoder(
            cfg.d,
            p=cfg.p,
            ie=ie,
            ne=ne,
            glcm_levels=cfg.glcm_levels,
            srm_q=cfg.srm_q,
        )
        self.fle = (
            LanguageEncoder(
                vocab_size,
                cfg.d,
                blocks=cfg.fle_blocks,
                heads=cfg.heads,
                mlp_ratio=cfg.mlp_ratio,
            )
            if cfg.use_fle
            else None
        )
        self.gate = (
            spa.SampleGate(cfg.batch_size, cfg.tau_init, gated=cfg.use_spa)
            if cfg.use_fle
            else None
        )
        self.predictor = nn.Linear(cfg.d, cfg.d) if cfg.use_predictor else None
        self.head = nn.Linear(cfg.d, 2)

    def extract_noise(self, images) -> torch.Tensor:
        return self.mve.extract_noise(images)

    def forward(
        self,
        images: torch.Tensor,
        tokens: torch.Tensor | None = None,
        noise: torch.Tensor | None = None,
    ) -> dict[str, torch.Tensor]:
        out = self.mve(images, noise=noise)
        out["logits"] = self.head(out["X_v"])
        if self.fle is not None and tokens is not None:
            out["T_l"] = self.fle(tokens)
            if self.predictor is not None:
                out["T_l_pre"] = self.predictor(out["X_v"])
        return out

    def similarity(
        self, x_v: torch.Tensor, t_l: torch.Tensor, gated: bool = True
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Similarity pair, optionally bypassing the sigmoid gate."""
        if self.gate is None:
            raise RuntimeError("model was built without a language branch")
        if gated:
            return self.gate(x_v, t_l)
        sim = spa.cosine_logits(x_v, t_l)
        tau = self.gate.tau
        return torch.softmax(sim / tau, dim=1), torch.softmax(sim.T / tau, dim=1)

    def compute_losses(
        self,
        outputs: dict[str, torch.Tensor],
        y: torch.Tensor,
        use_kl: bool = True,
        use_cmc: bool = True,
        weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> tuple[torch.Tensor, dict[str, float]]:
        """Composite objective: w_ce * CE + w_kl * KL + w_cmc * CMC.

        Disabled or structurally unavailable terms contribute exactly zero,
        so toggling them off reproduces plain CE training.
        """
        w_ce, w_kl, w_cmc = weights
        total = w_ce * spa.ce_loss(outputs["logits"], y)
        parts = {"ce": float(total.detach() / w_ce if w_ce else 0.0)}
        parts["kl"] = 0.0
        parts["cmc"] = 0.0
        if use_kl and "T_l_pre" in outputs:
            kl = spa.kl_loss(outputs["T_l_pre"], outputs["T_l"])
            parts["kl"] = float(kl.detach())
            total = total + w_kl * kl
        if use_cmc and "T_l" in outputs and self.gate is not None:
            s_v2l, s_l2v = self.gate(outputs["X_v"], outputs["T_l"])
            cmc = spa.cmc_loss(s_v2l, s_l2v)
            parts["cmc"] = float(cmc.detach())
            total = total + w_cmc * cmc
        parts["total"] = float(total.detach())
        return total, parts

    @torch.no_grad()
    def infer(self, images: torch.Tensor, noise: torch.Tensor | None = None) -> torch.Tensor:
        """Vision-only class probabilities (softmax over the head logits)."""
        out = self.mve(images, noise=noise)
        return torch.softmax(self.head(out["X_v"]), dim=1)


def build_model(cfg: ModelConfig, vocab: Vocabulary, seed: int = 0) -> MFCLIP:
    """Seeded construction so parameter initialization is reproducible."""
    torch.manual_seed(seed)
    return MFCLIP(cfg, vocab_size=len(vocab))
