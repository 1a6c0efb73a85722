"""Sample-pair-gated cross-modal similarity and the training losses.

Vision and language embeddings are L2-normalized row-wise, their pairwise dot
products are temperature-softmaxed along the matching direction, and each
entry is multiplied by a learnable sigmoid gate sigma(A[i, j]) shared between
the vision->language and language->vision matrices.  The contrastive loss is
the mean of the two diagonal cross-entropies; a KL loss distills language
embeddings into a linear predictor of them; a linear head provides the
two-class logits for cross-entropy.
"""

from __future__ import annotations

import math

import torch
from torch import nn

DEFAULT_TAU = 0.07
KL_TEMPERATURE = 0.5


class LossError(RuntimeError):
    """A loss evaluated to a non-finite value."""


def cosine_logits(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pairwise dot products of row-normalized inputs: out[i, j] = x_i . y_j."""
    xn = x / x.norm(dim=1, keepdim=True)
    yn = y / y.norm(dim=1, keepdim=True)
    return xn @ yn.T


class SampleGate(nn.Module):
    """Learnable pair gate and temperature for cross-modal alignment.

    ``batch_size`` fixes the gate's b x b shape; training batches must match
    it exactly.  With ``gated=False`` the sigmoid gate is dropped and the
    similarity matrices reduce to plain temperature-softmaxed cosine rows.
    """

    def __init__(
        self, batch_size: int, tau_init: float = DEFAULT_TAU, gated: bool = True
    ):
        super().__init__()
        self.batch_size = batch_size
        self.gated = gated
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))
        if gated:
            self.A = nn.Parameter(torch.zeros(batch_size, batch_size))
        else:
            self.register_parameter("A", None)

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def forward(
        self, x_v: torch.Tensor, t_l: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Gated similarity pair (S_v2l, S_l2v), each b x b."""
        b = x_v.shape[0]
        if b != self.batch_size:
            raise ValueError(
                f"batch size {b} does not match the {self.batch_size}-way gate"
            )
        sim = cosine_logits(x_v, t_l)
        s_v2l = torch.softmax(sim / self.tau, dim=1)
        s_l2v = torch.softmax(sim.T / self.tau, dim=1)
        if self.gated:
            gate = torch.sigmoid(self.A)
            s_v2l = s_v2l * gate
            s_l2v = s_l2v * gate
        return s_v2l, s_l2v


def pair_labels(b: int, **kwargs) -> torch.Tensor:
    """Identity pair-label matrix: position i matches caption i."""
    return torch.eye(b, **kwargs)


def cmc_loss(
    s_v2l: torch.Tensor, s_l2v: torch.Tensor, y_pa: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean of the two direction-wise cross-entropies against pair labels."""
    b = s_v2l.shape[0]
    if y_pa is None:
        y_pa = pair_labels(b, dtype=s_v2l.dtype, device=s_v2l.device)
    loss_v2l = -(y_pa * torch.log(s_v2l)).sum(dim=1).mean()
    loss_l2v = -(y_pa * torch.log(s_l2v)).sum(dim=1).mean()
    loss = 0.5 * (loss_v2l + loss_l2v)
    if not torch.isfinite(loss):
        raise LossError("non-finite contrastive loss")
    return loss


def kl_loss(
    t_l_pre: torch.Tensor,
    t_l: torch.Tensor,
    temperature: float = KL_TEMPERATURE,
) -> torch.Tensor:
    """KL(softmax(T_l / T) || softmax(T_l_pre / T)), averaged over the batch.

    The target distribution is detached: the loss trains the predictor toward
    the language embedding, not the other way around.
    """
    target = torch.softmax(t_l.detach() / temperature, dim=1)
    log_pred = torch.log_softmax(t_l_pre / temperature, dim=1)
    log_target = torch.log_softmax(t_l.detach() / temperature, dim=1)
    loss = (target * (log_target - log_pred)).sum(dim=1).mean()
    if not torch.isfinite(loss):
        raise LossError("non-finite KL loss")
    return loss


def ce_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of softmaxed logits against one-hot (or soft) targets."""
    log_probs = torch.log_softmax(logits, dim=1)
    loss = -(y * log_probs).sum(dim=1).mean()
    if not torch.isfinite(loss):
        raise LossError("non-finite cross-entropy loss")
    return loss
