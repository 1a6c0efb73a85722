"""Fine-grained language encoder over concatenated four-sentence prompts.

Token ids of shape b x 4 x 77 are embedded, the four sentence slots are
concatenated into a 308-token sequence, a learnable position embedding is
added, and a transformer stack runs with full bidirectional attention across
the whole window.  The output embedding is read at the EOT position of the
fourth sentence.
"""

from __future__ import annotations

import torch
from torch import nn

from .ftg import CONTEXT_LEN, EOT_ID, N_SENTENCES
from .nn import TransformerBlock, init_linear, trunc_normal_

SEQ_LEN = N_SENTENCES * CONTEXT_LEN  # 308


class LanguageEncoder(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        d: int,
        blocks: int = 6,
        heads: int = 8,
        mlp_ratio: int = 4,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.word_emb = nn.Embedding(vocab_size, d)
        self.pos = nn.Parameter(torch.zeros(1, SEQ_LEN, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, heads, mlp_ratio) for _ in range(blocks)
        )
        init_linear(self)
        trunc_normal_(self.pos)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """b x 4 x 77 ids -> b x 308 x d position-embedded sequence."""
        if tokens.shape[1:] != (N_SENTENCES, CONTEXT_LEN):
            raise ValueError(f"expected b x 4 x 77 tokens, got {tuple(tokens.shape)}")
        if int(tokens.max()) >= self.vocab_size or int(tokens.min()) < 0:
            raise ValueError("token id out of vocabulary range")
        flat = tokens.reshape(tokens.shape[0], SEQ_LEN)
        return self.word_emb(flat) + self.pos

    @staticmethod
    def read_positions(tokens: torch.Tensor) -> torch.Tensor:
        """Index of the fourth sentence's EOT within the 308-token window."""
        last = tokens[:, N_SENTENCES - 1, :]
        hits = last == EOT_ID
        if not bool(hits.any(dim=1).all()):
            raise ValueError("a fourth sentence is missing its EOT token")
        within = hits.int().argmax(dim=1)
        return (N_SENTENCES - 1) * CONTEXT_LEN + within

    def encode(self, seq: torch.Tensor, read_pos: torch.Tensor) -> torch.Tensor:
        """Run the block stack and gather per-sample read positions."""
        for block in self.blocks:
            seq = block(seq)
        idx = read_pos.view(-1, 1, 1).expand(-1, 1, seq.shape[-1])
        return seq.gather(1, idx).squeeze(1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.encode(self.embed(tokens), self.read_positions(tokens))
