"""Hierarchical prompt generation and word-level tokenization.

Every sample gets four sentences, one per taxonomy level.  Sentences are
encoded over a small closed vocabulary with word-level tokens: case-insensitive
lookup against canonical token spellings, so detokenization reproduces the
original template text (including generator names like "DiffFace").
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import FAMILIES, FORGERY_TYPES, KNOWN_GENERATORS, HierLabel

CONTEXT_LEN = 77
N_SENTENCES = 4

PAD_ID = 0
SOT_ID = 1
EOT_ID = 2
SPECIAL_TOKENS = {PAD_ID: "<pad>", SOT_ID: "<sot>", EOT_ID: "<eot>"}

LEVEL1 = {
    "real": "a photo of a real face",
    "fake": "a photo of a fake face",
}
LEVEL2 = {
    "EFS": "a photo of an entire synthesized face",
    "AM": "a photo of an attributed manipulated face",
    "FS": "a photo of an identity swapped face",
}
LEVEL3 = {
    "diffusion": "a photo generated by the diffusion-based model",
    "GAN": "a photo generated by the GAN-based model",
}
LEVEL4_PREFIX = "a photo generated by"

# Constant sentences for levels 2-4 of authentic images, keeping the 4 x 77
# prompt shape uniform across classes.
REAL_LEVELS = (
    "a photo of a pristine face",
    "a photo not generated by any model",
    "a photo captured by a camera",
)


class TokenizeError(ValueError):
    """A word is outside the closed vocabulary."""


@dataclass(frozen=True)
class PromptSet:
    """The four per-level sentences for one sample."""

    sentences: tuple[str, str, str, str]

    def __post_init__(self):
        if len(self.sentences) != N_SENTENCES:
            raise ValueError("a prompt set holds exactly four sentences")


def generate_prompts(label: HierLabel) -> PromptSet:
    """Map a validated hierarchical label to its four prompt sentences.

    Missing fake levels fall back to the real-image neutral sentence for that
    level, so the output is total over every label the nesting rules allow.
    """
    if not label.is_fake:
        return PromptSet((LEVEL1["real"],) + REAL_LEVELS)
    level2 = LEVEL2[label.forgery_type] if label.forgery_type else REAL_LEVELS[0]
    level3 = LEVEL3[label.family] if label.family else REAL_LEVELS[1]
    level4 = (
        f"{LEVEL4_PREFIX} {label.generator}" if label.generator else REAL_LEVELS[2]
    )
    return PromptSet((LEVEL1["fake"], level2, level3, level4))


def all_template_sentences(generators: Iterable[str]) -> list[str]:
    """Every sentence the templates can produce over the given generators."""
    sentences = list(LEVEL1.values()) + list(LEVEL2.values()) + list(LEVEL3.values())
    sentences += list(REAL_LEVELS)
    sentences += [f"{LEVEL4_PREFIX} {g}" for g in generators]
    return sentences


class Vocabulary:
    """Closed word vocabulary with canonical spellings.

    ids 0..2 are PAD, SOT, EOT; word ids follow in sorted canonical order.
    Lookup is case-insensitive; the canonical spelling is whatever the
    templates use, so round trips preserve generator casing.
    """

    def __init__(self, words: Sequence[str]):
        canonical: dict[str, str] = {}
        for word in words:
            key = word.lower()
            if key in canonical and canonical[key] != word:
                raise ValueError(
                    f"case-colliding words {canonical[key]!r} and {word!r}"
                )
            canonical.setdefault(key, word)
        self.tokens = [SPECIAL_TOKENS[i] for i in range(3)]
        self.tokens += sorted(canonical.values())
        self._ids = {tok.lower(): i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._ids

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word.lower()]
        except KeyError:
            raise TokenizeError(f"word not in vocabulary: {word!r}") from None

    def word_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    @classmethod
    def build(cls, generators: Iterable[str] = tuple(KNOWN_GENERATORS)) -> "Vocabulary":
        words = []
        for sent in all_template_sentences(generators):
            words.extend(sent.split())
        return cls(words)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"pad={PAD_ID} sot={SOT_ID} eot={EOT_ID}\n")
            for tok in self.tokens[3:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != f"pad={PAD_ID} sot={SOT_ID} eot={EOT_ID}":
                raise ValueError(f"bad vocabulary header: {header!r}")
            words = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(words)


@dataclass
class TokenSeq:
    """A fixed-length 77-token encoding of one sentence."""

    ids: np.ndarray
    valid_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (CONTEXT_LEN,):
            raise ValueError(f"token sequence must have length {CONTEXT_LEN}")


def tokenize(sentence: str, vocab: Vocabulary) -> TokenSeq:
    """Whitespace word encoding: [SOT, words..., EOT, PAD...]."""
    words = sentence.split()
    if len(words) + 2 > CONTEXT_LEN:
        raise TokenizeError(f"sentence too long ({len(words)} words)")
    ids = np.full(CONTEXT_LEN, PAD_ID, dtype=np.int64)
    ids[0] = SOT_ID
    for k, word in enumerate(words, start=1):
        ids[k] = vocab.id_of(word)
    ids[len(words) + 1] = EOT_ID
    return TokenSeq(ids, valid_len=len(words) + 2)


def detokenize(seq: TokenSeq, vocab: Vocabulary) -> str:
    words = [vocab.word_of(int(i)) for i in seq.ids[1 : seq.valid_len - 1]]
    return " ".join(words)


def encode_prompts(prompts: PromptSet, vocab: Vocabulary) -> np.ndarray:
    """One prompt set to a 4 x 77 id array."""
    return np.stack([tokenize(s, vocab).ids for s in prompts.sentences])


def encode_prompt_batch(
    prompts: Sequence[PromptSet], vocab: Vocabulary
) -> np.ndarray:
    """Batch of prompt sets to a b x 4 x 77 id array."""
    return np.stack([encode_prompts(p, vocab) for p in prompts])
