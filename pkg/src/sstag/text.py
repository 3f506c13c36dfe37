"""Text pipeline: vocabulary, tokenization, masking, batching.

Token ids 0..4 are reserved for [PAD], [CLS], [SEP], [MASK], [UNK] in that
order. Content words are lowercased alphanumeric runs; everything else
separates. Vocabulary ids are assigned by descending count with ties broken
by token text, so builds are deterministic for a given corpus.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .util import ValidationError, sha256_bytes

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")

_WORD_RE = re.compile(r"[0-9a-z_]+")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: list[str]):
        """``tokens`` are the content words in id order (ids start at 5)."""
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary tokens must be unique")
        if any(t in RESERVED for t in tokens):
            raise ValidationError("reserved markers cannot appear as content tokens")
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode_word(self, word: str) -> int:
        return self.token_to_id.get(word, UNK)

    def decode(self, ids) -> str:
        """Content words of a sequence, specials skipped."""
        return " ".join(
            self.id_to_token[int(i)] for i in ids if int(i) > UNK
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise ValidationError(f"{path}:{line_no + 1}: expected token<TAB>id")
                tok, idx = parts
                if int(idx) != line_no:
                    raise ValidationError(f"{path}:{line_no + 1}: ids must be dense and ordered")
                tokens.append(tok)
        if tokens[: len(RESERVED)] != list(RESERVED):
            raise ValidationError(f"{path}: reserved token block malformed")
        return cls(tokens[len(RESERVED) :])

    def content_hash(self) -> str:
        return sha256_bytes("\n".join(self.id_to_token).encode("utf-8"))


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Count words over an iterable of texts; keep those seen >= min_count."""
    counts = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(split_words(text))
    if n_texts == 0:
        raise ValidationError("empty corpus")
    kept = [(tok, c) for tok, c in counts.items() if c >= min_count]
    kept.sort(key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in kept])


@dataclass(frozen=True)
class TokenSequence:
    """[CLS] + content ids + [SEP]; content truncated to max_len - 2."""

    ids: np.ndarray

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_content(self) -> int:
        return self.length - 2


def tokenize(vocab: Vocabulary, text: str, max_len: int) -> TokenSequence:
    if max_len < 2:
        raise ValidationError("max_len must fit [CLS] and [SEP]")
    words = split_words(text)[: max_len - 2]
    ids = np.fromiter(
        (CLS, *(vocab.encode_word(w) for w in words), SEP), np.int64, count=len(words) + 2
    )
    return TokenSequence(ids=ids)


@dataclass(frozen=True)
class MaskedSequence:
    """A token sequence after masking.

    ``indicator`` is true exactly at masked content positions; ``targets``
    holds the pre-mask id there and -1 elsewhere.
    """

    ids: np.ndarray
    indicator: np.ndarray
    targets: np.ndarray


def apply_mask(seq: TokenSequence, rate: float, rng: np.random.Generator) -> MaskedSequence:
    """Replace content tokens by [MASK] with the given rate.

    [CLS]/[SEP] are never masked. A non-empty sequence that drew no mask
    gets one forced at a uniformly chosen content position, so every
    non-empty node contributes to the objective.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"mask rate must be in [0, 1], got {rate}")
    n = seq.n_content
    picks = np.zeros(n, bool)
    if n > 0:
        picks = rng.random(n) < rate
        if rate > 0.0 and not picks.any():
            picks[int(rng.integers(n))] = True
    ids = seq.ids.copy()
    indicator = np.zeros(seq.length, bool)
    indicator[1 : 1 + n] = picks
    targets = np.where(indicator, seq.ids, -1)
    ids[indicator] = MASK
    return MaskedSequence(ids=ids, indicator=indicator, targets=targets)


@dataclass(frozen=True)
class MaskedBatch:
    """Right-padded stack of masked sequences."""

    ids: np.ndarray  # (B, L) int64, PAD-filled
    indicator: np.ndarray  # (B, L) bool
    targets: np.ndarray  # (B, L) int64, -1 outside masks
    lengths: np.ndarray  # (B,) true sequence lengths

    @property
    def width(self) -> int:
        return int(self.ids.shape[1])


def pad_batch(sequences: list[MaskedSequence]) -> MaskedBatch:
    if not sequences:
        raise ValidationError("cannot pad an empty batch")
    lengths = np.array([s.ids.shape[0] for s in sequences], np.int64)
    width = int(lengths.max())
    ids = np.full((len(sequences), width), PAD, np.int64)
    indicator = np.zeros((len(sequences), width), bool)
    targets = np.full((len(sequences), width), -1, np.int64)
    for i, s in enumerate(sequences):
        ids[i, : lengths[i]] = s.ids
        indicator[i, : lengths[i]] = s.indicator
        targets[i, : lengths[i]] = s.targets
    return MaskedBatch(ids=ids, indicator=indicator, targets=targets, lengths=lengths)


def unpad(batch: MaskedBatch) -> list[MaskedSequence]:
    out = []
    for i, n in enumerate(batch.lengths):
        out.append(
            MaskedSequence(
                ids=batch.ids[i, :n].copy(),
                indicator=batch.indicator[i, :n].copy(),
                targets=batch.targets[i, :n].copy(),
            )
        )
    return out
