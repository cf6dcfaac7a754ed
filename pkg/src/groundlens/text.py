"""Prompt tokenisation, embedding lookup and token-index selection.

Tokenisation is greedy longest-match over an explicit sub-token vocabulary.
Word-final pieces carry a ``</w>`` suffix (as in CLIP's vocabulary), so
concatenating pieces and turning ``</w>`` into spaces recovers the text.
Every character of the alphabet has a vocabulary entry, both bare and
word-final, which makes tokenisation total; characters outside the alphabet
are dropped.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, CorruptVocabularyError, EmptySelectionError

SEQ_LEN = 77
EOW = "</w>"
BEGIN_TOKEN = "<|startoftext|>"
END_TOKEN = "<|endoftext|>"
PAD_TOKEN = "<|pad|>"

_WORD_RE = re.compile(r"[a-z]+|[0-9]|[^\sa-z0-9]")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    begin_id: int
    end_id: int
    pad_id: int
    embedding_table: np.ndarray
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.tokens)
        if len({self.begin_id, self.end_id, self.pad_id}) != 3:
            raise CorruptVocabularyError("begin/end/pad ids must be distinct")
        for i in (self.begin_id, self.end_id, self.pad_id):
            if not 0 <= i < n:
                raise CorruptVocabularyError(f"special id {i} outside vocabulary of size {n}")
        table = np.ascontiguousarray(self.embedding_table, dtype=np.float32)
        if table.ndim != 2 or table.shape[0] != n:
            raise CorruptVocabularyError(
                f"embedding table {table.shape} does not match {n} entries"
            )
        if not np.isfinite(table).all():
            raise CorruptVocabularyError("embedding table contains non-finite values")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != n:
            raise CorruptVocabularyError("duplicate sub-token strings")
        table.setflags(write=False)
        object.__setattr__(self, "embedding_table", table)
        object.__setattr__(self, "index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.embedding_table.shape[1]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.begin_id, self.end_id, self.pad_id))


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    padding_mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_real(self) -> int:
        return int(self.padding_mask.sum())


@dataclass(frozen=True)
class PromptEmbedding:
    matrix: np.ndarray
    source: TokenSequence


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def _segment_word(word: str, vocab: Vocabulary) -> list[int]:
    ids = []
    start = 0
    n = len(word)
    while start < n:
        for end in range(n, start, -1):
            piece = word[start:end]
            if end == n and piece + EOW in vocab.index:
                ids.append(vocab.index[piece + EOW])
                break
            if piece in vocab.index:
                ids.append(vocab.index[piece])
                break
        else:
            # character outside the alphabet
            end = start + 1
        start = end
    return ids


def subtoken_ids(text: str, vocab: Vocabulary) -> list[int]:
    """Sub-token ids for ``text`` without specials or padding."""
    ids: list[int] = []
    for word in split_words(text):
        ids.extend(_segment_word(word, vocab))
    return ids


def tokenize(prompt: str, vocab: Vocabulary, seq_len: int = SEQ_LEN) -> TokenSequence:
    """``[begin] + pieces + [end]`` padded or truncated to exactly ``seq_len`` ids."""
    if seq_len < 2:
        raise ArgumentError(f"sequence length must be >= 2, got {seq_len}")
    body = subtoken_ids(prompt, vocab)[: seq_len - 2]
    real = [vocab.begin_id, *body, vocab.end_id]
    ids = np.full(seq_len, vocab.pad_id, dtype=np.int64)
    ids[: len(real)] = real
    mask = np.zeros(seq_len, dtype=bool)
    mask[: len(real)] = True
    return TokenSequence(ids, mask)


def detokenize(tokens: TokenSequence, vocab: Vocabulary) -> str:
    pieces = [
        vocab.tokens[i]
        for i, real in zip(tokens.ids, tokens.padding_mask)
        if real and i not in (vocab.begin_id, vocab.end_id)
    ]
    return " ".join("".join(pieces).replace(EOW, " ").split())


def token_strings(tokens: TokenSequence, vocab: Vocabulary) -> list[str]:
    return [vocab.tokens[i] for i in tokens.ids]


def embed(tokens: TokenSequence, vocab: Vocabulary) -> PromptEmbedding:
    ids = tokens.ids
    if ids.min() < 0 or ids.max() >= vocab.size:
        raise CorruptVocabularyError(
            f"token id outside [0, {vocab.size}): min {ids.min()}, max {ids.max()}"
        )
    return PromptEmbedding(np.ascontiguousarray(vocab.embedding_table[ids]), tokens)


def select_token_indices(
    tokens: TokenSequence,
    mode: str,
    vocab: Vocabulary,
    pathology: str = "",
    include_specials: bool = False,
) -> list[int]:
    """Sequence positions whose attention maps enter the heatmap.

    ``all`` keeps every non-padding position (begin/end only when
    ``include_specials``). ``pathology`` keeps the positions of each contiguous
    occurrence of the pathology name's sub-tokens.
    """
    real = [i for i in range(tokens.length) if tokens.padding_mask[i]]
    if not include_specials:
        real = [i for i in real if tokens.ids[i] not in (vocab.begin_id, vocab.end_id)]
    if mode == "all":
        return real
    if mode != "pathology":
        raise ArgumentError(f"unknown token mode {mode!r}")
    if not pathology.strip():
        raise ArgumentError("pathology mode needs a non-empty pathology name")
    needle = subtoken_ids(pathology, vocab)
    if not needle:
        raise EmptySelectionError(f"pathology {pathology!r} tokenises to nothing")
    ids = [int(tokens.ids[i]) for i in real]
    hits: set[int] = set()
    k = len(needle)
    for j in range(len(ids) - k + 1):
        if ids[j : j + k] == needle:
            hits.update(real[j : j + k])
    if not hits:
        raise EmptySelectionError(f"pathology {pathology!r} not found in prompt")
    return sorted(hits)
