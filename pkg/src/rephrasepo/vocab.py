"""Learner/teacher token spaces, the lossy teacher->learner mapping and meta-token stripping."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

# Canonical reserved block, always laid out first and in this order.
RESERVED = ("<bos>", "<eos>", "<unk>", "<cot>", "</cot>", "<response>", "</response>")
BOS, EOS, UNK, COT_OPEN, COT_CLOSE, RESP_OPEN, RESP_CLOSE = range(len(RESERVED))
N_RESERVED = len(RESERVED)


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[:N_RESERVED]) != RESERVED:
            raise VocabError("vocabulary must start with the canonical reserved block")
        index: dict[str, int] = {}
        for i, sym in enumerate(self.tokens):
            if sym in index:
                raise VocabError(f"duplicate symbol {sym!r}")
            index[sym] = i
        if len(self.tokens) < 8:
            raise VocabError("vocabulary needs at least one content token")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def reserved(self) -> frozenset[int]:
        return frozenset(range(N_RESERVED))

    @property
    def content(self) -> range:
        return range(N_RESERVED, len(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, symbol: object) -> bool:
        return symbol in self._index

    def lookup(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise VocabError(f"unknown symbol {symbol!r}") from None

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.lookup(s) for s in symbols]

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in indices]

    def save(self, path: str | Path) -> None:
        for sym in self.tokens:
            if "\n" in sym or "\r" in sym:
                raise VocabError(f"symbol {sym!r} cannot be written one-per-line")
        Path(path).write_text("".join(s + "\n" for s in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def build_vocab(symbols: Sequence[str]) -> Vocabulary:
    """Reserved block first, then ``symbols`` in the given order."""
    if not symbols:
        raise VocabError("need at least one content symbol")
    seen: set[str] = set(RESERVED)
    for sym in symbols:
        if sym in seen:
            raise VocabError(f"duplicate symbol {sym!r}")
        seen.add(sym)
    return Vocabulary(RESERVED + tuple(symbols))


def symbol_hash(symbol: str) -> int:
    """Stable across processes: first 8 bytes of SHA-256 of the UTF-8 symbol, big-endian."""
    return int.from_bytes(hashlib.sha256(symbol.encode("utf-8")).digest()[:8], "big")


class MappingMode(str, Enum):
    EXACT_OR_UNK = "exact-or-unk"
    SURFACE_HASH = "surface-hash"


@dataclass(frozen=True)
class TokenMapping:
    """Total teacher-index -> learner-index table.

    ``exact-or-unk`` sends unmatched teacher symbols to UNK. ``surface-hash``
    sends them to content token ``N_RESERVED + symbol_hash(sym) % n_content``;
    collisions with real content tokens are intended.
    """

    mode: MappingMode
    pairs: tuple[int, ...]

    @classmethod
    def build(cls, teacher: Vocabulary, learner: Vocabulary, mode: MappingMode | str) -> TokenMapping:
        mode = MappingMode(mode)
        n_content = learner.size - N_RESERVED
        pairs = []
        for sym in teacher.tokens:
            if sym in learner:
                pairs.append(learner.lookup(sym))
            elif mode is MappingMode.EXACT_OR_UNK:
                pairs.append(UNK)
            else:
                pairs.append(N_RESERVED + symbol_hash(sym) % n_content)
        return cls(mode, tuple(pairs))

    def __call__(self, teacher_index: int) -> int:
        return map_teacher_token(self, teacher_index)


def map_teacher_token(mapping: TokenMapping, teacher_index: int) -> int:
    if not 0 <= teacher_index < len(mapping.pairs):
        raise IndexError(f"teacher index {teacher_index} outside [0, {len(mapping.pairs)})")
    return mapping.pairs[teacher_index]


def strip_meta_tokens(seq: Sequence[int], vocab: Vocabulary | None = None) -> list[int]:
    """Drop every reserved token except EOS; order of survivors is kept.

    The reserved block is fixed, so ``vocab`` is only accepted for symmetry
    with the other helpers.
    """
    return [t for t in seq if t == EOS or t >= N_RESERVED]
