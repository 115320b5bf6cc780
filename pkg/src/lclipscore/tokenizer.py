"""Whitespace/punctuation tokenizer over a corpus-built vocabulary."""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, List, Optional, Sequence

from .errors import TokenizationError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

_WORD = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> List[str]:
    """Lowercase, drop punctuation, split on whitespace. Shared with the n-gram metric."""
    return _WORD.findall(text.lower())


class Tokenizer:
    """Maps words to ids. Ids 0..3 are reserved for pad/bos/eos/unk."""

    def __init__(self, words: Sequence[str]):
        seen = list(SPECIALS)
        for w in words:
            if w not in seen:
                seen.append(w)
        self.itos = seen
        self.stoi = {w: i for i, w in enumerate(seen)}

    @classmethod
    def from_corpus(cls, texts: Iterable[str], max_size: Optional[int] = None) -> "Tokenizer":
        counts = Counter(w for t in texts for w in split_words(t))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(SPECIALS))]
        return cls(ranked)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def encode(self, text: str, strict: bool = False) -> List[int]:
        ids = []
        for w in split_words(text):
            if w in self.stoi:
                ids.append(self.stoi[w])
            elif strict:
                raise TokenizationError(f"out-of-vocabulary word {w!r}")
            else:
                ids.append(self.unk_id)
        return ids

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> List[str]:
        out = []
        for i in ids:
            w = self.itos[int(i)]
            if strip_special and w in SPECIALS:
                if w == EOS:
                    break
                continue
            out.append(w)
        return out

    def to_json(self) -> list:
        return list(self.itos[len(SPECIALS):])

    @classmethod
    def from_json(cls, words: list) -> "Tokenizer":
        return cls(words)
