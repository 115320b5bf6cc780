"""CIDEr-D consensus score with corpus document frequencies."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple, Union

from .errors import ContractError
from .tokenizer import split_words

MAX_N = 4
Tokens = Sequence[str]


def tokens_of(text: Union[str, Tokens]) -> List[str]:
    return split_words(text) if isinstance(text, str) else list(text)


def extract_ngrams(tokens: Tokens, n: int) -> Counter:
    if not 1 <= n <= MAX_N:
        raise ValueError(f"n must be in 1..{MAX_N}, got {n}")
    tokens = list(tokens)
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _all_ngrams(tokens: Tokens) -> List[Counter]:
    return [extract_ngrams(tokens, n) for n in range(1, MAX_N + 1)]


@dataclass
class CorpusIDF:
    """Per-image document frequency of every n-gram in a reference corpus."""

    doc_count: int
    df: Dict[Tuple[str, ...], int] = field(default_factory=dict)

    def idf(self, gram: Tuple[str, ...]) -> float:
        return math.log(self.doc_count / max(self.df.get(gram, 0), 1))

    def to_json(self) -> dict:
        return {"doc_count": self.doc_count, "df": [[list(g), c] for g, c in sorted(self.df.items())]}

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusIDF":
        return cls(int(obj["doc_count"]), {tuple(g): int(c) for g, c in obj["df"]})

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def build_idf(reference_corpus: Iterable[Sequence[Union[str, Tokens]]]) -> CorpusIDF:
    df: Counter = Counter()
    n_docs = 0
    for refs in reference_corpus:
        n_docs += 1
        present = set()
        for r in refs:
            for counts in _all_ngrams(tokens_of(r)):
                present.update(counts)
        df.update(present)
    if n_docs == 0:
        raise ContractError("build_idf needs a nonempty reference corpus")
    return CorpusIDF(n_docs, dict(df))


def _tfidf(counts: Counter, idf: CorpusIDF) -> Dict[Tuple[str, ...], float]:
    return {g: c * idf.idf(g) for g, c in counts.items()}


def _norm(vec: Dict) -> float:
    return math.sqrt(sum(v * v for v in vec.values()))


def cider_d(candidate: Union[str, Tokens], refs: Sequence[Union[str, Tokens]], idf: CorpusIDF,
            sigma: float = 6.0) -> float:
    """CIDEr-D: clipped tf-idf cosines, Gaussian length penalty, orders 1..4, scaled by 10."""
    if len(refs) == 0:
        raise ContractError("cider_d needs at least one reference")
    cand = tokens_of(candidate)
    if not cand:
        return 0.0
    cand_vecs = [_tfidf(c, idf) for c in _all_ngrams(cand)]
    total = 0.0
    for ref in refs:
        rt = tokens_of(ref)
        penalty = math.exp(-((len(cand) - len(rt)) ** 2) / (2.0 * sigma ** 2))
        for cv, rc in zip(cand_vecs, _all_ngrams(rt)):
            rv = _tfidf(rc, idf)
            nc, nr = _norm(cv), _norm(rv)
            if nc == 0.0 or nr == 0.0:
                continue
            # clipping: the candidate weight never exceeds the reference weight
            dot = sum(min(w, rv[g]) * rv[g] for g, w in cv.items() if g in rv)
            total += penalty * dot / (nc * nr)
    return 10.0 * total / (MAX_N * len(refs))
