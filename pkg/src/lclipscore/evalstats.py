"""Rank correlation with human ratings, pairwise preference accuracy and FOIL accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import ContractError, DataError, UndefinedCorrelationError

CATEGORIES = ("HC", "HI", "HM", "MM")
REF_MODES = {"none": 0, "1-ref": 1, "4-ref": 4}

# scorer(image_id, caption, refs) -> float
Scorer = Callable[[str, str, Sequence[str]], float]


@dataclass
class RatingRecord:
    pair_id: str
    human_rating: float
    metric_score: float

    def __post_init__(self):
        if not math.isfinite(self.human_rating):
            raise DataError(f"rating for {self.pair_id!r} is not finite")

    @classmethod
    def from_json(cls, obj: Mapping) -> "RatingRecord":
        return cls(str(obj["id"]), float(obj["rating"]), float(obj["score"]))


@dataclass
class PairRecord:
    image_id: str
    caption_a: str
    caption_b: str
    category: str
    human_choice: str
    refs: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise DataError(f"unknown category {self.category!r}")
        if self.human_choice not in ("A", "B"):
            raise DataError(f"human_choice must be A or B, got {self.human_choice!r}")

    @classmethod
    def from_json(cls, obj: Mapping) -> "PairRecord":
        return cls(str(obj["image"]), obj["a"], obj["b"], obj["category"], obj["choice"], list(obj.get("refs", [])))


@dataclass
class FoilRecord:
    image_id: str
    true_caption: str
    foil_caption: str
    refs: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.true_caption == self.foil_caption:
            raise DataError(f"foil caption equals the true caption for {self.image_id!r}")

    @classmethod
    def from_json(cls, obj: Mapping) -> "FoilRecord":
        return cls(str(obj["image"]), obj["true"], obj["foil"], list(obj.get("refs", [])))


# ---------------------------------------------------------------- Kendall


def _prepare(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) != len(y):
        raise ContractError(f"x and y differ in length ({len(x)} vs {len(y)})")
    if len(x) < 2:
        raise UndefinedCorrelationError("need at least two observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ContractError("inputs must be finite")
    return x, y


def _tie_pairs(sorted_vals: np.ndarray) -> int:
    _, counts = np.unique(sorted_vals, return_counts=True)
    return int(sum(int(c) * (int(c) - 1) // 2 for c in counts))


def _count_inversions(a: List[float]) -> int:
    """Strict inversions of ``a`` via bottom-up merge sort."""
    n = len(a)
    src, swaps, width = list(a), 0, 1
    while width < n:
        dst = []
        for lo in range(0, n, 2 * width):
            left, right = src[lo:lo + width], src[lo + width:lo + 2 * width]
            i = j = 0
            while i < len(left) and j < len(right):
                if left[i] <= right[j]:
                    dst.append(left[i])
                    i += 1
                else:
                    dst.append(right[j])
                    swaps += len(left) - i
                    j += 1
            dst.extend(left[i:])
            dst.extend(right[j:])
        src, width = dst, 2 * width
    return swaps


@dataclass(frozen=True)
class PairCounts:
    """Exact pair classification: concordant, discordant, ties in x only, ties in y only."""

    n: int
    concordant_minus_discordant: int
    n0: int
    n1: int  # pairs tied in x (including joint ties)
    n2: int  # pairs tied in y (including joint ties)
    m: int  # min number of distinct levels


def _knight_counts(x, y) -> PairCounts:
    x, y = _prepare(x, y)
    n = len(x)
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(xs)
    n2 = _tie_pairs(ys)
    _, joint = np.unique(np.stack([xs, ys], axis=1), axis=0, return_counts=True)
    n3 = int(sum(int(c) * (int(c) - 1) // 2 for c in joint))
    swaps = _count_inversions(ys.tolist())
    s = n0 - n1 - n2 + n3 - 2 * swaps
    m = min(len(np.unique(x)), len(np.unique(y)))
    return PairCounts(n, s, n0, n1, n2, m)


def _brute_counts(x, y) -> PairCounts:
    x, y = _prepare(x, y)
    n = len(x)
    # python floats: numpy scalar arithmetic dominates the double loop otherwise
    xs, ys = x.tolist(), y.tolist()
    p = q = tx = ty = txy = 0
    for i in range(n):
        xi, yi = xs[i], ys[i]
        for j in range(i + 1, n):
            dx, dy = xi - xs[j], yi - ys[j]
            if dx == 0 and dy == 0:
                txy += 1
            elif dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif (dx > 0) == (dy > 0):
                p += 1
            else:
                q += 1
    m = min(len(set(xs)), len(set(ys)))
    return PairCounts(n, p - q, n * (n - 1) // 2, tx + txy, ty + txy, m)


def _tau_b(c: PairCounts) -> float:
    if c.n0 - c.n1 == 0 or c.n0 - c.n2 == 0:
        raise UndefinedCorrelationError("tau_b is undefined when either vector is constant")
    return c.concordant_minus_discordant / math.sqrt((c.n0 - c.n1) * (c.n0 - c.n2))


def _tau_c(c: PairCounts) -> float:
    if c.m < 2:
        raise UndefinedCorrelationError("tau_c is undefined when either vector is constant")
    return 2.0 * c.m * c.concordant_minus_discordant / (c.n * c.n * (c.m - 1))


def kendall_tau_b(x, y) -> float:
    """Tie-corrected Kendall tau in O(n log n)."""
    return _tau_b(_knight_counts(x, y))


def kendall_tau_c(x, y) -> float:
    """Stuart's tau_c in O(n log n)."""
    return _tau_c(_knight_counts(x, y))


def brute_force_tau(x, y, variant: str = "b") -> float:
    """Reference O(n^2) implementation used to check the fast path."""
    counts = _brute_counts(x, y)
    if variant == "b":
        return _tau_b(counts)
    if variant == "c":
        return _tau_c(counts)
    raise ValueError(f"variant must be 'b' or 'c', got {variant!r}")


def rating_correlations(records: Sequence[RatingRecord]) -> Dict[str, float]:
    h = [r.human_rating for r in records]
    s = [r.metric_score for r in records]
    return {"tau_b": kendall_tau_b(h, s), "tau_c": kendall_tau_c(h, s), "n": len(records)}


# ---------------------------------------------------------------- protocols


def sample_references(refs: Sequence[str], k: int = 5, seed: int = 0) -> List[str]:
    """Seeded choice of ``k`` references without replacement; all of them if fewer exist."""
    if len(refs) <= k:
        return list(refs)
    idx = np.random.default_rng(seed).choice(len(refs), size=k, replace=False)
    return [refs[i] for i in sorted(idx)]


def pascal_accuracy(pairs: Sequence[PairRecord], scorer: Scorer) -> Dict[str, float]:
    """Per-category preference accuracy; exact score ties earn half credit."""
    credit: Dict[str, List[float]] = {c: [] for c in CATEGORIES}
    for p in pairs:
        if p.category not in credit:
            raise DataError(f"unknown category {p.category!r}")
        sa = scorer(p.image_id, p.caption_a, p.refs)
        sb = scorer(p.image_id, p.caption_b, p.refs)
        if sa == sb:
            credit[p.category].append(0.5)
        else:
            credit[p.category].append(1.0 if ("A" if sa > sb else "B") == p.human_choice else 0.0)
    out = {c: float(np.mean(v)) for c, v in credit.items() if v}
    out["mean"] = float(np.mean([out[c] for c in CATEGORIES if c in out])) if out else float("nan")
    return out


def foil_accuracy(records: Sequence[FoilRecord], scorer: Scorer, ref_mode: str = "none") -> float:
    """Fraction of records whose true caption strictly outscores its foil."""
    if ref_mode not in REF_MODES:
        raise ContractError(f"ref_mode must be one of {sorted(REF_MODES)}, got {ref_mode!r}")
    k = REF_MODES[ref_mode]
    if not records:
        raise DataError("no FOIL records")
    hits = 0
    for r in records:
        if len(r.refs) < k:
            raise DataError(f"record {r.image_id!r} has {len(r.refs)} refs, {ref_mode} needs {k}")
        refs = r.refs[:k]
        hits += scorer(r.image_id, r.true_caption, refs) > scorer(r.image_id, r.foil_caption, refs)
    return hits / len(records)
