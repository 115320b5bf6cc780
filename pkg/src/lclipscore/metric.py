"""Referenceless and reference-augmented embedding caption scores."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .errors import ContractError, DomainError, LCLIPError

DEFAULT_W = 2.5
_NORM_TOL = 1e-3


def _vec(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _check_unit(x: np.ndarray, what: str) -> None:
    n = float(np.linalg.norm(x))
    if abs(n - 1.0) > _NORM_TOL:
        raise ContractError(f"{what} must be L2-normalised, has norm {n:.6g}")


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def rescale(cos: float, w: float = DEFAULT_W) -> float:
    """``w * max(cos, 0)``."""
    return w * max(float(cos), 0.0)


def l_clipscore(v0, u0, w: float = DEFAULT_W) -> float:
    v, u = _vec(v0), _vec(u0)
    _check_unit(v, "image embedding")
    _check_unit(u, "caption embedding")
    return rescale(_cos(v, u), w)


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise DomainError(f"harmonic mean needs nonnegative inputs, got {a}, {b}")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def ref_l_clipscore(u0, refs: Sequence, v0, w: float = DEFAULT_W, symmetric_scaling: bool = False) -> float:
    """Harmonic mean of the image score and the best reference cosine.

    Only the image term carries ``w`` unless ``symmetric_scaling`` is set.
    """
    if len(refs) == 0:
        raise ContractError("ref_l_clipscore needs at least one reference embedding")
    u = _vec(u0)
    _check_unit(u, "caption embedding")
    best = -1.0
    for r in refs:
        r = _vec(r)
        _check_unit(r, "reference embedding")
        best = max(best, _cos(u, r))
    ref_term = max(best, 0.0)
    if symmetric_scaling:
        ref_term *= w
    return harmonic_mean(l_clipscore(v0, u0, w), ref_term)


@dataclass
class ScoreRecord:
    pair_id: str
    l_clipscore: Optional[float]
    ref_l_clipscore: Optional[float] = None
    w: float = DEFAULT_W
    error: Optional[str] = None

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None or k in ("l_clipscore",)}


def content_hash(obj) -> str:
    h = hashlib.sha256()
    if isinstance(obj, str):
        h.update(b"s" + obj.encode())
    else:
        a = np.ascontiguousarray(np.asarray(obj, dtype=np.float32))
        h.update(b"a" + str(a.shape).encode() + a.tobytes())
    return h.hexdigest()


class BatchScorer:
    """Scores ``{"id", "image", "candidate", "refs"?}`` records with an encoder pair.

    ``features`` maps image keys to (N, P) patch arrays. Every distinct image
    and caption is encoded once; ``image_encodes``/``text_encodes`` count
    encoder invocations and ``cache_hits`` counts reuses.
    """

    def __init__(self, model, tokenizer, features: Mapping[str, np.ndarray], w: float = DEFAULT_W,
                 use_refs: bool = False, symmetric_scaling: bool = False):
        self.model, self.tokenizer, self.features = model, tokenizer, features
        self.w, self.use_refs, self.symmetric_scaling = w, use_refs, symmetric_scaling
        self._img: Dict[str, np.ndarray] = {}
        self._txt: Dict[str, np.ndarray] = {}
        self.image_encodes = self.text_encodes = self.cache_hits = 0
        self.failures: List[tuple] = []

    def image_embedding(self, key: str) -> np.ndarray:
        if key not in self.features:
            raise LCLIPError(f"no features for image {key!r}")
        patches = np.asarray(self.features[key])
        h = content_hash(patches)
        if h in self._img:
            self.cache_hits += 1
            return self._img[h]
        dtype = getattr(self.model, "dtype", torch.float64)
        with torch.no_grad():
            v0, _ = self.model.encode_image(torch.as_tensor(patches, dtype=dtype))
        self.image_encodes += 1
        self._img[h] = _vec(v0)
        return self._img[h]

    def text_embedding(self, text: str) -> np.ndarray:
        h = content_hash(text)
        if h in self._txt:
            self.cache_hits += 1
            return self._txt[h]
        ids = self.tokenizer.encode(text, strict=True)
        with torch.no_grad():
            u0, _ = self.model.encode_text(ids)
        self.text_encodes += 1
        self._txt[h] = _vec(u0)
        return self._txt[h]

    def score_one(self, rec: Mapping) -> ScoreRecord:
        v0 = self.image_embedding(rec["image"])
        u0 = self.text_embedding(rec["candidate"])
        s = l_clipscore(v0, u0, self.w)
        ref = None
        if self.use_refs:
            refs = rec.get("refs") or []
            ref = ref_l_clipscore(u0, [self.text_embedding(r) for r in refs], v0, self.w, self.symmetric_scaling)
        return ScoreRecord(str(rec["id"]), s, ref, self.w)

    def score(self, dataset: Iterable[Mapping]) -> List[ScoreRecord]:
        out = []
        for rec in dataset:
            try:
                out.append(self.score_one(rec))
            except (LCLIPError, KeyError) as exc:
                pid = str(rec.get("id", "?")) if isinstance(rec, Mapping) else "?"
                self.failures.append((pid, str(exc)))
                out.append(ScoreRecord(pid, None, None, self.w, error=str(exc)))
        return out


def batch_score(model, dataset: Iterable[Mapping], tokenizer=None, features=None, w: float = DEFAULT_W,
                use_refs: bool = False) -> List[ScoreRecord]:
    scorer = BatchScorer(model, tokenizer, features or {}, w, use_refs)
    return scorer.score(dataset)
