"""Deterministic planted-alignment data.

Every item is a latent assignment of values to up to four attribute slots
(noun, color, verb, place). Captions are template renderings of the
latents. Images are sets of patches, one noisy appearance vector per attribute
plus random distractor patches, in a random order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tokenizer import Tokenizer

GENERATOR_VERSION = 1

SLOTS = (
    ("noun", ("dog", "cat", "horse", "bird", "boy", "girl")),
    ("color", ("red", "blue", "green", "black", "white", "brown")),
    ("verb", ("runs", "sits", "jumps", "sleeps", "plays")),
    ("place", ("park", "street", "field", "beach", "yard")),
)
FUNCTION_WORDS = ("a", "the", "there", "is", "that", "in", "on")


def _t0(a):
    out = ["a"] + ([a["color"]] if "color" in a else []) + [a["noun"]]
    out += [a["verb"]] if "verb" in a else []
    out += ["in", "the", a["place"]] if "place" in a else []
    return out


def _t1(a):
    out = ["the"] + ([a["color"]] if "color" in a else []) + [a["noun"]]
    out += [a["verb"]] if "verb" in a else []
    out += ["in", "a", a["place"]] if "place" in a else []
    return out


def _t2(a):
    out = ["there", "is", "a"] + ([a["color"]] if "color" in a else []) + [a["noun"]]
    out += ["that", a["verb"]] if "verb" in a else []
    out += ["in", "the", a["place"]] if "place" in a else []
    return out


def _t3(a):
    out = ["a", a["noun"]] + (["that", "is", a["color"]] if "color" in a else [])
    out += [a["verb"]] if "verb" in a else []
    out += ["on", "the", a["place"]] if "place" in a else []
    return out


def _t4(a):
    out = ["in", "the", a["place"]] if "place" in a else []
    out += ["a"] + ([a["color"]] if "color" in a else []) + [a["noun"]]
    out += [a["verb"]] if "verb" in a else []
    return out


TEMPLATES = (_t0, _t1, _t2, _t3, _t4)


@dataclass
class World:
    """Attribute schema, vocabulary and the fixed patch appearance of every attribute value."""

    n_attributes: int = 4
    patch_dim: int = 32
    n_distractors: int = 2
    seed: int = 0
    appearance: np.ndarray = field(init=False, repr=False)
    complement: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.n_attributes <= len(SLOTS):
            raise ValueError(f"n_attributes must be in 1..{len(SLOTS)}")
        if self.patch_dim <= self.n_values:
            raise ValueError(f"patch_dim must exceed the {self.n_values} attribute values")
        rng = np.random.default_rng([GENERATOR_VERSION, self.seed, 7919])
        a = rng.standard_normal((self.n_values, self.patch_dim))
        self.appearance = a / np.linalg.norm(a, axis=1, keepdims=True)
        # distractors live in the orthogonal complement of the appearance span
        _, _, vt = np.linalg.svd(self.appearance)
        self.complement = vt[self.n_values:]

    @property
    def slots(self):
        return SLOTS[: self.n_attributes]

    @property
    def slot_offsets(self) -> List[int]:
        offs, o = [], 0
        for _, values in SLOTS:
            offs.append(o)
            o += len(values)
        return offs

    @property
    def n_values(self) -> int:
        return sum(len(v) for _, v in SLOTS)

    @property
    def n_patches(self) -> int:
        return self.n_attributes + self.n_distractors

    @property
    def attribute_words(self) -> List[str]:
        return [w for _, values in SLOTS for w in values]

    def value_index(self) -> Dict[str, int]:
        """Word -> global attribute value index."""
        return {w: i for i, w in enumerate(self.attribute_words)}

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(list(FUNCTION_WORDS) + self.attribute_words)

    def attributes(self, latent: Sequence[int]) -> Dict[str, str]:
        return {name: values[v] for (name, values), v in zip(self.slots, latent)}

    def render_caption(self, latent: Sequence[int], template: int = 0, omit: Sequence[str] = ()) -> str:
        attrs = {k: v for k, v in self.attributes(latent).items() if k not in omit}
        return " ".join(TEMPLATES[template](attrs))

    def render_image(self, latent: Sequence[int], noise: float, rng: np.random.Generator) -> np.ndarray:
        offs = self.slot_offsets
        rows = [self.appearance[offs[k] + v] for k, v in enumerate(latent)]
        for _ in range(self.n_distractors):
            c = rng.standard_normal(len(self.complement)) @ self.complement
            rows.append(c / np.linalg.norm(c))
        # noise is the expected norm of the per-patch perturbation
        jitter = rng.standard_normal((len(rows), self.patch_dim)) / np.sqrt(self.patch_dim)
        patches = np.stack(rows) + noise * jitter
        return patches[rng.permutation(len(rows))]

    def all_latents(self) -> List[tuple]:
        return list(itertools.product(*[range(len(v)) for _, v in self.slots]))


@dataclass
class PlantedCorpus:
    world: World
    latents: np.ndarray  # (n_items, n_attributes) slot-local value ids
    images: np.ndarray  # (n_items, n_patches, patch_dim)
    captions: List[str]
    references: List[List[str]]
    heldout: np.ndarray  # bool mask
    noise: float
    seed: int

    def __len__(self):
        return len(self.captions)

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.heldout)

    @property
    def heldout_idx(self) -> np.ndarray:
        return np.flatnonzero(self.heldout)

    def image_key(self, i: int) -> str:
        return f"img{i:05d}"

    def token_ids(self, i: int, tokenizer: Optional[Tokenizer] = None) -> List[int]:
        tok = tokenizer or self.world.tokenizer()
        return tok.encode(self.captions[i], strict=True)


def generate_corpus(
    n_items: int,
    n_attributes: int = 4,
    noise: float = 0.1,
    seed: int = 0,
    n_refs: int = 4,
    heldout_fraction: float = 0.25,
    world: Optional[World] = None,
    ref_drop: float = 0.0,
) -> PlantedCorpus:
    """Sample a corpus. ``ref_drop`` is the chance that a reference leaves out each non-noun attribute."""
    if n_items < 4:
        raise ValueError("n_items must be at least 4")
    if not 0.0 <= ref_drop < 1.0:
        raise ValueError("ref_drop must lie in [0, 1)")
    world = world or World(n_attributes=n_attributes)
    if world.n_attributes != n_attributes:
        raise ValueError("world and n_attributes disagree")
    rng = np.random.default_rng([GENERATOR_VERSION, seed])
    pool = world.all_latents()
    order = rng.permutation(len(pool))
    chosen = [pool[order[i % len(pool)]] for i in range(n_items)]
    distinct = sorted(set(chosen))
    # split by latent identity so heldout latents never appear in train
    dperm = rng.permutation(len(distinct))
    n_held = max(1, int(round(heldout_fraction * len(distinct)))) if heldout_fraction > 0 else 0
    held_latents = {distinct[j] for j in dperm[:n_held]}
    latents = np.array(chosen, dtype=np.int64)
    images = np.stack([world.render_image(l, noise, rng) for l in chosen]).astype(np.float32)
    captions = [world.render_caption(l, 0) for l in chosen]
    k = min(n_refs, len(TEMPLATES))
    references = []
    for l in chosen:
        tpl = rng.permutation(len(TEMPLATES))[:k]
        refs = []
        for t in tpl:
            omit = ()
            if ref_drop > 0:
                # the noun is never omitted so every reference stays grammatical
                omit = [name for name, _ in world.slots[1:] if rng.random() < ref_drop]
            refs.append(world.render_caption(l, int(t), omit))
        references.append(refs)
    heldout = np.array([l in held_latents for l in chosen])
    return PlantedCorpus(world, latents, images, captions, references, heldout, noise, seed)


def latent_overlap(a: Sequence[int], b: Sequence[int]) -> float:
    return float(np.mean([x == y for x, y in zip(a, b)]))


def generate_protocol_fixtures(corpus: PlantedCorpus, seed: int = 0) -> dict:
    """Pascal-style pairs, FOIL records and graded rating records built from a corpus.

    Pairs: HC two correct captions (choice: the gold template); HI correct vs.
    another item's caption; HM correct vs. a correct but less complete
    "machine" caption; MM incomplete-but-correct vs. one-wrong-attribute.
    FOIL captions swap exactly one attribute word. Ratings are
    ``1 + round(3 * overlap)`` of latent attributes.
    """
    world = corpus.world
    rng = np.random.default_rng([GENERATOR_VERSION, seed, 31])
    n = len(corpus)
    pairs, foils, ratings = [], [], []

    def wrong_latent(latent, slot):
        size = len(world.slots[slot][1])
        alt = list(latent)
        alt[slot] = (latent[slot] + 1 + int(rng.integers(size - 1))) % size
        return alt

    def drop_slot(latent):
        # a "machine" caption: correct words but the last attribute is omitted
        if len(latent) == 1:
            return world.render_caption(latent, 0)
        attrs = world.attributes(latent)
        attrs.pop(world.slots[len(latent) - 1][0])
        return " ".join(TEMPLATES[0](attrs))

    for i in range(n):
        latent = [int(v) for v in corpus.latents[i]]
        key = corpus.image_key(i)
        refs = corpus.references[i]
        cat = ("HC", "HI", "HM", "MM")[i % 4]
        if cat == "HC":
            good, other = world.render_caption(latent, 0), world.render_caption(latent, 1 + int(rng.integers(4)))
        elif cat == "HI":
            j = (i + 1 + int(rng.integers(n - 1))) % n
            while tuple(corpus.latents[j]) == tuple(corpus.latents[i]):
                j = (j + 1) % n
            good, other = world.render_caption(latent, 0), world.render_caption(corpus.latents[j], 0)
        elif cat == "HM":
            good, other = world.render_caption(latent, 0), drop_slot(latent)
        else:
            good, other = drop_slot(latent), world.render_caption(wrong_latent(latent, int(rng.integers(len(latent)))), 0)
        if good == other:
            other = world.render_caption(wrong_latent(latent, 0), 0)
        if rng.random() < 0.5:
            pairs.append({"image": key, "a": good, "b": other, "category": cat, "choice": "A", "refs": refs})
        else:
            pairs.append({"image": key, "a": other, "b": good, "category": cat, "choice": "B", "refs": refs})

        true = corpus.captions[i]
        foil = world.render_caption(wrong_latent(latent, 0), 0)
        foils.append({"image": key, "true": true, "foil": foil, "refs": refs})

        for r, j in enumerate([i] + [int(x) for x in rng.choice(n, size=2, replace=False)]):
            rating = 1 + int(round(3 * latent_overlap(corpus.latents[i], corpus.latents[j])))
            ratings.append({
                "id": f"{key}-c{r}",
                "image": key,
                "caption": corpus.captions[j],
                "refs": [x for x in refs],
                "rating": float(rating),
            })
    return {"pairs": pairs, "foils": foils, "ratings": ratings}


def features_records(corpus: PlantedCorpus) -> List[dict]:
    return [
        {"key": corpus.image_key(i), "patches": corpus.images[i].tolist()}
        for i in range(len(corpus))
    ]
