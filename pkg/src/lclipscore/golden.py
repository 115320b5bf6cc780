"""Committed golden fixtures: generation, regeneration and drift checks.

Every file records the generator version and seed it came from. ``check_golden``
regenerates in memory and reports files whose bytes differ.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List

import torch

from .checkpoint import atomic_write_text, dumps_json
from .synthetic import GENERATOR_VERSION, features_records, generate_corpus, generate_protocol_fixtures

GOLDEN_VERSION = 1
PROTOCOL_SEED = 0
PROTOCOL_ITEMS = 16


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def protocol_files(n_items: int = PROTOCOL_ITEMS, seed: int = PROTOCOL_SEED, noise: float = 0.1) -> Dict[str, str]:
    """Feature, candidate, pair, FOIL and rating JSONL files for a planted corpus."""
    corpus = generate_corpus(n_items, noise=noise, seed=seed)
    fx = generate_protocol_fixtures(corpus, seed)
    candidates = [{"id": r["id"], "image": r["image"], "candidate": r["caption"], "refs": r["refs"]}
                  for r in fx["ratings"]]
    ratings = [{"id": r["id"], "rating": r["rating"]} for r in fx["ratings"]]
    meta = {"generator_version": GENERATOR_VERSION, "seed": seed, "n_items": n_items, "noise": noise}
    return {
        "features.jsonl": _jsonl(features_records(corpus)),
        "candidates.jsonl": _jsonl(candidates),
        "ratings.jsonl": _jsonl(ratings),
        "pairs.jsonl": _jsonl(fx["pairs"]),
        "foils.jsonl": _jsonl(fx["foils"]),
        "meta.json": dumps_json(meta),
    }


def write_protocol_files(out_dir, n_items: int = 64, seed: int = 0, noise: float = 0.1) -> List[str]:
    files = protocol_files(n_items, seed, noise)
    for name, text in files.items():
        atomic_write_text(Path(out_dir) / name, text)
    return list(files)


def _frozen_measurements() -> Dict[str, str]:
    from .captioner import Captioner, CaptionerConfig, sample_caption
    from .distill import (StageConfig, diag_margin, heldout_r1, make_synthetic_teacher, student_from_teacher,
                          train_stage1, train_stage2)
    from .encoder import EncoderConfig, build_model, parameter_count
    from .ngram import build_idf

    out = {}
    # n-gram statistics of a two-image corpus
    idf = build_idf([["a b c d"], ["a b e f"]])
    out["ngram_toy.json"] = dumps_json({"generator_version": GENERATOR_VERSION, "seed": None, **idf.to_json()})

    # parameter counts of the desk-scale student and its unshared twin
    counts = {}
    for name, (v, t) in {"student": ((6, 3), (4, 2)), "unshared": ((6, 6), (4, 4))}.items():
        m = build_model(EncoderConfig(v[0], v[1], 32, 4, 64, 8), EncoderConfig(t[0], t[1], 32, 4, 64, 12),
                        33, 8, 32, 0, dtype=torch.float32, device="meta")
        counts[name] = dict(parameter_count(m, 2))
    toy = build_model(EncoderConfig(2, 1, 8, 2, 16, 4), EncoderConfig(2, 1, 16, 2, 32, 8), 100, 4, 16, 0,
                      patch_dim=6, dtype=torch.float32, device="meta")
    counts["toy_text"] = dict(parameter_count(toy.text, 1))
    out["param_counts.json"] = dumps_json({"generator_version": GENERATOR_VERSION, "seed": None, **counts})

    # seeded multinomial decode of an untrained tiny captioner
    cfg = CaptionerConfig(vocab=12, vision_dim=6, layers=1, dim=8, heads=2, max_len=8, seed=0)
    model = Captioner(cfg, dtype=torch.float64)
    V = torch.linspace(-1, 1, 4 * 6, dtype=torch.float64).reshape(4, 6)
    toks, lps = sample_caption(model, V, "multinomial", seed=3)
    out["caption_sample.json"] = dumps_json({"generator_version": GENERATOR_VERSION, "seed": 3, "model_seed": 0,
                                             "tokens": toks, "log_probs": lps})

    # planted pairs: teacher retrieval and matched vs unmatched similarity
    corpus = generate_corpus(256, noise=0.2, seed=0)
    teacher = make_synthetic_teacher(32, 0, corpus.world)
    caps = [corpus.token_ids(i) for i in range(len(corpus))]
    with torch.no_grad():
        v0, _ = teacher.encode_images(torch.as_tensor(corpus.images, dtype=torch.float64))
        u0, _ = teacher.encode_texts(caps)
    S = v0 @ u0.T
    n = S.shape[0]
    out["teacher_r1.json"] = dumps_json({
        "generator_version": GENERATOR_VERSION, "seed": 0, "n_items": n, "noise": 0.2,
        "r1": heldout_r1(teacher, corpus.images, caps),
        "matched_mean": float(S.diagonal().mean()),
        "unmatched_mean": float((S.sum() - S.diagonal().sum()) / (n * (n - 1)))})

    # seeded toy distillation: stage 1 loss curve ends and the stage-2 diagonal margin
    tr = corpus.train_idx
    tr_caps = [caps[i] for i in tr]
    student = build_model(EncoderConfig(2, 1, 32, 4, 32, 8), EncoderConfig(2, 1, 32, 4, 32, 12), teacher.vocab, 4,
                          32, 0, patch_dim=corpus.world.patch_dim, dtype=torch.float64)
    student_from_teacher(student, teacher)
    student, c1 = train_stage1(student, teacher, corpus.images[tr], tr_caps, StageConfig(1, 2e-3, 32, 34, seed=0))
    m0 = diag_margin(student, teacher, corpus.images[tr], tr_caps)
    student, c2 = train_stage2(student, teacher, (corpus.images[tr], tr_caps),
                               StageConfig(2, 5e-4, 4, 5, freeze_text=True, seed=0, augmentation=True))
    out["distill_toy.json"] = dumps_json({
        "generator_version": GENERATOR_VERSION, "seed": 0, "stage1_steps": len(c1),
        "stage1_loss_initial": c1[0]["loss_total"], "stage1_loss_final": c1[-1]["loss_total"],
        "stage2_steps": len(c2), "margin_start": m0,
        "margin_end": diag_margin(student, teacher, corpus.images[tr], tr_caps)})
    return out


def generate_golden() -> Dict[str, str]:
    files = {f"protocol/{k}": v for k, v in protocol_files().items()}
    files.update(_frozen_measurements())
    return files


def write_golden(root) -> List[str]:
    root = Path(root)
    files = generate_golden()
    for name, text in files.items():
        atomic_write_text(root / name, text)
    return sorted(files)


def check_golden(root) -> List[str]:
    """Names of golden files that are missing or differ from a fresh regeneration."""
    root = Path(root)
    drift = []
    for name, text in generate_golden().items():
        p = root / name
        if not p.exists() or p.read_text() != text:
            drift.append(name)
    return sorted(drift)
