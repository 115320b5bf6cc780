"""End-to-end runs on the planted corpus: distillation and captioner training."""

from __future__ import annotations

import copy
import csv
import io
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .captioner import (CaptionerConfig, CaptionTrainConfig, RewardConfig, build_caption_task, finetune_scst,
                        pretrain_captioner, write_scst_log)
from .checkpoint import atomic_write_text, config_hash, dumps_json, load_model, read_manifest, save_model
from .distill import (StageConfig, diag_margin, heldout_r1, make_synthetic_teacher, student_from_teacher,
                      train_stage1, train_stage2)
from .encoder import EncoderConfig, build_model
from .metric import BatchScorer
from .synthetic import World, generate_corpus

LOSS_FIELDS = ("stage", "step", "epoch", "loss_total", "loss_sr", "loss_d")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def build_data(cfg: Mapping):
    """Planted corpus and synthetic teacher for a resolved config; both are seeded by ``cfg["seed"]``."""
    d, seed = cfg["data"], cfg["seed"]
    world = World(n_attributes=d["n_attributes"])
    corpus = generate_corpus(d["n_items"], d["n_attributes"], d["noise"], seed, d["n_refs"],
                             d["heldout_fraction"], world, ref_drop=d["ref_drop"])
    teacher = make_synthetic_teacher(cfg["teacher"]["joint_dim"], seed, world, d=cfg["teacher"]["d"])
    return corpus, teacher


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def losscurve_text(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in LOSS_FIELDS])
    return buf.getvalue()


def read_losscurve(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    conv = {"stage": int, "step": int, "epoch": int}
    return [{k: conv.get(k, float)(v) for k, v in r.items()} for r in rows]


def run_distill(cfg: Mapping, out_dir=None, resume: bool = False) -> Dict[str, float]:
    """Stage 1 then stage 2. With ``out_dir``, writes checkpoints, ``losscurve.csv`` and ``run.json``.

    ``resume`` reuses a stage-1 checkpoint from ``out_dir`` written under the same config hash.
    """
    chash = config_hash(cfg)
    seed = cfg["seed"]
    dtype = _DTYPES[cfg["student"]["dtype"]]
    corpus, teacher = build_data(cfg)
    captions = [corpus.token_ids(i) for i in range(len(corpus))]
    tr, ho = corpus.train_idx, corpus.heldout_idx
    tr_caps, ho_caps = [captions[i] for i in tr], [captions[i] for i in ho]
    st = cfg["student"]
    out = Path(out_dir) if out_dir is not None else None

    rows1 = None
    if resume and out is not None and (out / "stage1").exists():
        if read_manifest(out / "stage1")["extra"].get("config_hash") == chash:
            student, _ = load_model(out / "stage1", dtype=dtype)
            rows1 = [r for r in read_losscurve(out / "losscurve.csv") if r["stage"] == 1]
    if rows1 is None:
        student = build_model(EncoderConfig(**st["vision"]), EncoderConfig(**st["text"]), teacher.vocab, st["rank"],
                              cfg["teacher"]["joint_dim"], seed, patch_dim=corpus.world.patch_dim, dtype=dtype)
        student_from_teacher(student, teacher)
        s1 = StageConfig(1, seed=seed, **cfg["stage1"])
        student, curve = train_stage1(student, teacher, corpus.images[tr], tr_caps, s1)
        rows1 = [dict(r, stage=1) for r in curve]
        if out is not None:
            save_model(out / "stage1", student, seed, extra={"config_hash": chash, "stage": 1})
            atomic_write_text(out / "losscurve.csv", losscurve_text(rows1))

    metrics = {"r1_stage1": heldout_r1(student, corpus.images[ho], ho_caps),
               "margin_stage1": diag_margin(student, teacher, corpus.images[tr], tr_caps)}
    s2 = StageConfig(2, seed=seed, **cfg["stage2"])
    student, curve2 = train_stage2(student, teacher, (corpus.images[tr], tr_caps), s2)
    offset = len(rows1)
    rows = rows1 + [dict(r, stage=2, step=r["step"] + offset) for r in curve2]
    metrics.update({"r1_final": heldout_r1(student, corpus.images[ho], ho_caps),
                    "margin_final": diag_margin(student, teacher, corpus.images[tr], tr_caps),
                    "loss_initial": rows[0]["loss_total"] if rows else None,
                    "loss_final_stage1": rows1[-1]["loss_total"] if rows1 else None})
    if out is not None:
        extra = {"config_hash": chash, "stage": 2, "vocab": corpus.world.tokenizer().to_json()}
        save_model(out / "checkpoint", student, seed, extra=extra)
        atomic_write_text(out / "losscurve.csv", losscurve_text(rows))
        atomic_write_text(out / "run.json", dumps_json(
            {"command": "distill", "config": cfg, "config_hash": chash, "metrics": metrics}))
    metrics["model"] = student
    return metrics


def caption_configs(cfg: Mapping, vocab: int, vision_dim: int):
    c, t = cfg["captioner"], cfg["train"]
    cap = CaptionerConfig(vocab=vocab, vision_dim=vision_dim, seed=cfg["seed"], **c)
    train = CaptionTrainConfig(seed=cfg["seed"], **t)
    return cap, train


def run_captioner(cfg: Mapping, out_dir=None, alphas: Optional[Sequence[float]] = None) -> Dict[float, dict]:
    """Cross-entropy pretraining once, then one self-critical run per alpha from the same start.

    Returns ``{alpha: {"log": rows, "final": last row, "model": captioner}}``.
    """
    corpus, teacher = build_data(cfg)
    tok = teacher.tokenizer
    task = build_caption_task(corpus, teacher, tok)
    cap_cfg, train_cfg = caption_configs(cfg, len(tok), task.V.shape[-1])
    base, xe_losses = pretrain_captioner(task, cap_cfg, train_cfg)
    alphas = [cfg["reward"]["alpha"]] if alphas is None else list(alphas)
    out = Path(out_dir) if out_dir is not None else None
    results = {}
    for a in alphas:
        rcfg = RewardConfig(**dict(cfg["reward"], alpha=float(a)))
        run_cfg = copy.deepcopy(dict(cfg))
        run_cfg["reward"]["alpha"] = float(a)
        chash = config_hash(run_cfg)
        model = copy.deepcopy(base)
        rows = finetune_scst(model, task, teacher, rcfg, train_cfg)
        results[float(a)] = {"log": rows, "final": rows[-1], "model": model, "xe_losses": xe_losses}
        if out is not None:
            d = out if len(alphas) == 1 else out / f"alpha_{a}"
            d.mkdir(parents=True, exist_ok=True)
            buf = io.StringIO()
            write_scst_log(buf, rows)
            atomic_write_text(d / "scst_log.csv", buf.getvalue())
            extra = {"config_hash": chash, "vocab": tok.to_json()}
            save_model(d / "checkpoint_xe", base, cfg["seed"], extra=extra)
            save_model(d / "checkpoint", model, cfg["seed"], extra=extra)
            atomic_write_text(d / "run.json", dumps_json(
                {"command": "train-captioner", "config": run_cfg, "config_hash": chash,
                 "xe_losses": xe_losses, "final": rows[-1]}))
    return results


def model_scorer(model, tokenizer, features: Mapping[str, np.ndarray], w: float = 2.5,
                 use_refs: bool = False) -> Callable[[str, str, Sequence[str]], float]:
    """Adapter from an encoder pair to the ``scorer(image_id, caption, refs)`` protocol interface."""
    bs = BatchScorer(model, tokenizer, features, w, use_refs)

    def score(image_id, caption, refs):
        r = bs.score_one({"id": "", "image": image_id, "candidate": caption, "refs": list(refs)})
        return r.ref_l_clipscore if use_refs else r.l_clipscore

    score.scorer = bs
    return score
