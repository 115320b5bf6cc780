"""Command-line entry point: ``python -m lclipscore <command>``.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure during training, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np
import torch

from . import config as config_mod
from .checkpoint import atomic_write_text, config_hash, dumps_json, load_model
from .errors import (CheckpointError, ConfigError, ContractError, DataError, LCLIPError, TokenizationError,
                     TrainingFailure)
from .evalstats import FoilRecord, PairRecord, RatingRecord, foil_accuracy, kendall_tau_b, kendall_tau_c, pascal_accuracy
from .metric import BatchScorer
from .pipeline import model_scorer, run_captioner, run_distill
from .tokenizer import Tokenizer

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
REPORT_FIELDS = ("protocol", "statistic", "value", "n", "HC", "HI", "HM", "MM", "ref_mode", "scorer", "config_hash")

SCHEMAS = {
    "score": {"id": (str, int), "image": str, "candidate": str},
    "ratings": {"id": (str, int), "rating": (int, float)},
    "pairs": {"image": str, "a": str, "b": str, "category": str, "choice": str},
    "foil": {"image": str, "true": str, "foil": str},
    "features": {"key": str, "patches": list},
}


# ---------------------------------------------------------------- I/O helpers


def iter_jsonl(path, schema: Mapping[str, object]) -> Iterator[dict]:
    """Yield records, rejecting bad JSON or missing/mistyped fields with the line number."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            for field, typ in schema.items():
                if field not in rec:
                    raise DataError(f"{path}:{lineno}: missing required field {field!r}")
                if not isinstance(rec[field], typ) or isinstance(rec[field], bool):
                    raise DataError(f"{path}:{lineno}: field {field!r} has the wrong type")
            if "refs" in rec and not (isinstance(rec["refs"], list) and all(isinstance(r, str) for r in rec["refs"])):
                raise DataError(f"{path}:{lineno}: 'refs' must be a list of strings")
            yield rec


def read_jsonl(path, schema) -> List[dict]:
    return list(iter_jsonl(path, schema))


def jsonl_text(records: Sequence[Mapping]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def read_features(path) -> Dict[str, np.ndarray]:
    feats = {}
    for rec in iter_jsonl(path, SCHEMAS["features"]):
        feats[rec["key"]] = np.asarray(rec["patches"], dtype=np.float32)
    return feats


def file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_scoring_model(path):
    model, manifest = load_model(path, dtype=torch.float64)
    vocab = manifest["extra"].get("vocab")
    if vocab is None:
        raise CheckpointError(f"{path}: checkpoint carries no tokenizer vocabulary")
    if manifest["kind"] != "lclip":
        raise CheckpointError(f"{path}: expected an image-text model checkpoint, found {manifest['kind']!r}")
    return model, Tokenizer.from_json(vocab), manifest


def append_report_row(run_dir: Path, row: Mapping, manifest: Mapping) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    rpath = run_dir / "report.csv"
    rows = []
    if rpath.exists():
        with open(rpath, newline="") as fh:
            rows = list(csv.DictReader(fh))
    rows.append({k: row.get(k, "") for k in REPORT_FIELDS})
    atomic_write_text(rpath, _csv_text(rows))
    mpath = run_dir / "run.json"
    runs = json.loads(mpath.read_text()) if mpath.exists() else {"command": "eval", "evaluations": []}
    runs.setdefault("evaluations", []).append(dict(manifest))
    atomic_write_text(mpath, dumps_json(runs))


def _csv_text(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in REPORT_FIELDS})
    return buf.getvalue()


def _num(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- commands


def _resolve_config(path, defaults, seed):
    cfg = config_mod.load(path, defaults) if path else config_mod.resolve(defaults)
    return config_mod.with_overrides(cfg, seed=seed)


def cmd_distill(args) -> int:
    cfg = _resolve_config(args.config, config_mod.DISTILL_DEFAULTS, args.seed)
    m = run_distill(cfg, out_dir=args.out, resume=args.resume)
    print(f"held-out R@1 {m['r1_stage1']:.4f} -> {m['r1_final']:.4f}; "
          f"diag margin {m['margin_stage1']:.4f} -> {m['margin_final']:.4f}; wrote {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    model, tok, manifest = _load_scoring_model(args.checkpoint)
    records = read_jsonl(args.pairs, SCHEMAS["score"])
    feats = read_features(args.features) if args.features else {}
    chash = config_hash({"checkpoint": manifest["config_hash"], "w": args.w, "refs": args.refs,
                         "symmetric_scaling": args.symmetric_scaling})
    scorer = BatchScorer(model, tok, feats, args.w, args.refs, args.symmetric_scaling)
    out = []
    for rec, res in zip(records, scorer.score(records)):
        line = {"id": rec["id"], "w": args.w, "config_hash": chash}
        if res.error is not None:
            line["error"] = res.error
        else:
            line["l_clipscore"] = res.l_clipscore
            if args.refs:
                line["ref_l_clipscore"] = res.ref_l_clipscore
        out.append(line)
    atomic_write_text(args.out, jsonl_text(out))
    for pid, msg in scorer.failures:
        print(f"record {pid}: {msg}", file=sys.stderr)
    print(f"scored {len(out) - len(scorer.failures)}/{len(out)} records "
          f"({scorer.image_encodes} image and {scorer.text_encodes} caption encodes, {scorer.cache_hits} cache hits)")
    return EXIT_OK


def _protocol_scorer(args, records) -> Callable:
    if args.scorer == "constant":
        return lambda image, caption, refs: 0.0
    if args.scorer == "oracle":
        preferred = set()
        for r in records:
            if isinstance(r, PairRecord):
                preferred.add((r.image_id, r.caption_a if r.human_choice == "A" else r.caption_b))
            else:
                preferred.add((r.image_id, r.true_caption))
        return lambda image, caption, refs: 1.0 if (image, caption) in preferred else 0.0
    if not args.checkpoint or not args.features:
        raise ConfigError("--scorer model needs --checkpoint and --features")
    model, tok, _ = _load_scoring_model(args.checkpoint)
    return model_scorer(model, tok, read_features(args.features), args.w, args.use_refs)


def cmd_eval(args) -> int:
    proto = args.protocol
    ident = {"protocol": proto, "data": file_sha(args.data), "scorer": args.scorer, "w": args.w,
             "use_refs": args.use_refs, "ref_mode": args.ref_mode}
    if args.checkpoint and args.scorer == "model":
        ident["checkpoint"] = json.loads((Path(args.checkpoint) / "manifest.json").read_text())["config_hash"]
    if args.scores:
        ident["scores"] = file_sha(args.scores)
    row = {"protocol": proto, "scorer": args.scorer, "ref_mode": ""}

    if proto in ("kendall-b", "kendall-c"):
        raw = read_jsonl(args.data, SCHEMAS["ratings"])
        if args.scores:
            field = "ref_l_clipscore" if args.use_refs else "l_clipscore"
            by_id = {str(r["id"]): r for r in read_jsonl(args.scores, {"id": (str, int)})}
            for rec in raw:
                s = by_id.get(str(rec["id"]))
                if s is None or field not in s:
                    raise DataError(f"no {field} score for rating id {rec['id']!r}")
                rec["score"] = s[field]
        for i, rec in enumerate(raw, 1):
            if not isinstance(rec.get("score"), (int, float)):
                raise DataError(f"{args.data}:{i}: missing numeric 'score' (pass --scores)")
        records = [RatingRecord.from_json(r) for r in raw]
        h = [r.human_rating for r in records]
        s = [r.metric_score for r in records]
        stat, value = ("tau_b", kendall_tau_b(h, s)) if proto == "kendall-b" else ("tau_c", kendall_tau_c(h, s))
        row.update(statistic=stat, value=_num(value), n=len(records), scorer="scores")
        ident["scorer"] = "scores"
    elif proto == "pascal":
        records = [PairRecord.from_json(r) for r in read_jsonl(args.data, SCHEMAS["pairs"])]
        acc = pascal_accuracy(records, _protocol_scorer(args, records))
        row.update(statistic="accuracy", value=_num(acc["mean"]), n=len(records),
                   **{c: _num(acc[c]) for c in ("HC", "HI", "HM", "MM") if c in acc})
    elif proto == "foil":
        records = [FoilRecord.from_json(r) for r in read_jsonl(args.data, SCHEMAS["foil"])]
        acc = foil_accuracy(records, _protocol_scorer(args, records), args.ref_mode)
        row.update(statistic="accuracy", value=_num(acc), n=len(records), ref_mode=args.ref_mode)
    else:  # argparse restricts choices
        raise ConfigError(f"unknown protocol {proto!r}")
    row["config_hash"] = config_hash(ident)
    append_report_row(Path(args.out), row, dict(ident, config_hash=row["config_hash"]))
    print(f"{proto}: {row['statistic']} = {row['value']} (n={row['n']})")
    return EXIT_OK


def cmd_train_captioner(args) -> int:
    cfg = _resolve_config(args.config, config_mod.CAPTION_DEFAULTS, args.seed)
    if args.alpha is not None:
        cfg["reward"]["alpha"] = float(args.alpha)
    if not 0.0 <= cfg["reward"]["alpha"] <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {cfg['reward']['alpha']}")
    res = run_captioner(cfg, out_dir=args.out)
    final = next(iter(res.values()))["final"]
    print(f"alpha {cfg['reward']['alpha']}: CIDEr-D {final['cider']:.4f}, L-CLIPScore {final['lclipscore']:.4f}, "
          f"repetition {final['repetition_rate']:.4f}; wrote {args.out}")
    return EXIT_OK


def _rows_from_run(run_dir: Path) -> List[dict]:
    mpath = run_dir / "run.json"
    if not mpath.exists():
        raise DataError(f"{run_dir}: no run.json manifest")
    manifest = json.loads(mpath.read_text())
    rpath = run_dir / "report.csv"
    if rpath.exists():
        with open(rpath, newline="") as fh:
            return [{k: r.get(k, "") for k in REPORT_FIELDS} for r in csv.DictReader(fh)]
    cmd, chash = manifest.get("command"), manifest.get("config_hash", "")
    stats = manifest.get("metrics") or manifest.get("final") or {}
    return [{"protocol": cmd, "statistic": k, "value": _num(v), "n": "", "config_hash": chash}
            for k, v in sorted(stats.items()) if isinstance(v, (int, float)) and k != "epoch"]


def cmd_report(args) -> int:
    merged: Dict[tuple, dict] = {}
    for d in args.runs:
        for r in _rows_from_run(Path(d)):
            merged.setdefault((r["protocol"], r["statistic"], r["config_hash"], r.get("ref_mode", "")), r)
    rows = sorted(merged.values(), key=lambda r: (r["protocol"], r["config_hash"], r["statistic"], r.get("ref_mode", "")))
    atomic_write_text(args.out, _csv_text(rows))
    protocols: Dict[str, int] = {}
    for r in rows:
        protocols[r["protocol"]] = protocols.get(r["protocol"], 0) + 1
    summary = {"rows": len(rows), "runs": sorted({str(Path(d)) for d in args.runs}), "protocols": protocols}
    summary_path = args.summary or str(Path(args.out).with_suffix(".json"))
    atomic_write_text(summary_path, dumps_json(summary))
    print(f"merged {len(rows)} rows from {len(set(args.runs))} run directories into {args.out}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    from . import golden

    if args.check:
        drift = golden.check_golden(args.check)
        if drift:
            for name in drift:
                print(f"golden fixture drifted: {name}", file=sys.stderr)
            print("regenerate with --regenerate and bump the generator version if the change is intended",
                  file=sys.stderr)
            return EXIT_CONFIG
        print(f"golden fixtures in {args.check} are current")
        return EXIT_OK
    if args.regenerate:
        written = golden.write_golden(args.regenerate)
        print(f"wrote {len(written)} golden files to {args.regenerate}")
        return EXIT_OK
    if not args.out:
        raise ConfigError("fixtures needs --out, --check or --regenerate")
    written = golden.write_protocol_files(args.out, n_items=args.n_items, seed=args.seed, noise=args.noise)
    print(f"wrote {', '.join(sorted(written))} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lclipscore", description="Compressed image-text scoring toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", help="two-stage distillation on the planted corpus")
    d.add_argument("--config", help="JSON run config (defaults apply to omitted keys)")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True, help="run directory")
    d.add_argument("--resume", action="store_true", help="reuse a matching stage-1 checkpoint in --out")
    d.set_defaults(func=cmd_distill)

    s = sub.add_parser("score", help="score candidate captions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pairs", required=True, help='JSONL {"id","image","candidate","refs"?}')
    s.add_argument("--features", help='JSONL {"key","patches"}')
    s.add_argument("--out", required=True)
    s.add_argument("--w", type=float, default=2.5)
    s.add_argument("--refs", action="store_true", help="also emit the reference-augmented score")
    s.add_argument("--symmetric-scaling", action="store_true")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="run an evaluation protocol and append a report row")
    e.add_argument("--protocol", required=True, choices=("kendall-b", "kendall-c", "pascal", "foil"))
    e.add_argument("--data", required=True)
    e.add_argument("--scores", help="scores JSONL joined to ratings by id")
    e.add_argument("--checkpoint")
    e.add_argument("--features")
    e.add_argument("--scorer", choices=("model", "oracle", "constant"), default="model")
    e.add_argument("--ref-mode", choices=("none", "1-ref", "4-ref"), default="none")
    e.add_argument("--use-refs", action="store_true", help="score with the reference-augmented metric")
    e.add_argument("--w", type=float, default=2.5)
    e.add_argument("--out", required=True, help="run directory receiving report.csv")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train-captioner", help="cross-entropy then self-critical captioner training")
    t.add_argument("--config")
    t.add_argument("--alpha", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_captioner)

    r = sub.add_parser("report", help="merge run directories into one CSV and JSON summary")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--summary")
    r.set_defaults(func=cmd_report)

    f = sub.add_parser("fixtures", help="write protocol fixture files or manage golden fixtures")
    f.add_argument("--out")
    f.add_argument("--n-items", type=int, default=64)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--noise", type=float, default=0.1)
    f.add_argument("--check", metavar="DIR")
    f.add_argument("--regenerate", metavar="DIR")
    f.set_defaults(func=cmd_fixtures)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except TrainingFailure as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DataError, ContractError, TokenizationError, LCLIPError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
