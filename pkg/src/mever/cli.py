"""Command line surface for the whole pipeline.

Subcommands: prepare, synth, train-retriever, build-index, retrieve,
train-joint, predict, evaluate, ablate, report. Exit codes: 0 success,
1 usage error, 2 runtime error. MEVER_DATA_DIR provides the default corpus
root; CLI flags override config-file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import datamodel, trainer
from .errors import MeverError
from .evalkit import MetricsReport, aggregate_reports, emit_report
from .pipeline import evidence_for_claim, predict_forward
from .retriever import load_index, retrieve, save_index
from .trainer import (
    TrainConfig,
    evaluate_split,
    freeze_and_retrieve,
    load_checkpoint,
    load_config_file,
    restore_joint,
    restore_retriever,
    run_ablation_matrix,
    save_checkpoint,
    train_joint,
    train_retriever,
)

COMMANDS = ("prepare", "synth", "train-retriever", "build-index", "retrieve",
            "train-joint", "predict", "evaluate", "ablate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mever", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p, data=True):
        if data:
            p.add_argument("--data", default=os.environ.get("MEVER_DATA_DIR"),
                           help="corpus root (default: $MEVER_DATA_DIR)")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out", help="output directory or file")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p, data=False)
    p.add_argument("--claims", type=int, default=16)
    p.add_argument("--evidence", type=int, default=8)
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--vocab", type=int, default=30)
    p.add_argument("--no-explanations", action="store_true")

    p = sub.add_parser("prepare", help="validate, align, and split a corpus")
    common(p)
    p.add_argument("--align", action="store_true",
                   help="attach top-k images to evidence lacking them")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.1)

    p = sub.add_parser("train-retriever", help="stage-1 contrastive training")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--ablate", default=None, help="comma-separated ablation flags")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("build-index", help="embed the evidence corpus")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("retrieve", help="rank evidence for every claim")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", default=None, help="prebuilt index file")
    p.add_argument("--k", type=int, default=3)

    p = sub.add_parser("train-joint", help="stage-2 joint training")
    common(p)
    p.add_argument("--retriever", default=None, help="stage-1 checkpoint")
    p.add_argument("--setting", choices=("gold", "retrieved"), default=None)
    p.add_argument("--lambda", dest="lambda_reg", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--ablate", default=None)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("predict", help="emit per-claim label + explanation")
    common(p)
    p.add_argument("--retriever", default=None)
    p.add_argument("--joint", required=True)
    p.add_argument("--setting", choices=("gold", "retrieved"), default="retrieved")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--split", default="test")

    p = sub.add_parser("evaluate", help="score a split and emit a report")
    common(p)
    p.add_argument("--retriever", default=None)
    p.add_argument("--joint", default=None)
    p.add_argument("--setting", choices=("gold", "retrieved"), default="retrieved")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--split", default="test")

    p = sub.add_parser("ablate", help="train and score every ablation toggle")
    common(p)
    p.add_argument("--setting", choices=("gold", "retrieved"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--lambda", dest="lambda_reg", type=float, default=None)
    p.add_argument("--split", default="test")

    p = sub.add_parser("report", help="emit plot-ready CSVs and figures")
    common(p, data=False)
    p.add_argument("--metrics", nargs="+", default=[], help="report JSON file(s)")
    p.add_argument("--ablation-table", default=None, help="ablations.csv from `ablate`")
    return parser


def _require_data(args) -> Path:
    if not args.data:
        raise UsageError("no corpus root: pass --data or set MEVER_DATA_DIR")
    return Path(args.data)


def _merge_config(args, overrides: dict) -> TrainConfig:
    mapping: dict = {}
    if getattr(args, "config", None):
        mapping.update(load_config_file(args.config))
    if args.seed is not None:
        mapping["seed"] = args.seed
    for key, value in overrides.items():
        if value is not None:
            mapping[key] = value
    return TrainConfig.from_mapping(mapping)


def _write_log(log, path: Path) -> None:
    path.write_text(json.dumps(log, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommand bodies

def _cmd_synth(args) -> int:
    dataset = datamodel.generate_synthetic(
        seed=args.seed if args.seed is not None else 7,
        n_claims=args.claims, n_evidence=args.evidence, n_images=args.images,
        vocab=args.vocab, with_explanations=not args.no_explanations)
    out = Path(args.out)
    datamodel.save_corpus(dataset, out)
    report = datamodel.validate_dataset(dataset)
    print(f"wrote {out} ({report.counts['claims']} claims, "
          f"{report.counts['evidence']} evidence, {report.counts['images']} images)")
    return 0


def _cmd_prepare(args) -> int:
    dataset = datamodel.load_corpus(_require_data(args))
    if args.align:
        dataset = datamodel.align_images(dataset, datamodel.mean_color_similarity,
                                         top_k=args.k)
    if not any(dataset.splits.values()):
        dataset = datamodel.split_dataset(dataset, args.train_frac, args.val_frac,
                                          args.seed if args.seed is not None else 0)
    report = datamodel.validate_dataset(dataset)
    if not report.ok:
        for rid, msg in report.errors:
            print(f"error: {rid}: {msg}", file=sys.stderr)
        return 2
    datamodel.save_corpus(dataset, Path(args.out))
    print(f"prepared corpus at {args.out}")
    return 0


def _cmd_train_retriever(args) -> int:
    dataset = datamodel.load_corpus(_require_data(args))
    config = _merge_config(args, {
        "max_epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.lr, "patience": args.patience,
        "ablations": args.ablate,
    })
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train_retriever(dataset, config, resume_from=resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "retriever.ckpt")
    _write_log(result.log, out / "retriever_log.json")
    best = max((h["metric"] for h in result.log), default=float("nan"))
    print(f"trained retriever for {len(result.log)} epochs; best val MAP {best:.4f}")
    return 0


def _cmd_build_index(args) -> int:
    dataset = datamodel.load_corpus(_require_data(args))
    encoder = restore_retriever(load_checkpoint(args.checkpoint))
    config = TrainConfig.from_mapping(load_checkpoint(args.checkpoint).config)
    from .retriever import build_index
    index = build_index(dataset, encoder, config.ablations)
    out = Path(args.out)
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "index.bin"
    save_index(index, out)
    print(f"indexed {len(index.evidence_ids)} evidence texts -> {out}")
    return 0


def _cmd_retrieve(args) -> int:
    dataset = datamodel.load_corpus(_require_data(args))
    ckpt = load_checkpoint(args.checkpoint)
    encoder = restore_retriever(ckpt)
    config = TrainConfig.from_mapping(ckpt.config)
    if args.index:
        index = load_index(args.index)
    else:
        from .retriever import build_index
        index = build_index(dataset, encoder, config.ablations)
    out = Path(args.out)
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "rankings.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        for claim in dataset.claims:
            ranked = retrieve(claim, dataset.images_for(claim), encoder, index,
                              args.k, config.ablations)
            fh.write(json.dumps({"claim_id": claim.id,
                                 "entries": [[e, s] for e, s in ranked.entries]}) + "\n")
    print(f"wrote rankings for {len(dataset.claims)} claims -> {out}")
    return 0


def _cmd_train_joint(args) -> int:
    dataset = datamodel.load_corpus(_require_data(args))
    config = _merge_config(args, {
        "max_epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.lr, "patience": args.patience,
        "ablations": args.ablate, "evidence_setting": args.setting,
        "lambda_reg": args.lambda_reg, "k_retrieved": args.k,
    })
    retrieved = None
    if config.evidence_setting == "retrieved":
        if not args.retriever:
            raise UsageError("retrieved setting needs --retriever checkpoint")
        encoder = restore_retriever(load_checkpoint(args.retriever))
        retrieved = freeze_and_retrieve(dataset, encoder, config.k_retrieved,
                                        config.ablations)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train_joint(dataset, retrieved, config, resume_from=resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "joint.ckpt")
    _write_log(result.log, out / "joint_log.json")
    best = max((h["metric"] for h in result.log), default=float("nan"))
    print(f"trained joint model for {len(result.log)} epochs; best val macro F1 {best:.4f}")
    return 0


def _load_models(args):
    joint = restore_joint(load_checkpoint(args.joint)) if args.joint else None
    encoder = restore_retriever(load_checkpoint(args.retriever)) if args.retriever else None
    return encoder, joint


def _cmd_predict(args) -> int:
    dataset = datamodel.load_corpus(_require_data(args))
    encoder, joint = _load_models(args)
    claims = dataset.split_claims(args.split) or list(dataset.claims)
    retrieved = None
    if args.setting == "retrieved":
        if encoder is None:
            raise UsageError("retrieved setting needs --retriever checkpoint")
        retrieved = freeze_and_retrieve(dataset, encoder, args.k)
    out = Path(args.out)
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "predictions.jsonl"
    cache: dict = {}
    written = 0
    with open(out, "w", encoding="utf-8") as fh:
        for claim in claims:
            records = evidence_for_claim(dataset, claim, args.setting, retrieved, args.k)
            if not records:
                continue
            pred = predict_forward(joint, dataset, claim, records, cache=cache)
            fh.write(json.dumps({"claim_id": pred.claim_id,
                                 "predicted_label": pred.predicted_label,
                                 "explanation": pred.explanation},
                                ensure_ascii=False) + "\n")
            written += 1
    print(f"wrote {written} predictions -> {out}")
    return 0


def _cmd_evaluate(args) -> int:
    dataset = datamodel.load_corpus(_require_data(args))
    encoder, joint = _load_models(args)
    if encoder is None and joint is None:
        raise UsageError("evaluate needs --retriever and/or --joint")
    report = evaluate_split(dataset, args.split, retriever=encoder, joint=joint,
                            setting=args.setting, k=args.k,
                            metadata={"dataset": str(args.data),
                                      "seed": args.seed if args.seed is not None else 0})
    json_path, table_path = emit_report(report, args.out)
    print(table_path.read_text(encoding="utf-8"))
    print(f"wrote {json_path} and {table_path}")
    return 0


_ABLATION_COLUMNS = ("ablation", "map", "macro_f1", "rougeL",
                     "d_map", "d_macro_f1", "d_rougeL")


def _cmd_ablate(args) -> int:
    dataset = datamodel.load_corpus(_require_data(args))
    config = _merge_config(args, {
        "max_epochs": args.epochs, "evidence_setting": args.setting,
        "lambda_reg": args.lambda_reg, "k_retrieved": args.k,
    })
    rows = run_ablation_matrix(dataset, config, split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablations.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k))
                             for k in _ABLATION_COLUMNS})
    for row in rows:
        cells = " ".join(
            f"{k}={row[k]:.4f}" for k in ("map", "macro_f1") if row.get(k) is not None)
        print(f"{row['ablation']:<20} {cells}")
    print(f"wrote {table}")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = []

    if args.metrics:
        reports = [MetricsReport.from_dict(json.loads(Path(p).read_text(encoding="utf-8")))
                   for p in args.metrics]
        if len(reports) > 1:
            merged = aggregate_reports(reports)["mean"]
        else:
            merged = reports[0].to_dict()
        retrieval = merged.get("retrieval") or {}
        if retrieval:
            rows = [{"k": int(k), "precision": retrieval["p_at"][k],
                     "recall": retrieval["r_at"][k]}
                    for k in sorted(retrieval.get("p_at", {}), key=int)]
            curve = out / "kappa_curve.csv"
            with open(curve, "w", newline="", encoding="utf-8") as fh:
                writer = csv.DictWriter(fh, fieldnames=("k", "precision", "recall"))
                writer.writeheader()
                writer.writerows(rows)
            from .plots import render_kappa_curve
            wrote += [curve, render_kappa_curve(rows, out / "kappa_curve.png")]
        emit_report(reports, out, name="combined")
        wrote += [out / "combined.json", out / "combined.txt"]

    if args.ablation_table:
        with open(args.ablation_table, newline="", encoding="utf-8") as fh:
            rows = []
            for raw in csv.DictReader(fh):
                row = {"ablation": raw["ablation"]}
                for key in ("map", "macro_f1", "rougeL"):
                    row[key] = float(raw[key]) if raw.get(key) else None
                rows.append(row)
        bars = out / "ablation_bars.csv"
        with open(bars, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=("ablation", "map", "macro_f1", "rougeL"))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if row.get(k) is None else row.get(k))
                                 for k in ("ablation", "map", "macro_f1", "rougeL")})
        from .plots import render_ablation_bars
        wrote += [bars, render_ablation_bars(rows, out / "ablation_bars.png")]

    if not wrote:
        raise UsageError("report needs --metrics and/or --ablation-table")
    print("wrote " + ", ".join(str(p) for p in wrote))
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "prepare": _cmd_prepare,
    "train-retriever": _cmd_train_retriever,
    "build-index": _cmd_build_index,
    "retrieve": _cmd_retrieve,
    "train-joint": _cmd_train_joint,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand")
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print(f"subcommands: {', '.join(COMMANDS)}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except MeverError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
