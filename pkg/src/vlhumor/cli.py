"""Command-line entry point for the full pipeline.

Subcommands: synth-data, prep, pretrain, finetune, eval, inspect, protocol.
Each reads an optional YAML config, applies dotted ``--set key=value``
overrides (unknown keys fail before any work), writes its artifacts plus a
fully resolved ``resolved.yaml`` and an ``artifacts.json`` listing, and
exits 0 only if everything landed on disk.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import (
    RunConfig,
    apply_overrides,
    load_config_file,
    resolve_run_config,
    run_config_to_dict,
    save_config,
)

log = logging.getLogger("vlhumor")

OUT_ROOT_ENV = "VLHUMOR_OUT_ROOT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlhumor", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override, repeatable")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="root seed (overrides seed)")

    p = sub.add_parser("synth-data", help="generate the synthetic corpus")
    common(p)

    p = sub.add_parser("prep", help="preprocess a raw corpus")
    common(p)
    p.add_argument("--corpus", help="raw corpus directory (overrides data.corpus_dir)")
    p.add_argument("--vocab", help="reuse an existing vocab.json instead of rebuilding")

    p = sub.add_parser("pretrain", help="contrastive pre-training on unlabeled samples")
    common(p)
    p.add_argument("--data", help="prepared corpus directory (overrides data.prep_dir)")
    p.add_argument("--modality", help="modality mask, e.g. V+A+T+C")
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("finetune", help="supervised fine-tuning on the labeled splits")
    common(p)
    p.add_argument("--data", help="prepared corpus directory")
    p.add_argument("--modality", help="modality mask")
    p.add_argument("--init", help="checkpoint to initialize from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    common(p)
    p.add_argument("--data", help="prepared corpus directory")
    p.add_argument("--modality", help="modality mask")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))

    p = sub.add_parser("inspect", help="attention and embedding diagnostics")
    common(p)
    p.add_argument("--data", help="prepared corpus directory")
    p.add_argument("--modality", help="modality mask")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    p.add_argument("--limit", type=int, default=32, help="max samples to average over")

    p = sub.add_parser("protocol", help="multi-seed fine-tuning with trimmed aggregation")
    common(p)
    p.add_argument("--data", help="prepared corpus directory")
    p.add_argument("--modality", help="modality mask")
    p.add_argument("--init", help="checkpoint to initialize every run from")
    p.add_argument("--runs", type=int, help="number of runs (default from config)")
    return parser


def _flag_overrides(args) -> list[str]:
    items = []
    if args.seed is not None:
        items.append(f"seed={args.seed}")
    if args.out:
        items.append(f"out_dir={args.out}")
    if getattr(args, "data", None):
        items.append(f"data.prep_dir={args.data}")
    if getattr(args, "corpus", None):
        items.append(f"data.corpus_dir={args.corpus}")
    if getattr(args, "modality", None):
        items.append(f"modalities={args.modality}")
    if getattr(args, "init", None):
        items.append(f"init_checkpoint={args.init}")
    return items


def _resolve_out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    cfg.out_dir = str(out)
    return out


def _setup_logging(out_dir: Path) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    stdout = logging.StreamHandler(sys.stdout)
    stdout.setFormatter(fmt)
    root.addHandler(stdout)
    file_handler = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
    file_handler.setFormatter(fmt)
    root.addHandler(file_handler)


def _finish(out_dir: Path, cfg: RunConfig, command: str, artifacts: list) -> None:
    resolved = save_config(run_config_to_dict(cfg), out_dir / "resolved.yaml")
    listing = {
        "command": command,
        "resolved_config": resolved.name,
        "artifacts": sorted(str(Path(a).resolve().relative_to(out_dir.resolve()))
                            if Path(a).resolve().is_relative_to(out_dir.resolve())
                            else str(a) for a in artifacts),
    }
    (out_dir / "artifacts.json").write_text(json.dumps(listing, indent=2), encoding="utf-8")
    missing = [a for a in artifacts if not Path(a).exists()]
    if missing:
        raise RuntimeError(f"artifacts were not written: {missing}")
    log.info("wrote %d artifacts to %s", len(artifacts), out_dir)


def _load_config(args, stage: str | None = None) -> RunConfig:
    base = {"stage": stage} if stage else None
    cfg = resolve_run_config(args.config, list(args.overrides) + _flag_overrides(args), base=base)
    if stage:
        cfg.stage = stage
    cfg.validate()
    return cfg


def _dataset(cfg: RunConfig):
    from .signal_prep import PrepDataset

    if not cfg.data.prep_dir:
        raise ValueError("data.prep_dir is required (set it in the config or pass --data)")
    return PrepDataset(cfg.data.prep_dir)


def _split_ids(dataset, cfg: RunConfig, split: str) -> list[str]:
    train_m, dev_m, test_m = dataset.split(cfg.data.sizes(), cfg.seed)
    chosen = {"train": train_m, "dev": dev_m, "test": test_m}[split]
    if not chosen.entries:
        raise ValueError(f"split {split!r} is empty under sizes {cfg.data.sizes()}")
    return [e.id for e in chosen.entries]


def cmd_synth_data(args) -> int:
    from .corpus import generate_synthetic

    cfg = _load_config(args)
    out_dir = _resolve_out_dir(cfg)
    _setup_logging(out_dir)
    log.info("generating synthetic corpus: %s", cfg.synth)
    manifest = generate_synthetic(cfg.synth, out_dir)
    log.info("wrote %d samples (%d labeled)", len(manifest.entries), len(manifest.labeled()))
    _finish(out_dir, cfg, "synth-data", [out_dir / "manifest.jsonl", out_dir / "meta.json"])
    return 0


def cmd_prep(args) -> int:
    from .corpus import load_manifest
    from .signal_prep import Tokenizer, prep_corpus

    cfg = _load_config(args)
    out_dir = _resolve_out_dir(cfg)
    _setup_logging(out_dir)
    if not cfg.data.corpus_dir:
        raise ValueError("data.corpus_dir is required (set it in the config or pass --corpus)")
    manifest = load_manifest(Path(cfg.data.corpus_dir) / "manifest.jsonl")
    tokenizer = Tokenizer.load(args.vocab) if args.vocab else None
    log.info("preparing %d samples from %s", len(manifest.entries), cfg.data.corpus_dir)
    prep_corpus(manifest, out_dir, tokenizer=tokenizer, vocab_size=cfg.data.vocab_size)
    _finish(out_dir, cfg, "prep",
            [out_dir / "manifest.jsonl", out_dir / "vocab.json", out_dir / "tokens.json"])
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import pretrain

    cfg = _load_config(args, stage="pretrain")
    out_dir = _resolve_out_dir(cfg)
    _setup_logging(out_dir)
    dataset = _dataset(cfg)
    log.info("pre-training on %d unlabeled samples, %d epochs",
             len(dataset.unlabeled_ids), cfg.resolved_epochs)
    result = pretrain(dataset, cfg, resume_from=args.resume)
    log.info("epoch mean loss per sample: %s",
             " ".join(f"{v:.3f}" for v in result.epoch_mean_loss))
    _finish(out_dir, cfg, "pretrain",
            [result.metrics_path, result.final_checkpoint / "state.json"])
    return 0


def cmd_finetune(args) -> int:
    from .trainer import finetune

    cfg = _load_config(args, stage="finetune")
    out_dir = _resolve_out_dir(cfg)
    _setup_logging(out_dir)
    dataset = _dataset(cfg)
    result = finetune(dataset, cfg)
    log.info("best epoch %d, dev accuracy %.4f", result.best_epoch, result.dev.accuracy)
    _finish(out_dir, cfg, "finetune",
            [out_dir / "metrics.csv", out_dir / "epochs.csv", out_dir / "result.json",
             result.best_checkpoint / "state.json"])
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_checkpoint

    cfg = _load_config(args, stage="finetune")
    out_dir = _resolve_out_dir(cfg)
    _setup_logging(out_dir)
    dataset = _dataset(cfg)
    ids = _split_ids(dataset, cfg, args.split)
    bundle = load_checkpoint(args.ckpt)
    metrics, rows = evaluate(bundle.model, dataset, ids, cfg.mask())
    if metrics is None:
        raise ValueError(f"split {args.split!r} has no labels to score")
    report = {"split": args.split, "checkpoint": str(args.ckpt), "n": len(ids),
              "metrics": metrics.to_dict()}
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    with open(out_dir / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write("id,label,pred,prob_1\n")
        for r in rows:
            fh.write(f"{r['id']},{r['label']},{r['pred']},{r['prob_1']:.8g}\n")
    log.info("%s accuracy %.4f", args.split, metrics.accuracy)
    _finish(out_dir, cfg, "eval", [out_dir / "metrics.json", out_dir / "predictions.csv"])
    return 0


def cmd_inspect(args) -> int:
    from .eval_report import export_attention_summary, export_embeddings
    from .trainer import load_checkpoint

    cfg = _load_config(args, stage="finetune")
    out_dir = _resolve_out_dir(cfg)
    _setup_logging(out_dir)
    dataset = _dataset(cfg)
    ids = _split_ids(dataset, cfg, args.split)[: args.limit]
    samples = [dataset.load(i) for i in ids]
    bundle = load_checkpoint(args.ckpt)
    mask = cfg.mask()
    attn_paths = export_attention_summary(bundle.model, samples, mask, out_dir)
    emb_paths = export_embeddings(bundle.model, samples, mask, out_dir)
    _finish(out_dir, cfg, "inspect", list(attn_paths.values()) + list(emb_paths.values()))
    return 0


def cmd_protocol(args) -> int:
    from .trainer import run_protocol

    cfg = _load_config(args, stage="finetune")
    out_dir = _resolve_out_dir(cfg)
    _setup_logging(out_dir)
    dataset = _dataset(cfg)
    result = run_protocol(dataset, cfg, n_runs=args.runs)
    agg = result.aggregate
    log.info("protocol accuracy %.2f +- %.2f",
             100 * agg["mean"]["accuracy"], 100 * agg["std"]["accuracy"])
    _finish(out_dir, cfg, "protocol", [out_dir / "protocol.json"])
    return 0


_COMMANDS = {
    "synth-data": cmd_synth_data,
    "prep": cmd_prep,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "protocol": cmd_protocol,
}


def dispatch(args) -> int:
    return _COMMANDS[args.command](args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
