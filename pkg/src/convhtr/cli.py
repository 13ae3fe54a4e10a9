"""Command-line entry point: ``convhtr {train,eval,infer,augment,count-params}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .augment import KINDS, TacoConfig, preview_image, taco
from .data import ManifestError, Sample, Vocabulary, few_shot_subset, load_manifest, synth_long_lines
from .evaluate import bucket_svg, bucketed_cer, corpus_cer, format_table
from .imageio import ImageError, read_image, write_pgm
from .model import ConfigError, ModelConfig, build, count_params
from .train import (CHECKPOINT_BEST, METRICS_FILE, CheckpointError, TrainConfig, TrainingError, fit,
                    load_checkpoint, predict)

log = logging.getLogger("convhtr")

RUN_MANIFEST = "run.json"
IMAGE_SUFFIXES = (".pgm", ".png")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def resolve_vocabulary(spec: Any, base: Path) -> Vocabulary:
    if spec is None or spec == "iam":
        return Vocabulary.iam()
    if isinstance(spec, dict) and set(spec) == {"chars"}:
        return Vocabulary(spec["chars"])
    if isinstance(spec, dict) and set(spec) == {"file"}:
        p = Path(spec["file"])
        return Vocabulary.load(p if p.is_absolute() else base / p)
    raise ConfigError('vocabulary must be "iam", {"chars": "..."} or {"file": "..."}')


def load_run_config(path: str | Path) -> tuple[ModelConfig, TrainConfig, Vocabulary, dict]:
    """Run config: ``{"model": ..., "train": ..., "vocabulary": ...}``."""
    raw = _read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(raw) - {"model", "train", "vocabulary"})
    if unknown:
        raise ConfigError(f"run config: unknown keys {unknown}")
    if "model" not in raw:
        raise ConfigError("run config: missing key 'model'")
    vocab = resolve_vocabulary(raw.get("vocabulary"), Path(path).parent)
    model_cfg = ModelConfig.from_dict(raw["model"])
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    if model_cfg.vocab_size != vocab.size_with_blank:
        raise ConfigError(f"model.vocab_size is {model_cfg.vocab_size} but the vocabulary has "
                          f"{len(vocab)} symbols (+1 blank = {vocab.size_with_blank})")
    return model_cfg, train_cfg, vocab, raw


def load_model_config(path: str | Path) -> ModelConfig:
    raw = _read_json(path)
    if isinstance(raw, dict) and "model" in raw:
        raw = raw["model"]
    return ModelConfig.from_dict(raw)


def write_run_manifest(out: Path, command: str, argv: list[str], config: Any, seeds: dict,
                       inputs: dict, outputs: dict, **extra) -> None:
    doc = {"command": command, "argv": argv, "engine_version": __version__, "config": config,
           "seeds": seeds, "inputs": inputs, "outputs": outputs}
    doc.update(extra)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _manifest(flag: str, path: str, vocab: Vocabulary, split: str) -> list[Sample]:
    try:
        return load_manifest(path, vocab, split)
    except ManifestError as exc:
        raise ManifestError(f"{flag}: {exc}") from None


def cmd_train(args, argv) -> int:
    model_cfg, train_cfg, vocab, raw = load_run_config(args.config)
    if args.seed is not None:
        model_cfg.seed = args.seed
        train_cfg.seed = args.seed
    if args.epochs is not None:
        train_cfg.max_epochs = args.epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train_set = _manifest("--train-manifest", args.train_manifest, vocab, "train")
    val_set = _manifest("--val-manifest", args.val_manifest, vocab, "val")
    n_full = len(train_set)
    if args.fraction is not None:
        try:
            train_set = few_shot_subset(train_set, args.fraction, train_cfg.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    n_long = 0
    if args.long_lines and " " not in vocab.index:
        raise UsageError("--long-lines joins labels with a space, which the vocabulary lacks")
    if args.long_lines:
        rng = np.random.default_rng([train_cfg.seed, 7])
        train_set = list(train_set) + synth_long_lines(train_set, args.long_lines, rng)
        n_long = args.long_lines

    resume = load_checkpoint(args.resume) if args.resume else None
    model = build(model_cfg)
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "vocabulary": vocab.chars}
    write_run_manifest(
        out / RUN_MANIFEST, "train", argv, resolved,
        {"model": model_cfg.seed, "train": train_cfg.seed},
        {"config": str(args.config), "train_manifest": str(args.train_manifest),
         "val_manifest": str(args.val_manifest), "resume": args.resume},
        {"checkpoint": CHECKPOINT_BEST, "metrics": METRICS_FILE},
        fraction=args.fraction, train_samples_available=n_full,
        train_samples_used=len(train_set) - n_long, long_lines=n_long)
    report = fit(model, train_set, val_set, vocab, train_cfg, out, resume)
    print(json.dumps({"best_val_cer": report.best_cer, "best_epoch": report.best_epoch,
                      "epochs": len(report.history), "stopped_early": report.stopped_early}))
    return 0


def _checkpoint_vocab(ckpt) -> Vocabulary:
    if ckpt.vocabulary is None:
        return Vocabulary.iam()
    return Vocabulary(ckpt.vocabulary)


def cmd_eval(args, argv) -> int:
    ckpt = load_checkpoint(args.ckpt)
    vocab = _checkpoint_vocab(ckpt)
    samples = _manifest("--manifest", args.manifest, vocab, "eval")
    hyps = predict(ckpt.model, samples, vocab, args.batch_size)
    pairs = [(s.transcription, h) for s, h in zip(samples, hyps)]
    report = bucketed_cer(pairs) if args.buckets else corpus_cer(pairs)
    print(format_table(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "report.txt").write_text(format_table(report) + "\n", encoding="utf-8")
        outputs = {"report": "report.json", "table": "report.txt"}
        if args.buckets:
            (out / "buckets.svg").write_text(bucket_svg(report), encoding="utf-8")
            outputs["chart"] = "buckets.svg"
        write_run_manifest(out / RUN_MANIFEST, "eval", argv, ckpt.model.config.to_dict(),
                           {"model": ckpt.model.config.seed},
                           {"ckpt": str(args.ckpt), "manifest": str(args.manifest)}, outputs)
    return 0


def cmd_infer(args, argv) -> int:
    ckpt = load_checkpoint(args.ckpt)
    vocab = _checkpoint_vocab(ckpt)
    target = Path(args.image)
    if target.is_dir():
        paths = sorted(p for p in target.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        paths = [target]
    samples = []
    for p in paths:
        try:
            samples.append(Sample(str(p), "", image=read_image(p)))
        except ImageError as exc:
            raise UsageError(str(exc)) from None
    texts = predict(ckpt.model, samples, vocab) if samples else []
    for p, text in zip(paths, texts):
        print(f"{p}\t{text}" if target.is_dir() else text)
    return 0


def cmd_augment(args, argv) -> int:
    try:
        img = read_image(args.image)
    except ImageError as exc:
        raise UsageError(str(exc)) from None
    orientations = ("vertical", "horizontal") if args.orient == "both" else (args.orient,)
    cfg = TacoConfig(args.cp, args.tmax, orientations, args.kind, args.seed)
    try:
        cfg.validate(img.shape[0])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    write_pgm(out, taco(img, cfg, np.random.default_rng(args.seed)))
    preview_path = Path(args.preview) if args.preview else out.with_name(out.stem + ".preview.pgm")
    write_pgm(preview_path, preview_image(img, cfg, np.random.default_rng(args.seed)))
    write_run_manifest(out.with_name(out.stem + ".run.json"), "augment", argv,
                       {"corruption_prob": cfg.corruption_prob, "max_tile_width": cfg.tile_limit(img.shape[0]),
                        "orientations": list(orientations), "kind": cfg.kind},
                       {"taco": args.seed}, {"image": str(args.image)},
                       {"image": out.name, "preview": preview_path.name})
    return 0


def cmd_count_params(args, argv) -> int:
    cfg = load_model_config(args.config)
    print(count_params(build(cfg)))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convhtr", description="1D-convolutional handwritten line recognizer")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--train-manifest", required=True)
    t.add_argument("--val-manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--fraction", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="override train.max_epochs")
    t.add_argument("--resume")
    t.add_argument("--long-lines", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy-decode a manifest and report CER")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--buckets", action="store_true")
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--out", help="directory for report.json/report.txt/buckets.svg")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="transcribe an image or a directory of images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("augment", help="apply tiling-and-corruption to one image")
    a.add_argument("--image", required=True)
    a.add_argument("--cp", type=float, default=0.25)
    a.add_argument("--tmax", type=int)
    a.add_argument("--kind", choices=KINDS, default="random")
    a.add_argument("--orient", choices=("vertical", "horizontal", "both"), default="both")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--preview")
    a.set_defaults(func=cmd_augment)

    c = sub.add_parser("count-params", help="print the trainable parameter count of a config")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_count_params)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError, ManifestError, CheckpointError) as exc:
        print(f"convhtr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ImageError, OSError) as exc:
        print(f"convhtr {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
