"""Command-line entry point: ``protokd {train,benchmark,eval,synth-gen,config-reference}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, config_reference, dump_config, load_config
from .data import (
    DataError,
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    load_image_dataset,
    load_pseudo_images,
    save_image_dataset,
    scarce_split,
    synthetic_spec_dict,
    write_manifest,
)
from .encoder import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import (
    classify,
    per_class_metrics,
    run_trials,
    write_ablation_csv,
    write_class_table_csv,
    write_confusion_csv,
    write_metrics_csv,
    write_report_json,
    write_trials_csv,
)
from .trainer import TrainingDivergence, config_for_losses, train

log = logging.getLogger("protokd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

CHECKPOINT_FILE = "checkpoint.pkd"
HISTORY_FILE = "history.jsonl"
SNAPSHOT_FILE = "config.resolved.yaml"


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        ds = generate_synthetic(d.synthetic)
    elif d.source == "image-folder":
        ds = load_image_dataset(d.path, cfg.encoder.input_size)
    else:
        ds = load_pseudo_images(d.path)
    enc = cfg.encoder
    if (ds.channels, ds.image_size) != (enc.in_channels, enc.input_size):
        raise ConfigError(
            f"data is {ds.channels}x{ds.image_size}x{ds.image_size} but encoder.in_channels/input_size "
            f"are {enc.in_channels}/{enc.input_size}"
        )
    return ds


def _dataset_from_path(path: str, input_size: int) -> Dataset:
    p = Path(path)
    if p.is_dir():
        return load_image_dataset(p, input_size)
    if p.is_file():
        return load_pseudo_images(p)
    raise DataError(f"dataset path not found: {p}")


def _history_lines(history: list[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)


def _resolve(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = args.out
    if getattr(args, "method", None) is not None and args.command == "train":
        overrides["train.method"] = args.method
    return load_config(args.config, overrides=overrides)


# ----------------------------------------------------------------- commands
def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output_dir)
    ds = load_dataset(cfg)
    tr, va, te = scarce_split(ds, cfg.split)
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT_FILE).write_text(dump_config(cfg))
    write_manifest(out / "manifest.json", ds, {"train": tr, "val": va, "test": te}, source={"data": dataclasses.asdict(cfg.data)})
    res = train(tr, va, cfg.train, cfg.encoder, cfg.augment.policy())
    (out / HISTORY_FILE).write_text(_history_lines(res.history))
    save_checkpoint(res.checkpoint, out / CHECKPOINT_FILE)
    if len(te):
        pred, _ = classify(res.checkpoint, te.images)
        rep = per_class_metrics(pred, te.labels, te.num_classes, te.class_names)
        write_report_json(out / "test_metrics.json", rep)
        log.info("test macro P/R/F1 %.3f / %.3f / %.3f", rep.macro_precision, rep.macro_recall, rep.macro_f1)
    log.info("best epoch %d of %d; artifacts in %s", res.best_epoch, len(res.history), out)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output_dir)
    ds = load_dataset(cfg)
    if args.ablation:
        methods = {row: config_for_losses(cfg.train, row) for row in cfg.benchmark.ablation_rows}
    else:
        names = [args.method] if args.method else list(cfg.benchmark.methods)
        methods = {m: dataclasses.replace(cfg.train, method=m, losses=None) for m in names}
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT_FILE).write_text(dump_config(cfg))

    def progress(name, trial):
        if trial.report is None:
            log.warning("%s seed %d failed: %s", name, trial.seed, trial.error)
        else:
            log.info("%s seed %d macro-F1 %.3f", name, trial.seed, trial.report.macro_f1)

    aggs = run_trials(ds, methods, cfg.encoder, cfg.split, cfg.augment.policy(), cfg.trials, cfg.seed, args.jobs, progress)
    (out / "benchmark.json").write_text(json.dumps({k: a.to_dict() for k, a in aggs.items()}, indent=2, sort_keys=True) + "\n")
    write_trials_csv(out / "trials.csv", aggs)
    if args.ablation:
        write_ablation_csv(out / "table_ablation.csv", aggs)
    else:
        write_class_table_csv(out / "table_classes.csv", aggs)
    for name, agg in aggs.items():
        s = agg.summary()
        if s["f1"]:
            log.info("%-10s macro-F1 %.3f +- %.3f (%d/%d trials)", name, s["f1"]["mean"], s["f1"]["std"], len(agg.ok), len(agg.trials))
    failed = sum(len(a.trials) - len(a.ok) for a in aggs.values())
    return EXIT_DIVERGED if failed and not any(a.ok for a in aggs.values()) else EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.data:
        ds = _dataset_from_path(args.data, ckpt.encoder_config.input_size)
    else:
        cfg = _resolve(args)
        ds = load_dataset(cfg)
        if args.split != "all":
            ds = dict(zip(("train", "val", "test"), scarce_split(ds, cfg.split)))[args.split]
    if ds.modality != ckpt.modality:
        raise DataError(f"checkpoint was trained on {ckpt.modality} data but the dataset is {ds.modality}")
    if ds.class_names != ckpt.class_names:
        raise DataError(f"dataset classes {ds.class_names} differ from checkpoint classes {ckpt.class_names}")
    out = Path(args.out or Path(args.checkpoint).parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    rules = [ckpt.predict_rule] if ckpt.predict_rule == "head" else ["prototype", "head"]
    for rule in rules:
        pred, _ = classify(ckpt, ds.images, rule=rule)
        rep = per_class_metrics(pred, ds.labels, ds.num_classes, ds.class_names)
        suffix = "" if rule == ckpt.predict_rule else f"_{rule}"
        write_report_json(out / f"metrics{suffix}.json", rep)
        write_metrics_csv(out / f"metrics{suffix}.csv", rep)
        write_confusion_csv(out / f"confusion{suffix}.csv", rep)
        log.info("%s rule: macro P/R/F1 %.3f / %.3f / %.3f", rule, rep.macro_precision, rep.macro_recall, rep.macro_f1)
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    if args.config:
        spec = load_config(args.config).data.synthetic
    else:
        spec = SyntheticSpec()
    updates = {k: v for k, v in (
        ("num_classes", args.classes),
        ("per_class", args.per_class),
        ("intra_class_variance", args.variance),
        ("image_size", args.size),
        ("seed", args.seed),
    ) if v is not None}
    try:
        spec = dataclasses.replace(spec, **updates)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    out = Path(args.out)
    ds = generate_synthetic(spec)
    save_image_dataset(ds, out)
    write_manifest(out / "manifest.json", ds, source={"synthetic": synthetic_spec_dict(spec)})
    log.info("wrote %d images in %d classes to %s", len(ds), ds.num_classes, out)
    return EXIT_OK


def cmd_config_reference(args) -> int:
    text = config_reference()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protokd", description="Prototype + self-distillation training for scarce-data classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and write checkpoint, history and config snapshot")
    t.add_argument("--config", help="YAML run config (defaults when omitted)")
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--seed", type=int, help="seed for split and training")
    t.add_argument("--method", choices=["supervised", "protonet", "protokd"])
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("benchmark", help="paired multi-trial comparison of methods")
    b.add_argument("--config")
    b.add_argument("--out")
    b.add_argument("--seed", type=int, help="first trial seed")
    b.add_argument("--method", choices=["supervised", "protonet", "protokd"], help="run only this method")
    b.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    b.add_argument("--ablation", action="store_true", help="run the loss-combination rows instead of the methods")
    b.set_defaults(func=cmd_benchmark)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="image folder or pseudo-image file")
    e.add_argument("--config", help="regenerate the run's dataset instead of --data")
    e.add_argument("--seed", type=int)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("synth-gen", help="render a synthetic corpus as an image folder")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="read data.synthetic from this config")
    g.add_argument("--classes", type=int)
    g.add_argument("--per-class", type=int)
    g.add_argument("--variance", type=float)
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_synth_gen)

    r = sub.add_parser("config-reference", help="print the configuration reference")
    r.add_argument("--out")
    r.set_defaults(func=cmd_config_reference)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.data and not args.config:
        log.error("eval needs --data or --config")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    except TrainingDivergence as err:
        log.error("training diverged: %s", err)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
