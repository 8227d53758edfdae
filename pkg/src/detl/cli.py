"""Command-line entry point: ``detl <command> [--config PATH] [--seed N] [--out DIR] [--key value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Callable, Optional, Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .config import KEYS, ConfigError, RunConfig, load_config, parse_value
from .data import (SOURCE_CLASSES, TARGET_CLASSES, AugmentationPolicy, LabeledDataset, generate_synthetic,
                   ingest_directory, write_dataset)
from .evaluation import run_cv, summarize
from .gradcam import gradcam, heatmap_filename, predicted_class, render_heatmap
from .gradcheck import run_primitive_suite
from .models import build_preset
from .transfer import TARGET_TASK, adapt, finetune, finetune_config, pretrain, pretrain_config

log = logging.getLogger("detl")

GRAD_CHECK_SEEDS = 20


class ArtifactError(RuntimeError):
    pass


# -- shared helpers -------------------------------------------------------------

def _policy(cfg: RunConfig) -> AugmentationPolicy:
    return AugmentationPolicy(cfg.rotation, (cfg.scale_min, cfg.scale_max), cfg.mirror_p, seed=cfg.seed)


def source_data(cfg: RunConfig) -> LabeledDataset:
    if cfg.source_dir:
        return ingest_directory(cfg.source_dir, class_names=SOURCE_CLASSES, image_size=cfg.image_size)
    return generate_synthetic(cfg.source_counts, cfg.image_size, cfg.data_seed)


def target_data(cfg: RunConfig) -> LabeledDataset:
    if cfg.target_dir:
        return ingest_directory(cfg.target_dir, class_names=TARGET_CLASSES, image_size=cfg.image_size)
    return generate_synthetic(cfg.target_counts, cfg.image_size, cfg.data_seed)


def pretrain_settings(cfg: RunConfig):
    return pretrain_config(epochs=cfg.pretrain_epochs, batch_size=cfg.batch_size, optimizer="adam",
                           lr=cfg.pretrain_lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                           cosine=True, lr_min=cfg.lr_min, augment=cfg.augment, policy=_policy(cfg),
                           seed=cfg.seed, holdout_per_class=cfg.holdout_per_class)


def finetune_settings(cfg: RunConfig):
    return finetune_config(epochs=cfg.finetune_epochs, batch_size=cfg.finetune_batch_size, lr=cfg.finetune_lr,
                           momentum=cfg.momentum, augment=cfg.finetune_augment, policy=_policy(cfg), seed=cfg.seed)


def _checkpoint_path(cfg: RunConfig, default_name: str) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / default_name


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


# -- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> list[Path]:
    """Write a synthetic PGM + labels.csv dataset for ``cfg.task`` into the run directory."""
    counts = cfg.source_counts if cfg.task == "source" else cfg.target_counts
    ds = generate_synthetic(counts, cfg.image_size, cfg.data_seed)
    root = write_dataset(ds, Path(cfg.out))
    for name, n in zip(ds.class_names, ds.counts()):
        print(f"{name}: {n}")
    print(f"total: {len(ds)}")
    return [root / "labels.csv"] + [root / f"images/{sid}.pgm" for sid in ds.ids()]


def cmd_pretrain(cfg: RunConfig) -> list[Path]:
    data_a = source_data(cfg)
    model = build_preset(cfg.arch, (1, cfg.image_size, cfg.image_size), 2, widths=cfg.widths or None,
                         seed=cfg.seed)
    best, report = pretrain(model, data_a, pretrain_settings(cfg))
    out = Path(cfg.out)
    ckpt = save_checkpoint(best, out / "pretrained.detl")
    csv = _write(out / "pretrain_report.csv", report.to_csv())
    print(f"best epoch {report.best_epoch + 1}: validation accuracy {report.val_acc[report.best_epoch]:.4f}")
    return [ckpt, csv]


def cmd_finetune(cfg: RunConfig) -> list[Path]:
    """Adapt a pretrained checkpoint and fine-tune on all of Data-B."""
    source = load_checkpoint(_checkpoint_path(cfg, "pretrained.detl"), preset=cfg.arch)
    data_b = target_data(cfg)
    model = adapt(source, TARGET_TASK, seed=cfg.seed)
    tuned, report = finetune(model, data_b, finetune_settings(cfg))
    out = Path(cfg.out)
    ckpt = save_checkpoint(tuned, out / "finetuned.detl")
    csv = _write(out / "finetune_report.csv", report.to_csv())
    print(f"final training accuracy {report.train_acc[-1]:.4f}")
    return [ckpt, csv]


def cmd_cv(cfg: RunConfig) -> list[Path]:
    source = load_checkpoint(_checkpoint_path(cfg, "pretrained.detl"), preset=cfg.arch)
    data_b = target_data(cfg)
    out = Path(cfg.out)
    written: list[Path] = []

    def on_fold(fold, cm, model):
        written.append(_write(out / f"cv_fold{fold + 1}_confusion.csv", cm.to_csv()))
        written.append(save_checkpoint(model, out / f"cv_fold{fold + 1}.detl"))

    result = run_cv(cfg.arch, source, data_b, cfg.folds, cfg.seed, finetune_settings(cfg), on_fold=on_fold)
    text, csv = summarize(result)
    written.append(_write(out / "cv_confusion_summed.csv", result.summed.to_csv()))
    written.append(_write(out / "cv_accuracy.csv", csv))
    written.append(_write(out / "cv_summary.txt", text))
    print(text, end="")
    return written


def cmd_gradcam(cfg: RunConfig) -> list[Path]:
    model = load_checkpoint(_checkpoint_path(cfg, "finetuned.detl"), preset=cfg.arch)
    data = source_data(cfg) if cfg.task == "source" else target_data(cfg)
    if model.num_classes != len(data.class_names):
        raise ConfigError(f"checkpoint predicts {model.num_classes} classes, dataset has {len(data.class_names)}")
    if cfg.samples:
        samples = [data.find(sid) for sid in cfg.samples]
    else:
        # one example per class, first in dataset order
        firsts = {}
        for s in data.samples:
            firsts.setdefault(s.label, s)
        samples = [firsts[k] for k in sorted(firsts)]
    if cfg.cam_class >= model.num_classes:
        raise ValueError(f"class index {cfg.cam_class} outside [0, {model.num_classes})")
    target_dir = Path(cfg.out) / "heatmaps"
    target_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        c = cfg.cam_class if cfg.cam_class >= 0 else predicted_class(model, s.image)
        hm = gradcam(model, s.image, c)
        written.append(render_heatmap(hm, s.image[0], target_dir / heatmap_filename(s.id, c)))
        print(f"{s.id}: class {c} ({data.class_names[c]}), logit {hm.score:.4f}")
    return written


def cmd_grad_check(cfg: RunConfig) -> list[Path]:
    reports = run_primitive_suite(range(cfg.seed, cfg.seed + GRAD_CHECK_SEEDS), cfg.tolerance)
    lines = [f"{name}: max rel err {r.max_error:.3e} {'ok' if r.passed else 'FAIL'}" for name, r in reports.items()]
    worst = max(r.max_error for r in reports.values())
    verdict = all(r.passed for r in reports.values())
    lines.append(f"{'PASS' if verdict else 'FAIL'}: worst {worst:.3e}, tolerance {cfg.tolerance:g}")
    path = _write(Path(cfg.out) / "grad_check.txt", "\n".join(lines) + "\n")
    print(lines[-1])
    if not verdict:
        raise ArtifactError("gradient check failed")
    return [path]


COMMANDS: dict[str, Callable[[RunConfig], list[Path]]] = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "cv": cmd_cv,
    "gradcam": cmd_gradcam,
    "grad-check": cmd_grad_check,
}


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="key = value file; flags override it")
    shared.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    shared.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="run directory")
    for f in fields(RunConfig):
        if f.name in ("seed", "out"):
            continue
        shared.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar="VALUE",
                            default=argparse.SUPPRESS, help=f"default: {f.default!r}")
    parser = argparse.ArgumentParser(prog="detl", description="Domain-extension transfer learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[shared], help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
    return parser


def _overrides(ns: argparse.Namespace) -> dict:
    out = {}
    for key in KEYS:
        if key in vars(ns):
            value = getattr(ns, key)
            out[key] = parse_value(key, value) if isinstance(value, str) and key != "out" else value
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = load_config(ns.config, _overrides(ns))
    except ConfigError as exc:
        print(f"detl: config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(f"# detl {ns.command}\n" + cfg.echo())
        artifacts = COMMANDS[ns.command](cfg)
    except ConfigError as exc:
        print(f"detl {ns.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"detl {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    missing = [p for p in artifacts if not Path(p).is_file()]
    if missing:
        print(f"detl {ns.command}: missing artifacts: {', '.join(map(str, missing))}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
