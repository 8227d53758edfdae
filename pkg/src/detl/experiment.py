"""The headline experiment: pretrain on the binary source task, then k-fold CV on the four-class target."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .cli import finetune_settings, pretrain_settings, source_data, target_data
from .config import RunConfig
from .evaluation import CvResult, run_cv
from .models import build_preset
from .transfer import TrainRunReport, pretrain


@dataclass
class HeadlineRun:
    seed: int
    cv: CvResult
    pretrain: TrainRunReport
    seconds: float


def headline_run(cfg: RunConfig, seed: int) -> HeadlineRun:
    """One full pipeline with data, init, shuffling and folds all pinned to ``seed``."""
    cfg = replace(cfg, seed=seed, data_seed=seed)
    start = time.perf_counter()
    model = build_preset(cfg.arch, (1, cfg.image_size, cfg.image_size), 2, widths=cfg.widths or None, seed=seed)
    best, report = pretrain(model, source_data(cfg), pretrain_settings(cfg))
    result = run_cv(cfg.arch, best, target_data(cfg), cfg.folds, seed, finetune_settings(cfg))
    return HeadlineRun(seed, result, report, time.perf_counter() - start)
