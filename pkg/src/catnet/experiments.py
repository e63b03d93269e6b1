"""Desk-scale end-to-end runs shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field

from .config import RunConfig
from .data import Dataset, generate_synthetic_dataset
from .harness import (
    CatNetPredictor, DiceReport, TrainState, evaluate_setting_1, evaluate_setting_2, fold_for,
    iteration_dice_trace, setting_2_pairs, train_from_config,
)

logger = logging.getLogger(__name__)


@dataclass
class SeedRun:
    seed: int
    state: TrainState
    setting_1: DiceReport
    setting_2: DiceReport
    iteration_trace: list[float]
    seconds: float

    @property
    def loss_ratio(self) -> float:
        return self.state.final_loss / self.state.initial_loss


@dataclass
class DeskResult:
    cfg: RunConfig
    runs: list[SeedRun] = field(default_factory=list)

    @property
    def median_loss_ratio(self) -> float:
        return statistics.median(r.loss_ratio for r in self.runs)

    @property
    def median_setting_2(self) -> float:
        return statistics.median(r.setting_2.mean for r in self.runs)

    def summary(self) -> str:
        lines = [f"{'seed':>4} {'loss0':>7} {'lossN':>7} {'ratio':>6} {'dice I':>7} {'dice II':>8} {'sec':>6}"]
        for r in self.runs:
            lines.append(f"{r.seed:>4} {r.state.initial_loss:7.4f} {r.state.final_loss:7.4f} {r.loss_ratio:6.3f} "
                         f"{r.setting_1.mean:7.4f} {r.setting_2.mean:8.4f} {r.seconds:6.1f}")
        lines.append(f"median loss ratio {self.median_loss_ratio:.3f}, "
                     f"median setting II Dice {self.median_setting_2:.4f}")
        for r in self.runs:
            lines.append(f"seed {r.seed} per-iteration Dice: " + " ".join(f"{d:.4f}" for d in r.iteration_trace))
        return "\n".join(lines) + "\n"


def desk_dataset(cfg: RunConfig, data_seed: int = 0) -> Dataset:
    return generate_synthetic_dataset(data_seed, cfg.n_classes, cfg.samples_per_class, cfg.image_size)


def seed_run(ds: Dataset, cfg: RunConfig) -> SeedRun:
    t0 = time.perf_counter()
    state = train_from_config(ds, cfg)
    fold = fold_for(ds, cfg)
    mcfg = cfg.model_config()
    pred = CatNetPredictor(state.params, mcfg)
    s1 = evaluate_setting_1(ds, fold, pred)
    s2 = evaluate_setting_2(ds, fold, pred)
    trace = iteration_dice_trace(ds, fold, state.params, mcfg, setting_2_pairs(ds, fold))
    run = SeedRun(cfg.seed, state, s1, s2, trace, time.perf_counter() - t0)
    logger.info("seed %d: loss ratio %.3f, setting II %.4f", cfg.seed, run.loss_ratio, s2.mean)
    return run


def desk_training_run(cfg: RunConfig, seeds: tuple[int, ...] = (0, 1, 2), data_seed: int = 0) -> DeskResult:
    """Train and evaluate one model per seed on a fixed synthetic dataset."""
    ds = desk_dataset(cfg, data_seed)
    result = DeskResult(cfg)
    for s in seeds:
        result.runs.append(seed_run(ds, cfg.with_(seed=s)))
    return result
