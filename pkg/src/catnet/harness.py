"""Episodic training, Dice evaluation under settings I and II, and reports."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Dataset, Episode, Fold, build_folds, make_episode, sample_episode
from .io import Checkpoint, save_tensor
from .params import Params
from .refine import ModelConfig, episode_loss, forward, full_resolution_prob, init_model, predict_mask

logger = logging.getLogger(__name__)

Predictor = Callable[[Episode], np.ndarray]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, episode: Episode, dump: Path | None = None):
        self.iteration = iteration
        self.episode = episode
        self.dump = dump
        where = f"; episode dumped to {dump}" if dump else ""
        super().__init__(
            f"non-finite loss at iteration {iteration} (class {episode.class_id}, "
            f"support {episode.support_ids}, query {episode.query_id}){where}")


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1."""
    p, g = np.asarray(pred), np.asarray(truth)
    if p.shape != g.shape:
        raise ValueError(f"dice_score: shape mismatch {p.shape} vs {g.shape}")
    for m in (p, g):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("dice_score: masks must be binary")
    p, g = p.astype(bool), g.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainState:
    params: Params
    rng: np.random.Generator
    iteration: int = 0
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    accum: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.float32))

    @property
    def initial_loss(self) -> float:
        return self.loss_curve[0][1]

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1][1]


def new_train_state(model_cfg: ModelConfig, seed: int) -> TrainState:
    return TrainState(init_model(model_cfg, seed), np.random.default_rng([seed, 1]))


def train(ds: Dataset, fold: Fold, model_cfg: ModelConfig, iterations: int, lr: float = 0.001,
          seed: int = 0, log_interval: int = 100, state: TrainState | None = None,
          dump_dir: Path | None = None) -> TrainState:
    """Run episodes until ``state.iteration == iterations``.

    One episode per step: forward, soft Dice loss, backward, plain SGD. The
    mean loss of every ``log_interval`` steps is appended to the loss curve.
    Passing a restored ``state`` continues a run exactly.
    """
    if state is None:
        state = new_train_state(model_cfg, seed)
    params = list(state.params.values())
    while state.iteration < iterations:
        ep = sample_episode(ds, fold, "train", state.rng)
        out = forward(state.params, model_cfg, ep.support_images[0], ep.support_masks[0], ep.query_image)
        loss = episode_loss(out, ep.query_truth, model_cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(state.iteration, ep, _dump_episode(ep, dump_dir))
        T.backward(loss)
        T.sgd_step([p for p in params if p.grad is not None], lr)
        for p in params:
            p.grad = None
        state.iteration += 1
        state.accum[0] += np.float32(value)
        state.accum[1] += np.float32(1.0)
        if state.iteration % log_interval == 0:
            mean = float(state.accum[0] / state.accum[1])
            state.loss_curve.append((state.iteration, mean))
            state.accum[:] = 0
            logger.info("iter %d loss %.4f", state.iteration, mean)
    return state


def _dump_episode(ep: Episode, dump_dir: Path | None) -> Path | None:
    if dump_dir is None:
        return None
    d = Path(dump_dir) / "diverged_episode"
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "support_image.ctnt", ep.support_images[0])
    save_tensor(d / "support_mask.ctnt", ep.support_masks[0])
    save_tensor(d / "query_image.ctnt", ep.query_image)
    save_tensor(d / "query_truth.ctnt", ep.query_truth)
    return d


def to_checkpoint(state: TrainState, cfg: RunConfig) -> Checkpoint:
    tensors = state.params.arrays()
    curve = np.asarray(state.loss_curve, dtype=np.float32).reshape(-1, 2)
    tensors["_meta.loss_curve"] = curve
    tensors["_meta.loss_accum"] = state.accum.copy()
    snapshot = cfg.with_(data="", out="", resume="")
    return Checkpoint(snapshot.to_text(), tensors, state.rng.bit_generator.state, state.iteration)


def from_checkpoint(ckpt: Checkpoint) -> tuple[RunConfig, TrainState]:
    cfg = RunConfig.from_text(ckpt.config_text)
    params = init_model(cfg.model_config(), cfg.seed)
    params.load_arrays(ckpt.tensors)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    curve = [(int(i), float(v)) for i, v in ckpt.tensors.get("_meta.loss_curve", np.zeros((0, 2)))]
    accum = np.array(ckpt.tensors.get("_meta.loss_accum", np.zeros(2)), dtype=np.float32)
    return cfg, TrainState(params, rng, ckpt.iteration, curve, accum)


# --------------------------------------------------------------------------
# Evaluation


class CatNetPredictor:
    """Frozen-parameter predictor; safe to call from several threads."""

    def __init__(self, params: Params, cfg: ModelConfig, depth: int | None = None):
        self.params = params
        self.cfg = cfg
        self.depth = depth

    def __call__(self, ep: Episode) -> np.ndarray:
        with T.no_grad():
            out = forward(self.params, self.cfg, ep.support_images[0], ep.support_masks[0],
                          ep.query_image, depth=self.depth)
        return predict_mask(out, self.cfg)


def echo_truth(ep: Episode) -> np.ndarray:
    """Stub predictor that returns the ground truth."""
    return ep.query_truth


@dataclass(frozen=True)
class EpisodeRecord:
    class_id: int
    support_id: int
    query_id: int
    dice: float


@dataclass
class DiceReport:
    fold: int
    setting: str
    per_class: dict[int, float]
    counts: dict[int, int]
    records: list[EpisodeRecord]

    @property
    def mean(self) -> float:
        return math.fsum(self.per_class.values()) / len(self.per_class)

    def to_kv(self) -> str:
        lines = [f"fold={self.fold} setting={self.setting} class={c} dice_mean={d:.6f} "
                 f"n_episodes={self.counts[c]}" for c, d in self.per_class.items()]
        lines.append(f"fold={self.fold} setting={self.setting} class=all dice_mean={self.mean:.6f} "
                     f"n_episodes={len(self.records)}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = f"Fold {self.fold}, setting {self.setting}"
        rows = [head, "-" * len(head), f"{'class':>6} {'dice':>8} {'episodes':>9}"]
        rows += [f"{c:>6} {100 * d:8.2f} {self.counts[c]:>9}" for c, d in self.per_class.items()]
        rows.append(f"{'avg':>6} {100 * self.mean:8.2f} {len(self.records):>9}")
        return "\n".join(rows) + "\n"


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("CATNET_THREADS", "1")))
    except ValueError:
        return 1


def run_pairs(ds: Dataset, pairs: list[tuple[int, int]], predictor: Predictor,
              workers: int | None = None) -> list[EpisodeRecord]:
    def one(pair):
        s, q = pair
        ep = make_episode(ds, s, q)
        return EpisodeRecord(ep.class_id, s, q, dice_score(predictor(ep), ep.query_truth))

    workers = workers or _workers()
    if workers == 1:
        recs = [one(p) for p in pairs]
    else:
        with ThreadPoolExecutor(workers) as pool:
            recs = list(pool.map(one, pairs))
    return sorted(recs, key=lambda r: (r.class_id, r.support_id, r.query_id))


def aggregate(records: list[EpisodeRecord], fold: int, setting: str) -> DiceReport:
    records = sorted(records, key=lambda r: (r.class_id, r.support_id, r.query_id))
    classes = sorted({r.class_id for r in records})
    per_class, counts = {}, {}
    for c in classes:
        vals = [r.dice for r in records if r.class_id == c]
        per_class[c] = math.fsum(vals) / len(vals)
        counts[c] = len(vals)
    return DiceReport(fold, setting, per_class, counts, records)


def setting_1_pairs(ds: Dataset, fold: Fold) -> list[tuple[int, int]]:
    """The highest-index sample of each test class supports every other one."""
    pairs = []
    for c in fold.test_classes:
        idx = ds.samples_of(c)
        support = int(idx.max())
        pairs += [(support, int(q)) for q in idx if q != support]
    return pairs


def setting_2_pairs(ds: Dataset, fold: Fold) -> list[tuple[int, int]]:
    """Every ordered (support, query) pair of distinct samples within a test class."""
    pairs = []
    for c in fold.test_classes:
        idx = [int(i) for i in ds.samples_of(c)]
        pairs += [(s, q) for s in idx for q in idx if s != q]
    return pairs


def evaluate_setting_1(ds: Dataset, fold: Fold, predictor: Predictor, workers: int | None = None) -> DiceReport:
    return aggregate(run_pairs(ds, setting_1_pairs(ds, fold), predictor, workers), fold.index, "1")


def evaluate_setting_2(ds: Dataset, fold: Fold, predictor: Predictor, workers: int | None = None) -> DiceReport:
    return aggregate(run_pairs(ds, setting_2_pairs(ds, fold), predictor, workers), fold.index, "2")


def iteration_dice_trace(ds: Dataset, fold: Fold, params: Params, cfg: ModelConfig,
                         pairs: list[tuple[int, int]]) -> list[float]:
    """Mean Dice of the mask after each CMAT iteration (index 0 = classifier mask)."""
    n = cfg.refine.num_iterations
    sums = np.zeros(n + 1)
    for s, q in pairs:
        ep = make_episode(ds, s, q)
        with T.no_grad():
            out = forward(params, cfg, ep.support_images[0], ep.support_masks[0], ep.query_image)
        tau = cfg.refine.proto.tau
        sums[0] += dice_score((out.initial_prob.data > tau).astype(np.float32), ep.query_truth)
        for i, st in enumerate(out.states, start=1):
            prob = full_resolution_prob(st.logits, cfg.image_size)
            sums[i] += dice_score((prob.data > tau).astype(np.float32), ep.query_truth)
    return list(sums / max(len(pairs), 1))


# --------------------------------------------------------------------------
# Config-driven entry points shared by the CLI, the ablation table and scripts


def fold_for(ds: Dataset, cfg: RunConfig) -> Fold:
    return build_folds(ds, cfg.folds)[cfg.fold]


def train_from_config(ds: Dataset, cfg: RunConfig, state: TrainState | None = None,
                      dump_dir: Path | None = None) -> TrainState:
    return train(ds, fold_for(ds, cfg), cfg.model_config(), cfg.iters, cfg.lr, cfg.seed,
                 cfg.log_interval, state=state, dump_dir=dump_dir)


def evaluate_from_config(ds: Dataset, cfg: RunConfig, predictor: Predictor) -> list[DiceReport]:
    fold = fold_for(ds, cfg)
    reports = []
    if cfg.setting in ("1", "both"):
        reports.append(evaluate_setting_1(ds, fold, predictor))
    if cfg.setting in ("2", "both"):
        reports.append(evaluate_setting_2(ds, fold, predictor))
    return reports
