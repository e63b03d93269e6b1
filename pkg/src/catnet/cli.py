"""``catnet`` command line: gen, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

from . import gradcheck, plot
from .config import ConfigValidationError, RunConfig
from .data import generate_synthetic_dataset, load_dataset, save_dataset
from .harness import (
    CatNetPredictor,
    TrainingDiverged,
    echo_truth,
    evaluate_from_config,
    evaluate_setting_2,
    fold_for,
    from_checkpoint,
    iteration_dice_trace,
    setting_2_pairs,
    to_checkpoint,
    train_from_config,
)
from .io import Checkpoint

logger = logging.getLogger("catnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
CHECKPOINT = "checkpoint.ctck"


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_INVALID):
        super().__init__(msg)
        self.code = code


# --------------------------------------------------------------------------
# Argument handling


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--tau-hat", dest="tau_hat", type=float)
    p.add_argument("--setting", choices=["1", "2", "both"])
    p.add_argument("--mode", choices=["s2q", "q2s", "bidir"])
    p.add_argument("--ablate-modes", dest="ablate_modes")
    p.add_argument("--ablate-depths", dest="ablate_depths")
    p.add_argument("--resume")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--log-interval", dest="log_interval", type=int)
    p.add_argument("--tied", action="store_const", const=True)
    p.add_argument("--deep-supervision", dest="deep_supervision", action="store_const", const=True)
    p.add_argument("--no-aux-loss", dest="aux_loss", action="store_const", const=False)
    p.add_argument("--config", help="key=value config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("gen", "generate the synthetic dataset"),
        ("train", "episodic training"),
        ("eval", "Dice evaluation under settings I / II"),
        ("ablate", "component and depth ablation tables"),
        ("gradcheck", "finite-difference gradient report"),
    ]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--stub", action="store_true", help="echo the ground truth (harness check)")
            p.add_argument("--eval-depth", dest="eval_depth", type=int,
                           help="run only the first N CMAT blocks of the checkpoint")
        if name == "gradcheck":
            p.add_argument("--corrupt", action="append", default=[], help=argparse.SUPPRESS)
    return parser


def config_from_args(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    if getattr(args, "config", None):
        base = RunConfig.from_text(Path(args.config).read_text())
    names = {f.name for f in fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names and v is not None}
    return base.with_(**overrides)


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise CliError("--out is required")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {out}: {e}") from e
    return out


def _dataset(cfg: RunConfig):
    if not cfg.data:
        raise CliError("--data is required")
    if not (Path(cfg.data) / "manifest.txt").is_file():
        raise CliError(f"dataset not found: {cfg.data} (no manifest.txt)")
    return load_dataset(cfg.data)


# --------------------------------------------------------------------------
# Commands


def cmd_gen(cfg: RunConfig) -> int:
    try:
        ds = generate_synthetic_dataset(cfg.seed, cfg.n_classes, cfg.samples_per_class, cfg.image_size)
    except ValueError as e:
        raise CliError(str(e)) from e
    out = Path(cfg.out) if cfg.out else None
    if out is None:
        raise CliError("--out is required")
    existed = out.exists()
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = save_dataset(ds, out)
    except OSError as e:
        _remove_partial(out, existed)
        raise CliError(f"cannot write dataset to {out}: {e}") from e
    print(f"wrote {ds.n} samples ({cfg.n_classes} classes) to {out} [{len(written)} files]")
    return EXIT_OK


def _remove_partial(out: Path, existed: bool) -> None:
    if not out.is_dir():
        return
    if not existed:
        shutil.rmtree(out, ignore_errors=True)
        return
    for sub in ("images", "masks"):
        shutil.rmtree(out / sub, ignore_errors=True)
    (out / "manifest.txt").unlink(missing_ok=True)


def cmd_train(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    state = None
    if cfg.resume:
        path = Path(cfg.resume)
        if not path.is_file():
            raise CliError(f"checkpoint not found: {path}")
        saved_cfg, state = from_checkpoint(Checkpoint.load(path))
        cfg = saved_cfg.with_(iters=cfg.iters, data=cfg.data, out=cfg.out, resume=cfg.resume)
    try:
        state = train_from_config(ds, cfg, state=state, dump_dir=out)
    except TrainingDiverged as e:
        raise CliError(str(e), EXIT_RUNTIME) from e
    to_checkpoint(state, cfg).save(out / CHECKPOINT)
    (out / "config.txt").write_text(cfg.with_(data="", out="", resume="").to_text())
    rows = "".join(f"{i},{v:.6f}\n" for i, v in state.loss_curve)
    (out / "loss.csv").write_text("iteration,loss\n" + rows)
    plot.loss_curve(state.loss_curve, out / "loss.png")
    curve = [v for _, v in state.loss_curve]
    if curve:
        print(f"loss {curve[0]:.4f} -> {curve[-1]:.4f}  {plot.sparkline(curve)}")
    print(f"checkpoint: {out / CHECKPOINT}")
    return EXIT_OK


def _predictor(cfg: RunConfig, args_checkpoint: str | None, stub: bool, depth: int | None = None):
    if stub:
        return cfg, echo_truth, None
    path = args_checkpoint or (str(Path(cfg.out) / CHECKPOINT) if cfg.out else None)
    if not path or not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    saved, state = from_checkpoint(Checkpoint.load(path))
    cfg = saved.with_(data=cfg.data, out=cfg.out, setting=cfg.setting)
    if depth is not None and not 0 <= depth <= cfg.depth:
        raise CliError(f"--eval-depth must be in [0, {cfg.depth}] for this checkpoint")
    return cfg, CatNetPredictor(state.params, cfg.model_config(), depth), state


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, stub: bool = False,
             eval_depth: int | None = None) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    cfg, predictor, state = _predictor(cfg, checkpoint, stub, eval_depth)
    reports = evaluate_from_config(ds, cfg, predictor)
    for rep in reports:
        (out / f"report_setting{rep.setting}.txt").write_text(rep.to_table())
        (out / f"report_setting{rep.setting}.kv").write_text(rep.to_kv())
        print(rep.to_table())
    if state is not None:
        mcfg = cfg.model_config()
        trace = iteration_dice_trace(ds, fold_for(ds, cfg), state.params, mcfg, setting_2_pairs(ds, fold_for(ds, cfg)))
        (out / "iteration_dice.csv").write_text(
            "iteration,dice\n" + "".join(f"{i},{d:.6f}\n" for i, d in enumerate(trace)))
        plot.bars(["init"] + [str(i) for i in range(1, len(trace))], trace, out / "iteration_dice.png")
    return EXIT_OK


def run_cell(ds, cfg: RunConfig) -> float:
    """Train and evaluate (setting II) one ablation cell."""
    state = train_from_config(ds, cfg)
    rep = evaluate_setting_2(ds, fold_for(ds, cfg), CatNetPredictor(state.params, cfg.model_config()))
    return rep.mean


def ablation_cells(cfg: RunConfig) -> tuple[list[tuple[str, int]], list[tuple[str, int]]]:
    """(mode, depth) cells of the component table and of the depth sweep."""
    components = [(m, d) for m in cfg.modes() for d in (1, cfg.depth)]
    sweep = [("bidir", d) for d in cfg.depths()]
    return components, sweep


def cmd_ablate(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    components, sweep = ablation_cells(cfg)
    results: dict[tuple[str, int], float | None] = {}
    for cell in components + sweep:
        if cell in results:
            continue
        mode, depth = cell
        try:
            results[cell] = run_cell(ds, cfg.with_(mode=mode, depth=depth))
            logger.info("cell %s depth %d dice %.4f", mode, depth, results[cell])
        except Exception as e:  # a failed cell must not sink the table
            logger.error("cell %s depth %d failed: %s", mode, depth, e)
            results[cell] = None
    text, kv = format_ablation(cfg, components, sweep, results)
    (out / "ablation.txt").write_text(text)
    (out / "ablation.kv").write_text(kv)
    ok = [(str(d), results[("bidir", d)]) for _, d in sweep if results[("bidir", d)] is not None]
    if ok:
        plot.bars([k for k, _ in ok], [v for _, v in ok], out / "depth_sweep.png")
    print(text)
    return EXIT_OK


_ARROWS = {"s2q": "S->Q", "q2s": "Q->S", "bidir": "S<->Q"}


def format_ablation(cfg: RunConfig, components, sweep, results) -> tuple[str, str]:
    """Text table and kv lines. The improve column compares a no-iteration
    row with the first branch's no-iteration row, and an iteration row with
    the same branch without iteration."""

    def fmt(v):
        return "FAILED" if v is None else f"{100 * v:6.2f}"

    def improve(mode, depth):
        base_cell = (mode, 1) if depth > 1 else components[0]
        v, b = results.get((mode, depth)), results.get(base_cell)
        if (mode, depth) == components[0] or v is None or b is None:
            return "-"
        return f"{100 * (v - b):+.2f}"

    lines = ["Component ablation (setting II)", f"{'branch':<8} {'iter':<5} {'depth':>5} {'dice':>7} {'improve':>8}"]
    kv = []
    # no-iteration rows first, then the iteration rows, as in the published table layout
    ordered = [c for c in components if c[1] == 1] + [c for c in components if c[1] > 1]
    for mode, depth in ordered:
        v = results[(mode, depth)]
        it = "on" if depth > 1 else "off"
        lines.append(f"{_ARROWS[mode]:<8} {it:<5} {depth:>5} {fmt(v):>7} {improve(mode, depth):>8}")
        kv.append(f"table=components mode={mode} iter={it} depth={depth} "
                  f"dice_mean={'nan' if v is None else f'{v:.6f}'} status={'failed' if v is None else 'ok'}")
    lines += ["", "Depth sweep (S<->Q)", f"{'depth':>5} {'dice':>7}"]
    for mode, depth in sweep:
        v = results[(mode, depth)]
        lines.append(f"{depth:>5} {fmt(v):>7}")
        kv.append(f"table=depth mode={mode} depth={depth} "
                  f"dice_mean={'nan' if v is None else f'{v:.6f}'} status={'failed' if v is None else 'ok'}")
    return "\n".join(lines) + "\n", "\n".join(kv) + "\n"


def cmd_gradcheck(cfg: RunConfig, corrupt: tuple[str, ...] = ()) -> int:
    results = gradcheck.run_all(cfg.seed, corrupt=corrupt)
    text = "".join(r.line() + "\n" for r in results)
    if cfg.out:
        (_out_dir(cfg) / "gradcheck.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format="%(message)s")
    # basicConfig is a no-op after the first call, so set the level on our own logger
    logger.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = config_from_args(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.stub, args.eval_depth)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        return cmd_gradcheck(cfg, tuple(args.corrupt))
    except (CliError,) as e:
        print(f"catnet {args.command}: {e}", file=sys.stderr)
        return e.code
    except (ConfigValidationError, ValueError) as e:
        print(f"catnet {args.command}: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as e:
        print(f"catnet {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
