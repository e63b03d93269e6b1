import hashlib
from pathlib import Path

import numpy as np
import pytest

from catnet import cli
from catnet.io import Checkpoint

QUICK = ["--iters", "4", "--log-interval", "2", "--depth", "2"]


def digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def tree(root: Path) -> set[str]:
    return {str(p.relative_to(root)) for p in root.rglob("*")}


@pytest.fixture
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds") / "data"
    assert cli.main(["gen", "--seed", "3", "--out", str(d), "--samples-per-class", "5"]) == 0
    return d


@pytest.fixture
def data3(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds3") / "data"
    assert cli.main(["gen", "--seed", "4", "--out", str(d), "--samples-per-class", "3"]) == 0
    return d


# ---------------------------------------------------------------- gen

def test_gen_deterministic_digest(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen", "--seed", "7", "--out", str(tmp_path / name), "--n-classes", "4",
                         "--samples-per-class", "5"]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_gen_manifest_counts(data):
    lines = (data / "manifest.txt").read_text().splitlines()
    assert len(lines) == len(list((data / "images").iterdir())) == len(list((data / "masks").iterdir())) == 50


def test_gen_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = cli.main(["gen", "--out", str(blocker / "sub"), "--n-classes", "4", "--samples-per-class", "5"])
    assert code == 1 and "cannot write" in capsys.readouterr().err
    assert tree(tmp_path) == {"file"}


def test_gen_failure_midway_leaves_no_partial_files(tmp_path, monkeypatch):
    import catnet.data as data_mod

    real = data_mod.save_tensor
    calls = {"n": 0}

    def flaky(path, arr):
        calls["n"] += 1
        if calls["n"] == 7:
            raise OSError("disk full")
        real(path, arr)

    monkeypatch.setattr(data_mod, "save_tensor", flaky)
    out = tmp_path / "new"
    assert cli.main(["gen", "--out", str(out), "--n-classes", "4", "--samples-per-class", "5"]) == 1
    assert not out.exists()

    existing = tmp_path / "keep"
    existing.mkdir()
    (existing / "mine.txt").write_text("user file")
    calls["n"] = 0
    assert cli.main(["gen", "--out", str(existing), "--n-classes", "4", "--samples-per-class", "5"]) == 1
    assert tree(existing) == {"mine.txt"}


def test_gen_validation_error(tmp_path, capsys):
    assert cli.main(["gen", "--out", str(tmp_path / "x"), "--n-classes", "2"]) == 1
    assert capsys.readouterr().err
    assert not (tmp_path / "x").exists()


# ---------------------------------------------------------------- train

def test_train_outputs(data, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(out), "--iters", "6", "--log-interval", "2",
                     "--depth", "2"]) == 0
    assert {"checkpoint.ctck", "loss.csv", "loss.png", "config.txt"} <= tree(out)
    rows = (out / "loss.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss" and len(rows) - 1 == 6 // 2
    assert (out / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert Checkpoint.load(out / "checkpoint.ctck").iteration == 6


def test_train_resume_exact(data, tmp_path):
    base = ["--data", str(data), "--log-interval", "2", "--depth", "2", "--seed", "5"]
    assert cli.main(["train", *base, "--out", str(tmp_path / "full"), "--iters", "6"]) == 0
    assert cli.main(["train", *base, "--out", str(tmp_path / "half"), "--iters", "2"]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "resumed"), "--iters", "6",
                     "--resume", str(tmp_path / "half" / "checkpoint.ctck")]) == 0
    a = Checkpoint.load(tmp_path / "full" / "checkpoint.ctck")
    b = Checkpoint.load(tmp_path / "resumed" / "checkpoint.ctck")
    assert a.to_bytes() == b.to_bytes()
    assert (tmp_path / "full" / "loss.csv").read_bytes() == (tmp_path / "resumed" / "loss.csv").read_bytes()


def test_train_missing_dataset(tmp_path, capsys):
    missing = tmp_path / "no_such_data"
    assert cli.main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_train_missing_resume(data, tmp_path, capsys):
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "o"),
                     "--resume", str(tmp_path / "nope.ctck")]) == 1
    assert "nope.ctck" in capsys.readouterr().err


def test_invalid_config_rejected_before_compute(data, tmp_path):
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--tau", "0.3"]) == 1
    assert not (tmp_path / "o").exists()


def test_diverged_training_exit_code(data, tmp_path, monkeypatch):
    import catnet.harness as H
    from catnet.tensor import Tensor

    monkeypatch.setattr(H, "episode_loss", lambda *a: Tensor(np.float32("inf"), requires_grad=True))
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "o"), *QUICK]) == 2
    assert (tmp_path / "o" / "diverged_episode" / "query_truth.ctnt").is_file()


# ---------------------------------------------------------------- eval

def test_eval_stub_all_ones(data3, tmp_path):
    out = tmp_path / "e"
    assert cli.main(["eval", "--data", str(data3), "--out", str(out), "--stub"]) == 0
    for s in ("1", "2"):
        for line in (out / f"report_setting{s}.kv").read_text().splitlines():
            assert "dice_mean=1.000000" in line
    kv2 = (out / "report_setting2.kv").read_text().splitlines()
    per_class = [line for line in kv2 if "class=all" not in line]
    assert per_class and all(line.endswith("n_episodes=6") for line in per_class)


def test_eval_rerun_identical_bytes(data, tmp_path):
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(run), *QUICK]) == 0
    assert cli.main(["eval", "--data", str(data), "--out", str(run), "--setting", "2"]) == 0
    first = {p: (run / p).read_bytes() for p in ("report_setting2.kv", "report_setting2.txt", "iteration_dice.csv")}
    assert cli.main(["eval", "--data", str(data), "--out", str(run), "--setting", "2"]) == 0
    assert all((run / p).read_bytes() == b for p, b in first.items())
    assert not (run / "report_setting1.kv").exists()
    trace = (run / "iteration_dice.csv").read_text().splitlines()
    assert len(trace) == 1 + 3  # header, classifier mask, two iterations


def test_eval_missing_checkpoint(data, tmp_path, capsys):
    assert cli.main(["eval", "--data", str(data), "--out", str(tmp_path / "x")]) == 1
    assert "checkpoint" in capsys.readouterr().err


# ---------------------------------------------------------------- ablate

def test_ablate_cells_and_failure_marking(data, tmp_path, monkeypatch):
    real = cli.run_cell

    def sometimes(ds, cfg):
        if cfg.mode == "q2s" and cfg.depth == 1:
            raise FloatingPointError("boom")
        return real(ds, cfg)

    monkeypatch.setattr(cli, "run_cell", sometimes)
    out = tmp_path / "ab"
    assert cli.main(["ablate", "--data", str(data), "--out", str(out), "--iters", "2", "--log-interval", "1",
                     "--depth", "2", "--ablate-modes", "s2q,q2s,bidir", "--ablate-depths", "1,2,3"]) == 0
    kv = (out / "ablation.kv").read_text().splitlines()
    comp = [line for line in kv if line.startswith("table=components")]
    sweep = [line for line in kv if line.startswith("table=depth")]
    assert len(comp) == 3 * 2 and len(sweep) == 3
    failed = [line for line in kv if "status=failed" in line]
    assert failed == ["table=components mode=q2s iter=off depth=1 dice_mean=nan status=failed"]
    text = (out / "ablation.txt").read_text()
    assert "FAILED" in text and "S<->Q" in text and "Q->S" in text
    assert (out / "depth_sweep.png").is_file()


def test_ablate_cell_matches_train_then_eval(data, tmp_path):
    flags = ["--data", str(data), "--iters", "3", "--log-interval", "1", "--depth", "2", "--seed", "2"]
    assert cli.main(["ablate", *flags, "--out", str(tmp_path / "ab"), "--ablate-modes", "bidir",
                     "--ablate-depths", "2"]) == 0
    assert cli.main(["train", *flags, "--out", str(tmp_path / "run")]) == 0
    assert cli.main(["eval", *flags, "--out", str(tmp_path / "run"), "--setting", "2"]) == 0
    cell = [line for line in (tmp_path / "ab" / "ablation.kv").read_text().splitlines()
            if line.startswith("table=components mode=bidir iter=on")][0]
    overall = [line for line in (tmp_path / "run" / "report_setting2.kv").read_text().splitlines()
               if "class=all" in line][0]
    assert cell.split()[4] == overall.split()[3]  # dice_mean=...


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_report(tmp_path):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
    lines = (tmp_path / "g" / "gradcheck.txt").read_text().splitlines()
    from catnet.gradcheck import MODULE_CASES, OP_CASES
    assert len(lines) == len(OP_CASES) + len(MODULE_CASES)
    assert all(line.startswith("PASS") for line in lines)


def test_gradcheck_corrupt_hook(tmp_path, capsys):
    assert cli.main(["gradcheck", "--corrupt", "layer_norm"]) == 2
    out = capsys.readouterr().out
    assert "FAIL op     layer_norm" in out


# ---------------------------------------------------------------- containment

def test_commands_write_only_inside_out(data, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = tree(tmp_path)
    data_before = digest(data)
    out = tmp_path / "only_here"
    assert cli.main(["train", "--data", str(data), "--out", str(out), *QUICK]) == 0
    assert cli.main(["eval", "--data", str(data), "--out", str(out)]) == 0
    assert cli.main(["gradcheck", "--out", str(out)]) == 0
    new = {p for p in tree(tmp_path) - before if not p.startswith("only_here")}
    assert not new
    assert digest(data) == data_before


def test_config_file_with_flag_override(data, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("depth=2\niters=2\nlog_interval=1\nseed=9\n")
    out = tmp_path / "c"
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--iters", "3"]) == 0
    saved = (out / "config.txt").read_text()
    assert "depth=2\n" in saved and "iters=3\n" in saved and "seed=9\n" in saved


def test_ablation_table_reproduces_published_improvements():
    """Feeding the published Dice values through the table formatter yields
    the published improve column."""
    from catnet.config import RunConfig

    cfg = RunConfig(depth=4)
    components, sweep = cli.ablation_cells(cfg)
    assert components == [("s2q", 1), ("s2q", 4), ("q2s", 1), ("q2s", 4), ("bidir", 1), ("bidir", 4)]
    published = {("s2q", 1): 0.6672, ("q2s", 1): 0.6598, ("bidir", 1): 0.6862,
                 ("s2q", 4): 0.6768, ("q2s", 4): 0.6654, ("bidir", 4): 0.7088}
    results = dict(published)
    results.update({("bidir", d): 0.68 for d in (2, 3, 5)})
    text, _ = cli.format_ablation(cfg, components, sweep, results)
    rows = text.splitlines()[2:8]
    assert [r.split()[-1] for r in rows] == ["-", "-0.74", "+1.90", "+0.96", "+0.56", "+2.26"]


def test_eval_truncated_depth(data, tmp_path):
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(run), *QUICK]) == 0
    assert cli.main(["eval", "--data", str(data), "--out", str(run), "--setting", "2", "--eval-depth", "1"]) == 0
    assert (run / "report_setting2.kv").is_file()
    assert cli.main(["eval", "--data", str(data), "--out", str(run), "--eval-depth", "3"]) == 1
