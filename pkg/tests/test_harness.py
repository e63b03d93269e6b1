import random

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from catnet import harness as H
from catnet.config import RunConfig
from catnet.data import Dataset, build_folds, sample_episode
from catnet.tensor import Tensor

TINY = RunConfig(embed_dim=16, num_heads=2, depth=2, iters=6, log_interval=2, lr=0.01)


# ---------------------------------------------------------------- dice

def test_dice_cases():
    a = np.zeros((4, 4))
    a[0, :] = 1
    assert H.dice_score(a, a) == 1.0
    b = np.zeros((4, 4))
    b[2, :] = 1
    assert H.dice_score(a, b) == 0.0
    # |P & G| = 2, |P| = |G| = 4
    p = np.zeros((4, 4))
    p[0, 2:] = 1
    p[1, :2] = 1
    assert H.dice_score(p, a) == 0.5
    assert H.dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


@given(hnp.arrays(np.bool_, (5, 6)), hnp.arrays(np.bool_, (5, 6)))
def test_dice_symmetric(p, g):
    assert H.dice_score(p.astype(float), g.astype(float)) == H.dice_score(g.astype(float), p.astype(float))


def test_dice_errors():
    with pytest.raises(ValueError):
        H.dice_score(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        H.dice_score(np.full((2, 2), 0.5), np.zeros((2, 2)))


# ---------------------------------------------------------------- evaluation protocol

def test_stub_predictor_scores_one(small_ds):
    fold = build_folds(small_ds, 5)[0]
    for rep in (H.evaluate_setting_1(small_ds, fold, H.echo_truth), H.evaluate_setting_2(small_ds, fold, H.echo_truth)):
        assert rep.mean == 1.0 and all(v == 1.0 for v in rep.per_class.values())


def test_disjoint_predictor_scores_zero(small_ds):
    fold = build_folds(small_ds, 5)[0]
    rep = H.evaluate_setting_2(small_ds, fold, lambda ep: 1.0 - ep.query_truth)
    assert rep.mean == 0.0


def test_setting_pair_counts(small_ds):
    fold = build_folds(small_ds, 5)[2]
    n = 5
    rep = H.evaluate_setting_2(small_ds, fold, H.echo_truth)
    assert all(v == n * (n - 1) for v in rep.counts.values())
    pairs = H.setting_2_pairs(small_ds, fold)
    assert len(set(pairs)) == len(pairs) == len(fold.test_classes) * n * (n - 1)
    s1 = H.setting_1_pairs(small_ds, fold)
    for c in fold.test_classes:
        idx = small_ds.samples_of(c)
        mine = [p for p in s1 if p[0] in idx]
        assert {s for s, _ in mine} == {int(idx.max())} and len(mine) == n - 1


def test_identical_samples_settings_agree():
    """All samples of a class identical: both settings score the same."""
    r = np.random.default_rng(0)
    imgs, masks, ids = [], [], []
    for c in range(4):
        img = r.normal(size=(1, 8, 8)).astype(np.float32)
        m = (r.random((8, 8)) > 0.5).astype(np.float32)
        for _ in range(4):
            imgs.append(img)
            masks.append(m)
            ids.append(c)
    ds = Dataset(np.stack(imgs), np.stack(masks), np.array(ids), 0)
    fold = build_folds(ds, 2)[0]
    pred = lambda ep: (ep.query_image[0] > 0).astype(np.float32)  # noqa: E731
    assert H.evaluate_setting_1(ds, fold, pred).mean == pytest.approx(H.evaluate_setting_2(ds, fold, pred).mean, abs=1e-12)


def _noisy_predictor(ep):
    r = np.random.default_rng(ep.query_id * 1000 + ep.support_ids[0])
    flip = r.random(ep.query_truth.shape) < 0.2
    return np.where(flip, 1 - ep.query_truth, ep.query_truth).astype(np.float32)


def test_aggregation_oracle_and_order_independence(small_ds):
    fold = build_folds(small_ds, 5)[0]
    rep = H.evaluate_setting_2(small_ds, fold, _noisy_predictor)
    for c, v in rep.per_class.items():
        vals = [r.dice for r in rep.records if r.class_id == c]
        assert v == pytest.approx(sum(vals) / len(vals), abs=1e-12)
    assert rep.mean == pytest.approx(np.mean(list(rep.per_class.values())), abs=1e-12)
    pairs = H.setting_2_pairs(small_ds, fold)
    random.Random(0).shuffle(pairs)
    shuffled = H.aggregate(H.run_pairs(small_ds, pairs, _noisy_predictor), fold.index, "2")
    assert shuffled.to_kv() == rep.to_kv()
    threaded = H.evaluate_setting_2(small_ds, fold, _noisy_predictor, workers=4)
    assert threaded.to_kv() == rep.to_kv() and threaded.to_table() == rep.to_table()


def test_report_formats(small_ds):
    fold = build_folds(small_ds, 5)[0]
    rep = H.evaluate_setting_1(small_ds, fold, H.echo_truth)
    lines = rep.to_kv().splitlines()
    assert len(lines) == len(fold.test_classes) + 1
    for line in lines:
        keys = [kv.split("=")[0] for kv in line.split()]
        assert keys == ["fold", "setting", "class", "dice_mean", "n_episodes"]
    assert lines[-1].startswith("fold=0 setting=1 class=all dice_mean=1.000000")
    assert "avg" in rep.to_table()


def test_workers_env(monkeypatch):
    monkeypatch.setenv("CATNET_THREADS", "3")
    assert H._workers() == 3
    monkeypatch.setenv("CATNET_THREADS", "junk")
    assert H._workers() == 1


# ---------------------------------------------------------------- training

def test_lr_zero_leaves_params(small_ds):
    cfg = TINY.with_(lr=0.0)
    state = H.train_from_config(small_ds, cfg)
    fresh = H.new_train_state(cfg.model_config(), cfg.seed)
    for k, t in state.params.items():
        assert np.array_equal(t.data, fresh.params[k].data)
    assert len(state.loss_curve) == cfg.iters // cfg.log_interval


def test_resume_matches_uninterrupted(small_ds):
    full = H.train_from_config(small_ds, TINY)
    half = H.train_from_config(small_ds, TINY.with_(iters=3))
    _, restored = H.from_checkpoint(H.Checkpoint.from_bytes(H.to_checkpoint(half, TINY.with_(iters=3)).to_bytes()))
    resumed = H.train_from_config(small_ds, TINY, state=restored)
    for k, t in full.params.items():
        assert np.array_equal(t.data, resumed.params[k].data), k
    assert full.loss_curve == resumed.loss_curve
    assert resumed.rng.bit_generator.state == full.rng.bit_generator.state


def test_training_deterministic(small_ds):
    a = H.train_from_config(small_ds, TINY)
    b = H.train_from_config(small_ds, TINY)
    assert a.loss_curve == b.loss_curve
    assert all(np.array_equal(t.data, b.params[k].data) for k, t in a.params.items())


def test_training_never_sees_test_classes(small_ds):
    """Replays the training episode stream and scans it for each fold."""
    for fold in build_folds(small_ds, 5):
        rng = H.new_train_state(TINY.model_config(), 0).rng
        for _ in range(500):
            ep = sample_episode(small_ds, fold, "train", rng)
            assert ep.class_id not in fold.test_classes
            assert small_ds.class_ids[ep.support_ids[0]] not in fold.test_classes


def test_nan_loss_aborts_with_dump(small_ds, tmp_path, monkeypatch):
    monkeypatch.setattr(H, "episode_loss", lambda out, truth, cfg: Tensor(np.float32("nan"), requires_grad=True))
    with pytest.raises(H.TrainingDiverged) as e:
        H.train_from_config(small_ds, TINY, dump_dir=tmp_path)
    assert e.value.iteration == 0 and "query" in str(e.value)
    assert sorted(p.name for p in (tmp_path / "diverged_episode").iterdir()) == [
        "query_image.ctnt", "query_truth.ctnt", "support_image.ctnt", "support_mask.ctnt"]


def test_checkpoint_roundtrip_strips_paths(small_ds):
    cfg = TINY.with_(data="/somewhere", out="/else")
    state = H.train_from_config(small_ds, cfg.with_(iters=2))
    ck = H.to_checkpoint(state, cfg)
    assert "/somewhere" not in ck.config_text and ck.iteration == 2
    back_cfg, back = H.from_checkpoint(H.Checkpoint.from_bytes(ck.to_bytes()))
    assert back_cfg == cfg.with_(data="", out="")
    assert back.loss_curve == state.loss_curve


def test_predictor_and_trace(small_ds):
    state = H.train_from_config(small_ds, TINY.with_(iters=2))
    mc = TINY.model_config()
    fold = build_folds(small_ds, 5)[0]
    pred = H.CatNetPredictor(state.params, mc)
    out = pred(H.make_episode(small_ds, 0, 1))
    assert out.shape == (32, 32) and set(np.unique(out)) <= {0.0, 1.0}
    trace = H.iteration_dice_trace(small_ds, fold, state.params, mc, H.setting_2_pairs(small_ds, fold)[:6])
    assert len(trace) == mc.refine.num_iterations + 1
    assert all(0.0 <= t <= 1.0 for t in trace)
    shallow = H.CatNetPredictor(state.params, mc, depth=1)
    assert shallow(H.make_episode(small_ds, 0, 1)).shape == (32, 32)
