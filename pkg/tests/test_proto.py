import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from catnet import tensor as T
from catnet.proto import (
    ProtoConfig, Prototype, double_threshold, fg_bg_prototypes, masked_average_pooling, masked_mean,
    prototype_logits, prototype_segment, soft_dice_loss,
)
from catnet.tensor import Tensor


def pool_oracle(feats, masks):
    """Brute-force masked average pooling: feats [K,D,h,w], masks [K,h,w,C]."""
    k, d, h, w = feats.shape
    c = masks.shape[-1]
    out = np.zeros((c, d))
    for cls in range(c):
        for shot in range(k):
            acc, n = np.zeros(d), 0
            for i in range(h):
                for j in range(w):
                    if masks[shot, i, j, cls]:
                        acc += feats[shot, :, i, j]
                        n += 1
            if n:
                out[cls] += acc / n
        out[cls] /= k
    return out


def test_pooling_full_mask_is_mean(rng):
    f = rng.normal(size=(2, 4, 3, 3))
    protos = masked_average_pooling(Tensor(f), np.ones((2, 3, 3, 1)))
    np.testing.assert_allclose(protos[0].vector.data, f.mean(axis=(0, 2, 3)), atol=1e-5)


def test_pooling_single_pixel(rng):
    f = rng.normal(size=(4, 3, 3))
    m = np.zeros((3, 3, 1))
    m[1, 2, 0] = 1
    protos = masked_average_pooling(Tensor(f), m)
    np.testing.assert_allclose(protos[0].vector.data, f[:, 1, 2], atol=1e-6)


def test_pooling_oracle_1000_cases():
    r = np.random.default_rng(77)
    kinds = ["random", "single", "full", "empty_shot"]
    for case in range(1200):
        kind = kinds[case % 4]
        k, d = int(r.integers(1, 4)), int(r.integers(1, 6))
        h, w, c = int(r.integers(1, 6)), int(r.integers(1, 6)), int(r.integers(1, 4))
        f = r.normal(size=(k, d, h, w))
        if kind == "full":
            m = np.ones((k, h, w, c))
        elif kind == "single":
            m = np.zeros((k, h, w, c))
            for s in range(k):
                for cl in range(c):
                    m[s, r.integers(h), r.integers(w), cl] = 1
        else:
            m = (r.random((k, h, w, c)) > 0.5).astype(float)
            if kind == "empty_shot":
                m[0] = 0
        got = np.stack([p.vector.data for p in masked_average_pooling(Tensor(f), m)])
        assert np.abs(got - pool_oracle(f, m)).max() <= 1e-5, (case, kind)


def test_pooling_empty_class_warns_zero(rng):
    f = rng.normal(size=(3, 2, 2))
    assert np.all(masked_mean(Tensor(f), np.zeros((2, 2))).data == 0)
    assert T.warnings["empty_mask_pool"] == 1


def test_pooling_shape_checks(rng):
    with pytest.raises(T.ShapeError):
        masked_mean(Tensor(rng.normal(size=(3, 2, 2))), np.ones((3, 3)))
    with pytest.raises(ValueError):
        masked_mean(Tensor(rng.normal(size=(3, 2, 2))), np.full((2, 2), 0.5))


def test_fg_bg_prototypes(rng):
    f = rng.normal(size=(4, 3, 3))
    m = np.zeros((3, 3))
    m[0, :] = 1
    bg, fg = fg_bg_prototypes(Tensor(f), m)
    assert (bg.class_id, fg.class_id) == (0, 1)
    np.testing.assert_allclose(fg.vector.data, f[:, 0, :].mean(axis=1), atol=1e-6)
    np.testing.assert_allclose(bg.vector.data, f[:, 1:, :].mean(axis=(1, 2)), atol=1e-6)


def test_closed_form_two_class_probability():
    fg = np.array([1.0, 0.0])
    bg = np.array([0.0, 1.0])
    fq = np.broadcast_to(fg[:, None, None], (2, 2, 2)).copy()
    with T.wide_precision():
        out = prototype_segment(Tensor(fq), [Prototype(0, Tensor(bg)), Prototype(1, Tensor(fg))], ProtoConfig())
        p = out.data[..., 1]
    expected = math.exp(20) / (math.exp(20) + 1)
    np.testing.assert_allclose(p, expected, rtol=0, atol=1e-12)
    assert abs(1 - expected - 2.1e-9) < 1e-10


def test_identical_prototypes_give_half(rng):
    v = Tensor(rng.normal(size=5))
    out = prototype_segment(Tensor(rng.normal(size=(5, 3, 3))), [Prototype(0, v), Prototype(1, v)], ProtoConfig())
    assert np.all(out.data == 0.5)


def test_small_alpha_is_uniform(rng):
    protos = [Prototype(c, Tensor(rng.normal(size=4))) for c in range(3)]
    out = prototype_segment(Tensor(rng.normal(size=(4, 3, 3))), protos, ProtoConfig(alpha=1e-9))
    np.testing.assert_allclose(out.data, 1 / 3, atol=1e-7)


def test_zero_query_feature_uniform(rng):
    protos = [Prototype(c, Tensor(rng.normal(size=4))) for c in range(2)]
    out = prototype_segment(Tensor(np.zeros((4, 2, 2))), protos, ProtoConfig())
    assert np.all(out.data == 0.5) and T.warnings["zero_norm_cosine"] > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.floats(0.1, 10))
def test_rows_sum_and_scale_invariance(seed, a, b):
    r = np.random.default_rng(seed)
    fq = r.normal(size=(6, 3, 4))
    vs = [r.normal(size=6) for _ in range(3)]
    cfg = ProtoConfig(alpha=5.0)
    out = prototype_segment(Tensor(fq), [Prototype(i, Tensor(v)) for i, v in enumerate(vs)], cfg).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    scaled = prototype_segment(Tensor(a * fq), [Prototype(i, Tensor(b * v)) for i, v in enumerate(vs)], cfg).data
    assert np.abs(out - scaled).max() <= 1e-5


def test_softmax_shift_invariance(rng):
    logits = prototype_logits(Tensor(rng.normal(size=(4, 3, 3))),
                              [Prototype(c, Tensor(rng.normal(size=4))) for c in range(2)], 20.0)
    a = T.softmax(logits, 0).data
    b = T.softmax(T.add_scalar(logits, 17.0), 0).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_double_threshold_cases():
    cfg = ProtoConfig()
    mp = double_threshold(Tensor([[0.45]]), cfg)
    assert mp.mask[0, 0] == 0 and mp.dilated[0, 0] == 1
    mp = double_threshold(Tensor(np.ones((3, 3))), cfg)
    assert mp.mask.all() and mp.dilated.all()


@given(hnp.arrays(np.float32, (6, 6), elements=st.floats(0, 1, width=32)),
       st.floats(0.1, 0.9), st.floats(0.01, 0.09))
def test_mask_subset_of_dilated(p, tau, gap):
    cfg = ProtoConfig(tau=tau, tau_hat=tau - gap)
    mp = double_threshold(Tensor(p), cfg)
    assert np.all(mp.mask <= mp.dilated)


def test_proto_config_validation():
    with pytest.raises(ValueError):
        ProtoConfig(tau=0.4, tau_hat=0.5)
    with pytest.raises(ValueError):
        ProtoConfig(alpha=0)


def test_soft_dice_values():
    g = np.array([[1.0, 1.0], [0.0, 0.0]])
    perfect = soft_dice_loss(Tensor(g), g).item()
    assert abs(perfect) < 1e-7
    # 1 - (2*0 + 1) / (2 + 2 + 1)
    assert abs(soft_dice_loss(Tensor(1 - g), g).item() - 0.8) < 1e-6
    with pytest.raises(T.ShapeError):
        soft_dice_loss(Tensor(np.ones(3)), g)
