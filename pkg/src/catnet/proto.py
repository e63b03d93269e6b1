"""Prototypical segmentation head.

Masked average pooling builds one prototype per class (background and
foreground for the 1-way task); every query pixel is classified by a softmax
over ``alpha * cos(feature, prototype)``. The foreground probability is then
cut twice: at ``tau`` for the reported mask and at the lower ``tau_hat`` for
the dilated mask that gates the next round of cross attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ProtoConfig:
    alpha: float = 20.0
    tau: float = 0.5
    tau_hat: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.tau_hat < self.tau < 1.0:
            raise ValueError(f"need 0 < tau_hat < tau < 1, got tau={self.tau}, tau_hat={self.tau_hat}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class Prototype:
    class_id: int
    vector: Tensor


@dataclass
class MaskPair:
    mask: np.ndarray
    dilated: np.ndarray
    probabilities: Tensor


def masked_mean(features: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the feature vectors of ``features`` [D, h, w] where ``mask`` [h, w] is 1.

    An empty mask yields the zero vector and bumps ``empty_mask_pool``.
    """
    d = features.shape[0]
    m = np.asarray(mask)
    if m.shape != features.shape[1:]:
        raise T.ShapeError(f"mask {m.shape} does not match feature map {features.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("pooling mask must be binary")
    n = float(m.sum())
    flat = T.reshape(features, (d, -1))
    col = Tensor(m.reshape(-1, 1).astype(T.default_dtype()))
    pooled = T.reshape(T.matmul(flat, col), (d,))
    if n == 0:
        T.warn("empty_mask_pool")
        return T.scale(pooled, 0.0)
    return T.scale(pooled, 1.0 / n)


def masked_average_pooling(features: Tensor, masks: np.ndarray) -> list[Prototype]:
    """Prototypes from K support shots.

    ``features`` is [K, D, h, w] (a [D, h, w] map is taken as K=1) and
    ``masks`` is [K, h, w, C] binary. Each shot's per-class masked mean is
    averaged over shots; a shot with no pixels of a class contributes zeros.
    """
    if features.data.ndim == 3:
        features = T.reshape(features, (1,) + features.shape)
    masks = np.asarray(masks)
    if masks.ndim == 3:
        masks = masks[None]
    k = features.shape[0]
    if k < 1 or masks.shape[0] != k:
        raise T.ShapeError(f"{k} feature shots vs masks {masks.shape}")
    c = masks.shape[-1]
    protos = []
    for cls in range(c):
        acc = None
        for shot in range(k):
            f = _shot(features, shot)
            v = masked_mean(f, masks[shot, :, :, cls])
            acc = v if acc is None else T.add(acc, v)
        protos.append(Prototype(cls, T.scale(acc, 1.0 / k)))
    return protos


def _shot(features: Tensor, i: int) -> Tensor:
    k, d, h, w = features.shape
    if k == 1:
        return T.reshape(features, (d, h, w))
    sel = np.zeros((1, k), dtype=T.default_dtype())
    sel[0, i] = 1.0
    flat = T.reshape(features, (k, d * h * w))
    return T.reshape(T.matmul(Tensor(sel), flat), (d, h, w))


def fg_bg_prototypes(features: Tensor, mask: np.ndarray) -> list[Prototype]:
    """Background (class 0) and foreground (class 1) prototypes from one shot."""
    m = np.asarray(mask, dtype=np.float32)
    stacked = np.stack([1.0 - m, m], axis=-1)
    return masked_average_pooling(features, stacked)


def prototype_logits(fq: Tensor, prototypes: list[Prototype], alpha: float) -> Tensor:
    """``alpha * cos(F_q(x, y), p_c)`` as a [C, h, w] tensor."""
    d, h, w = fq.shape
    tokens = T.transpose(T.reshape(fq, (d, h * w)))
    rows = [T.reshape(T.cosine_rows(tokens, p.vector), (1, h * w)) for p in prototypes]
    return T.reshape(T.scale(T.concat(rows, 0), alpha), (len(prototypes), h, w))


def prototype_segment(fq: Tensor, prototypes: list[Prototype], cfg: ProtoConfig) -> Tensor:
    """Per-pixel class probabilities [h, w, C] from cosine similarity to prototypes."""
    if len(prototypes) < 2:
        raise ValueError("prototype_segment needs at least two prototypes")
    logits = prototype_logits(fq, prototypes, cfg.alpha)
    return T.transpose(T.softmax(logits, axis=0), (1, 2, 0))


def double_threshold(probabilities: Tensor, cfg: ProtoConfig) -> MaskPair:
    p = probabilities.data
    T.record_branch(p > cfg.tau_hat)
    T.record_branch(p > cfg.tau)
    return MaskPair(
        mask=(p > cfg.tau).astype(np.float32),
        dilated=(p > cfg.tau_hat).astype(np.float32),
        probabilities=probabilities,
    )


def soft_dice_loss(prob: Tensor, truth: np.ndarray, eps: float = 1.0) -> Tensor:
    """``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` on soft probabilities."""
    g = Tensor(np.asarray(truth, dtype=T.default_dtype()))
    if g.shape != prob.shape:
        raise T.ShapeError(f"dice loss: prediction {prob.shape} vs truth {g.shape}")
    inter = T.sum(T.mul(prob, g))
    num = T.add_scalar(T.scale(inter, 2.0), eps)
    den = T.add_scalar(T.sum(prob), float(g.data.sum()) + eps)
    return T.add_scalar(T.scale(T.div(num, den), -1.0), 1.0)
