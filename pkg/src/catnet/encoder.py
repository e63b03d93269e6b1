"""Mask-incorporated feature extraction.

A small shared CNN encodes query and support images. The support mask is
pooled against the support features; the pooled vector is tiled over the
feature grid and appended to both streams, a cosine similarity map against it
is appended to the query stream, and a two-layer 1x1 classifier turns that
into the initial query mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import Params, kaiming, param
from .proto import masked_mean
from .tensor import ConfigError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2)
    embed_dim: int = 64

    def __post_init__(self):
        if len(self.stage_channels) != len(self.strides) or not self.stage_channels:
            raise ConfigError("stage_channels and strides must have the same non-zero length")
        if self.stage_channels[-1] != self.embed_dim:
            raise ConfigError("final stage channel count must equal embed_dim")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))


@dataclass
class FeatureMap:
    tensor: Tensor
    stride: int

    @property
    def hw(self) -> tuple[int, int]:
        return self.tensor.shape[1], self.tensor.shape[2]


@dataclass
class MifeOutput:
    fq: Tensor  # [D, h, w] query features fed to attention
    fs: Tensor  # [D, h, w] support features fed to attention
    pooled: Tensor  # [D]
    similarity: Tensor  # [1, h, w]
    logits: Tensor  # [h, w]
    support_mask: np.ndarray  # [h, w] binary, downsampled
    extras: dict = field(default_factory=dict)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Params:
    p = Params()
    cin = cfg.in_channels
    for s, cout in enumerate(cfg.stage_channels):
        for j, ci in enumerate((cin, cout)):
            p[f"stage{s}.conv{j}.w"] = param(kaiming(rng, (cout, ci, 3, 3), ci * 9), f"stage{s}.conv{j}.w")
            p[f"stage{s}.conv{j}.b"] = param(np.zeros(cout), f"stage{s}.conv{j}.b")
        cin = cout
    return p


def init_mife_head(cfg: EncoderConfig, rng: np.random.Generator, hidden: int | None = None) -> Params:
    d = cfg.embed_dim
    hidden = hidden or d
    p = Params()
    p["cls0.w"] = param(kaiming(rng, (hidden, 2 * d + 1, 1, 1), 2 * d + 1), "cls0.w")
    p["cls0.b"] = param(np.zeros(hidden), "cls0.b")
    p["cls1.w"] = param(kaiming(rng, (1, hidden, 1, 1), hidden) * 0.5, "cls1.w")
    p["cls1.b"] = param(np.zeros(1), "cls1.b")
    p["fuse.w"] = param(kaiming(rng, (d, 2 * d, 1, 1), 2 * d) * 0.5, "fuse.w")
    p["fuse.b"] = param(np.zeros(d), "fuse.b")
    return p


def extract_features(image: Tensor, params: Params, cfg: EncoderConfig) -> FeatureMap:
    c, h, w = image.shape
    s = cfg.total_stride
    if c != cfg.in_channels:
        raise ConfigError(f"image has {c} channels, encoder expects {cfg.in_channels}")
    if h % s or w % s:
        raise ConfigError(f"image extent {h}x{w} not divisible by total stride {s}")
    x = image
    for i, stride in enumerate(cfg.strides):
        x = T.relu(T.conv2d(x, params[f"stage{i}.conv0.w"], params[f"stage{i}.conv0.b"], stride=stride, pad=1))
        x = T.relu(T.conv2d(x, params[f"stage{i}.conv1.w"], params[f"stage{i}.conv1.b"], stride=1, pad=1))
    return FeatureMap(x, s)


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour downsampling sampling the centre pixel of each cell."""
    m = np.asarray(mask, dtype=np.float32)
    if stride == 1:
        return (m > 0.5).astype(np.float32)
    off = stride // 2
    return (m[off::stride, off::stride] > 0.5).astype(np.float32)


def tile(vec: Tensor, h: int, w: int) -> Tensor:
    """Expand a [D] vector to a [D, h, w] map."""
    d = vec.shape[0]
    ones = Tensor(np.ones((1, h * w), dtype=T.default_dtype()))
    return T.reshape(T.matmul(T.reshape(vec, (d, 1)), ones), (d, h, w))


def incorporate_mask(fq: FeatureMap, fs: FeatureMap, support_mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Append the masked-average-pooled support vector to both streams.

    ``support_mask`` may be given at image or feature resolution. Returns
    (augmented query [2D, h, w], augmented support [2D, h, w], pooled [D]).
    """
    h, w = fs.hw
    m = np.asarray(support_mask)
    if m.shape != (h, w):
        m = downsample_mask(m, fs.stride)
    if m.shape != (h, w):
        raise T.ShapeError(f"support mask {np.shape(support_mask)} does not map onto {h}x{w}")
    if not m.any():
        T.warn("empty_support_mask")
    pooled = masked_mean(fs.tensor, m)
    expanded = tile(pooled, h, w)
    return T.concat([fq.tensor, expanded], 0), T.concat([fs.tensor, expanded], 0), pooled


def similarity_map(fq: FeatureMap, pooled_support: Tensor) -> Tensor:
    d, h, w = fq.tensor.shape
    tokens = T.transpose(T.reshape(fq.tensor, (d, h * w)))
    return T.reshape(T.cosine_rows(tokens, pooled_support), (1, h, w))


def classifier_logits(augmented_query: Tensor, sim: Tensor, params: Params) -> Tensor:
    if augmented_query.shape[1:] != sim.shape[1:]:
        raise T.ShapeError(f"classifier inputs misaligned: {augmented_query.shape} vs {sim.shape}")
    x = T.concat([augmented_query, sim], 0)
    x = T.relu(T.conv2d(x, params["cls0.w"], params["cls0.b"]))
    x = T.conv2d(x, params["cls1.w"], params["cls1.b"])
    return T.reshape(x, x.shape[1:])


def classify_initial_mask(augmented_query: Tensor, sim: Tensor, params: Params) -> Tensor:
    """Foreground probabilities [h, w] in (0, 1)."""
    return T.sigmoid(classifier_logits(augmented_query, sim, params))


def fuse(augmented: Tensor, params: Params) -> Tensor:
    """Project a [2D, h, w] augmented stream back to D channels (1x1 conv)."""
    return T.conv2d(augmented, params["fuse.w"], params["fuse.b"])


def mife(
    support_image: Tensor,
    support_mask: np.ndarray,
    query_image: Tensor,
    enc_params: Params,
    head_params: Params,
    cfg: EncoderConfig,
) -> MifeOutput:
    fs = extract_features(support_image, enc_params, cfg)
    fq = extract_features(query_image, enc_params, cfg)
    ms = downsample_mask(support_mask, fs.stride)
    aug_q, aug_s, pooled = incorporate_mask(fq, fs, ms)
    sim = similarity_map(fq, pooled)
    logits = classifier_logits(aug_q, sim, head_params)
    return MifeOutput(
        fq=fuse(aug_q, head_params),
        fs=fuse(aug_s, head_params),
        pooled=pooled,
        similarity=sim,
        logits=logits,
        support_mask=ms,
    )
