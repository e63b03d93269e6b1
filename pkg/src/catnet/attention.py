"""Multi-head self attention and cross masked attention over token sequences.

Both blocks share one layout: multi-head attention, output projection,
residual + layer norm, then a token-wise MLP (a 1x1 convolution over the
feature grid) with a second residual + layer norm.

In the cross block, queries come from the stream being enhanced (``dst``)
while keys and values come from the other stream (``src``). Background
tokens of ``src`` get their logits filled with ``MASK_FILL`` before the
softmax, so every attention row is a distribution over ``src`` foreground
only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import Params, param, xavier
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int = 64
    num_heads: int = 4
    mlp_hidden: int | None = None
    eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.embed_dim


@dataclass
class TokenSequence:
    tensor: Tensor  # [T, D]
    origin_shape: tuple[int, int]


def flatten(fmap: Tensor) -> TokenSequence:
    d, h, w = fmap.shape
    return TokenSequence(T.transpose(T.reshape(fmap, (d, h * w))), (h, w))


def unflatten(seq: TokenSequence) -> Tensor:
    h, w = seq.origin_shape
    d = seq.tensor.shape[1]
    return T.reshape(T.transpose(seq.tensor), (d, h, w))


def init_mha(cfg: AttentionConfig, rng: np.random.Generator, out_gain: float = 0.1) -> Params:
    d, hid = cfg.embed_dim, cfg.hidden
    p = Params()
    for n in ("q", "k", "v", "o"):
        # output projections start small so a fresh block is close to LN(x)
        gain = out_gain if n == "o" else 1.0
        p[f"w{n}"] = param(gain * xavier(rng, d, d), f"w{n}")
        p[f"b{n}"] = param(np.zeros(d), f"b{n}")
    p["mlp1.w"] = param(xavier(rng, d, hid), "mlp1.w")
    p["mlp1.b"] = param(np.zeros(hid), "mlp1.b")
    p["mlp2.w"] = param(out_gain * xavier(rng, hid, d), "mlp2.w")
    p["mlp2.b"] = param(np.zeros(d), "mlp2.b")
    for n in ("ln1", "ln2"):
        p[f"{n}.g"] = param(np.ones(d), f"{n}.g")
        p[f"{n}.b"] = param(np.zeros(d), f"{n}.b")
    return p


def _seq(x) -> Tensor:
    return x.tensor if isinstance(x, TokenSequence) else x


def attention_scores(q, k, d: int) -> Tensor:
    """``q k^T / sqrt(d)``; q [.., Tq, d'], k [.., Tk, d']."""
    q, k = _seq(q), _seq(k)
    if q.shape[-1] != k.shape[-1]:
        raise T.ShapeError(f"attention_scores: query dim {q.shape} vs key dim {k.shape}")
    nd = k.data.ndim
    kt = T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return T.scale(T.matmul(q, kt), 1.0 / math.sqrt(d))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return T.transpose(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    heads, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, heads * dh))


def multi_head_attention(dst: Tensor, src: Tensor, p: Params, cfg: AttentionConfig,
                         src_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Projected attention output [Tq, D] and the weights [heads, Tq, Tk]."""
    q = _split_heads(T.linear(dst, p["wq"], p["bq"]), cfg.num_heads)
    k = _split_heads(T.linear(src, p["wk"], p["bk"]), cfg.num_heads)
    v = _split_heads(T.linear(src, p["wv"], p["bv"]), cfg.num_heads)
    scores = attention_scores(q, k, cfg.head_dim)
    if src_mask is not None:
        scores = T.masked_fill(scores, np.asarray(src_mask).reshape(1, 1, -1))
    weights = T.softmax(scores, axis=-1)
    out = _merge_heads(T.matmul(weights, v))
    return T.linear(out, p["wo"], p["bo"]), weights


def _mlp_residual(x: Tensor, p: Params, cfg: AttentionConfig) -> Tensor:
    h = T.relu(T.linear(x, p["mlp1.w"], p["mlp1.b"]))
    h = T.linear(h, p["mlp2.w"], p["mlp2.b"])
    return T.layer_norm(T.add(x, h), p["ln2.g"], p["ln2.b"], cfg.eps)


def self_attention_block(x: TokenSequence, p: Params, cfg: AttentionConfig,
                         return_weights: bool = False):
    s = x.tensor
    o, weights = multi_head_attention(s, s, p, cfg)
    y = T.layer_norm(T.add(s, o), p["ln1.g"], p["ln1.b"], cfg.eps)
    out = TokenSequence(_mlp_residual(y, p, cfg), x.origin_shape)
    return (out, weights) if return_weights else out


def cross_masked_attention(src: TokenSequence, dst: TokenSequence, src_mask: np.ndarray,
                           p: Params, cfg: AttentionConfig, return_weights: bool = False):
    """Enhance ``dst`` with foreground information from ``src``.

    An all-background ``src_mask`` skips attention entirely: the output is the
    layer-normed residual path of ``dst`` (counted as ``all_masked_attention``).
    """
    m = np.asarray(src_mask, dtype=np.float32).reshape(-1)
    if m.shape[0] != src.tensor.shape[0]:
        raise T.ShapeError(f"src_mask has {m.shape[0]} entries for {src.tensor.shape[0]} tokens")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("src_mask must be binary")
    d = dst.tensor
    if not m.any():
        T.warn("all_masked_attention")
        y = T.layer_norm(d, p["ln1.g"], p["ln1.b"], cfg.eps)
        out = TokenSequence(_mlp_residual(y, p, cfg), dst.origin_shape)
        return (out, None) if return_weights else out
    o, weights = multi_head_attention(d, src.tensor, p, cfg, src_mask=m)
    y = T.layer_norm(T.add(d, o), p["ln1.g"], p["ln1.b"], cfg.eps)
    out = TokenSequence(_mlp_residual(y, p, cfg), dst.origin_shape)
    return (out, weights) if return_weights else out
