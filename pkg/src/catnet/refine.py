"""CMAT blocks, iterative refinement, and the full few-shot segmenter.

One CMAT step runs self attention on each stream, cross masked attention in
the enabled direction(s), then prototypical segmentation of the enhanced
query against prototypes pooled from the enhanced support. The dilated mask
it produces gates the next step's support-enhancing attention; masks are
thresholded arrays, so no gradient crosses them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, cross_masked_attention, flatten, init_mha, self_attention_block, unflatten
from .encoder import EncoderConfig, init_encoder, init_mife_head, mife
from .params import Params
from .proto import MaskPair, ProtoConfig, double_threshold, fg_bg_prototypes, prototype_logits, soft_dice_loss
from .tensor import Tensor

MODES = ("s2q", "q2s", "bidir")
MAX_DEPTH = 5


@dataclass
class CmatState:
    fs: Tensor  # [D, h, w]
    fq: Tensor  # [D, h, w]
    masks: MaskPair
    iteration: int = 0
    logits: Tensor | None = None  # [C, h, w] class logits behind ``masks``


@dataclass(frozen=True)
class RefineConfig:
    num_iterations: int = 4
    mode: str = "bidir"
    tied: bool = False
    attention: AttentionConfig = AttentionConfig()
    proto: ProtoConfig = ProtoConfig()

    def __post_init__(self):
        if not 1 <= self.num_iterations <= MAX_DEPTH:
            raise ValueError(f"num_iterations must be in [1, {MAX_DEPTH}], got {self.num_iterations}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def block_name(self, i: int) -> str:
        return "cmat.0" if self.tied else f"cmat.{i}"


def init_cmat_block(cfg: RefineConfig, rng: np.random.Generator) -> Params:
    p = Params()
    p.add("self_q", init_mha(cfg.attention, rng))
    p.add("self_s", init_mha(cfg.attention, rng))
    if cfg.mode in ("bidir", "q2s"):
        p.add("cross_s", init_mha(cfg.attention, rng))
    if cfg.mode in ("bidir", "s2q"):
        p.add("cross_q", init_mha(cfg.attention, rng))
    return p


def cmat_step(state: CmatState, support_mask: np.ndarray, params: Params, cfg: RefineConfig) -> CmatState:
    """One CMAT block; ``params`` is the block's own scope (``self_q.*`` etc)."""
    acfg = cfg.attention
    xq = self_attention_block(flatten(state.fq), params.scope("self_q"), acfg)
    xs = self_attention_block(flatten(state.fs), params.scope("self_s"), acfg)
    ys = xs
    yq = xq
    if cfg.mode in ("bidir", "q2s"):
        ys = cross_masked_attention(xq, xs, state.masks.dilated, params.scope("cross_s"), acfg)
    if cfg.mode in ("bidir", "s2q"):
        yq = cross_masked_attention(xs, xq, support_mask, params.scope("cross_q"), acfg)
    fs, fq = unflatten(ys), unflatten(yq)
    logits = prototype_logits(fq, fg_bg_prototypes(fs, support_mask), cfg.proto.alpha)
    fg = T.select(T.softmax(logits, axis=0), 1)
    return CmatState(fs, fq, double_threshold(fg, cfg.proto), state.iteration + 1, logits)


def refine(initial: CmatState, support_mask: np.ndarray, cfg: RefineConfig, params: Params,
           num_iterations: int | None = None) -> tuple[CmatState, list[MaskPair]]:
    """Apply ``num_iterations`` CMAT steps (default from cfg; 0 returns ``initial``)."""
    n = cfg.num_iterations if num_iterations is None else num_iterations
    state, trace = initial, []
    for i in range(n):
        state = cmat_step(state, support_mask, params.scope(cfg.block_name(i)), cfg)
        trace.append(state.masks)
    return state, trace


# --------------------------------------------------------------------------
# Full model


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    encoder: EncoderConfig = EncoderConfig()
    refine: RefineConfig = RefineConfig()
    aux_mife_loss: bool = True
    deep_supervision: bool = False

    def __post_init__(self):
        if self.refine.attention.embed_dim != self.encoder.embed_dim:
            raise ValueError("attention embed_dim must equal encoder embed_dim")
        if self.image_size % self.encoder.total_stride:
            raise ValueError("image_size must be divisible by the encoder's total stride")

    @property
    def feature_size(self) -> int:
        return self.image_size // self.encoder.total_stride

    def with_(self, **kw) -> "ModelConfig":
        """Replace refine/proto fields by name (depth, mode, tied, alpha, tau, tau_hat)."""
        r = self.refine
        proto = replace(r.proto, **{k: kw.pop(k) for k in ("alpha", "tau", "tau_hat") if k in kw})
        rk = {"num_iterations": kw.pop("depth", r.num_iterations)}
        for k in ("mode", "tied"):
            if k in kw:
                rk[k] = kw.pop(k)
        return replace(self, refine=replace(r, proto=proto, **rk), **kw)


def init_model(cfg: ModelConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    p = Params()
    p.add("enc", init_encoder(cfg.encoder, rng))
    p.add("mife", init_mife_head(cfg.encoder, rng))
    blocks = 1 if cfg.refine.tied else cfg.refine.num_iterations
    for i in range(blocks):
        p.add(f"cmat.{i}", init_cmat_block(cfg.refine, rng))
    return p


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """[n_out, n_in] half-pixel-centred linear interpolation weights."""
    m = np.zeros((n_out, n_in))
    s = n_in / n_out
    for i in range(n_out):
        x = min(max((i + 0.5) * s - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(x))
        hi = min(lo + 1, n_in - 1)
        f = x - lo
        m[i, lo] += 1.0 - f
        m[i, hi] += f
    return m


_UP_CACHE: dict = {}


def upsample(x: Tensor, size: int) -> Tensor:
    """Bilinear upsampling of [h, w] or [C, h, w] maps to ``size`` x ``size``."""
    key = (x.shape, size, np.dtype(T.default_dtype()).name)
    if key not in _UP_CACHE:
        mh = bilinear_matrix(size, x.shape[-2]).astype(T.default_dtype())
        mw = bilinear_matrix(size, x.shape[-1]).T.astype(T.default_dtype())
        if x.data.ndim == 3:
            mh = np.broadcast_to(mh, (x.shape[0],) + mh.shape).copy()
            mw = np.broadcast_to(mw, (x.shape[0],) + mw.shape).copy()
        _UP_CACHE[key] = (Tensor(mh), Tensor(mw))
    mh, mw = _UP_CACHE[key]
    return T.matmul(T.matmul(mh, x), mw)


@dataclass
class ModelOutput:
    prob: Tensor  # [H, W] final foreground probability
    initial_prob: Tensor  # [H, W] classifier probability before refinement
    state: CmatState
    trace: list[MaskPair]
    states: list[CmatState] = field(default_factory=list)


def full_resolution_prob(logits: Tensor, size: int) -> Tensor:
    return T.select(T.softmax(upsample(logits, size), axis=0), 1)


def forward(params: Params, cfg: ModelConfig, support_image: np.ndarray, support_mask: np.ndarray,
            query_image: np.ndarray, depth: int | None = None) -> ModelOutput:
    """Run MIFE then the CMAT stack on one 1-way 1-shot episode."""
    si = Tensor(np.asarray(support_image))
    qi = Tensor(np.asarray(query_image))
    if si.data.ndim == 2:
        si, qi = T.reshape(si, (1,) + si.shape), T.reshape(qi, (1,) + qi.shape)
    m = mife(si, support_mask, qi, params.scope("enc"), params.scope("mife"), cfg.encoder)
    init_fg = T.sigmoid(m.logits)
    state = CmatState(m.fs, m.fq, double_threshold(init_fg, cfg.refine.proto), 0, None)
    rcfg = cfg.refine
    n = rcfg.num_iterations if depth is None else depth
    states = []
    for i in range(n):
        state = cmat_step(state, m.support_mask, params.scope(rcfg.block_name(i)), rcfg)
        states.append(state)
    size = cfg.image_size
    init_full = T.sigmoid(upsample(m.logits, size))
    prob = full_resolution_prob(state.logits, size) if n else init_full
    return ModelOutput(prob, init_full, state, [s.masks for s in states], states)


def episode_loss(out: ModelOutput, truth: np.ndarray, cfg: ModelConfig) -> Tensor:
    loss = soft_dice_loss(out.prob, truth)
    if cfg.aux_mife_loss:
        loss = T.add(loss, soft_dice_loss(out.initial_prob, truth))
    if cfg.deep_supervision:
        for s in out.states[:-1]:
            loss = T.add(loss, soft_dice_loss(full_resolution_prob(s.logits, cfg.image_size), truth))
    return loss


def predict_mask(out: ModelOutput, cfg: ModelConfig) -> np.ndarray:
    return (out.prob.data > cfg.refine.proto.tau).astype(np.float32)
