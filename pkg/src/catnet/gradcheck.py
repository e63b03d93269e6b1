"""Central finite-difference checks for every differentiable op and module.

Checks run in float64. A coordinate whose +h / -h evaluation takes a
different branch (ReLU pattern, mask threshold) than the base point is not
differentiable there and is skipped rather than scored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, cross_masked_attention, init_mha, self_attention_block, TokenSequence
from .encoder import EncoderConfig
from .proto import ProtoConfig, fg_bg_prototypes, prototype_segment, soft_dice_loss
from .refine import ModelConfig, RefineConfig, episode_loss, forward, init_model
from .tensor import Tensor

STEP = 1e-3
TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    kind: str
    rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.rel_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.kind:<6} {self.name:<24} rel_err={self.rel_error:.3e} "
                f"checked={self.checked} skipped={self.skipped}")


def _eval(loss_fn: Callable[[], Tensor]) -> tuple[float, list[bytes]]:
    with T.no_grad(), T.branch_log() as log:
        value = float(loss_fn().item())
    return value, log


def check_gradients(loss_fn: Callable[[], Tensor], tensors: list[Tensor], h: float = STEP,
                    max_coords: int | None = None, rng: np.random.Generator | None = None
                    ) -> tuple[float, int, int]:
    """Compare reverse-mode gradients of ``loss_fn`` with central differences.

    Returns (relative error, coordinates compared, coordinates skipped). The
    error is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` over the compared
    coordinates taken as one vector.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    with T.branch_log() as base_branches:
        loss = loss_fn()
    T.backward(loss)
    analytic, numeric = [], []
    skipped = 0
    for t in tensors:
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp, bp = _eval(loss_fn)
            flat[i] = orig - h
            fm, bm = _eval(loss_fn)
            flat[i] = orig
            if bp != base_branches or bm != base_branches:
                skipped += 1
                continue
            analytic.append(g.reshape(-1)[i])
            numeric.append((fp - fm) / (2 * h))
        t.grad = None
    if not analytic:
        return float("inf"), 0, skipped
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom), len(a), skipped


# --------------------------------------------------------------------------
# Registry


def _leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _op_case(build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]):
    def run(seed: int = 0):
        rng = np.random.default_rng(seed)
        fn, leaves = build(rng)
        readout = np.random.default_rng(seed + 1)
        r_cache: dict = {}

        def loss():
            out = fn()
            if out.size == 1:
                return T.reshape(out, ())
            if "r" not in r_cache:
                r_cache["r"] = Tensor(readout.normal(size=out.shape))
            return T.sum(T.mul(out, r_cache["r"]))

        return loss, leaves
    return run


def _ops() -> dict[str, Callable]:
    def unary(f, *shape, **kw):
        def build(rng):
            x = _leaf(rng, *shape, **kw)
            return (lambda: f(x)), [x]
        return build

    def binary(f, sa, sb, **kw):
        def build(rng):
            a, b = _leaf(rng, *sa), _leaf(rng, *sb, **kw)
            return (lambda: f(a, b)), [a, b]
        return build

    def concat_build(rng):
        a, b = _leaf(rng, 3, 2), _leaf(rng, 3, 4)
        return (lambda: T.concat([a, b], 1)), [a, b]

    def ln_build(rng):
        x, g, b = _leaf(rng, 4, 6), _leaf(rng, 6), _leaf(rng, 6)
        return (lambda: T.layer_norm(x, g, b, 1e-5)), [x, g, b]

    def linear_build(rng):
        x, w, b = _leaf(rng, 5, 4), _leaf(rng, 4, 3), _leaf(rng, 3)
        return (lambda: T.linear(x, w, b)), [x, w, b]

    def conv_build(stride):
        def build(rng):
            x, w, b = _leaf(rng, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
            return (lambda: T.conv2d(x, w, b, stride=stride, pad=1)), [x, w, b]
        return build

    def masked_build(rng):
        x = _leaf(rng, 4, 5)
        m = (rng.random((4, 5)) > 0.4).astype(float)
        return (lambda: T.masked_fill(x, m, -3.0)), [x]

    def masked_softmax_build(rng):
        x = _leaf(rng, 2, 3, 6)
        m = np.array([1, 0, 1, 1, 0, 1.0]).reshape(1, 1, 6)
        return (lambda: T.softmax(T.masked_fill(x, m), -1)), [x]

    return {
        "add": binary(T.add, (3, 4), (3, 4)),
        "sub": binary(T.sub, (3, 4), (3, 4)),
        "mul": binary(T.mul, (3, 4), (3, 4)),
        "div": binary(T.div, (3, 4), (3, 4), positive=True),
        "scale": unary(lambda x: T.scale(x, -1.7), 3, 4),
        "add_scalar": unary(lambda x: T.add_scalar(x, 0.3), 3, 4),
        "relu": unary(T.relu, 4, 5),
        "sigmoid": unary(T.sigmoid, 4, 5),
        "sum": unary(lambda x: T.sum(x, 1), 3, 4),
        "mean": unary(lambda x: T.mean(x, 0), 3, 4),
        "reshape": unary(lambda x: T.reshape(x, (4, 3)), 3, 4),
        "transpose": unary(lambda x: T.transpose(x, (1, 2, 0)), 2, 3, 4),
        "select": unary(lambda x: T.select(x, 1), 3, 4),
        "concat": concat_build,
        "matmul": binary(T.matmul, (3, 4), (4, 2)),
        "matmul_batched": binary(T.matmul, (2, 3, 4), (2, 4, 2)),
        "linear": linear_build,
        "softmax": unary(lambda x: T.softmax(x, 1), 3, 5),
        "layer_norm": ln_build,
        "conv2d": conv_build(1),
        "conv2d_stride2": conv_build(2),
        "masked_fill": masked_build,
        "masked_softmax": masked_softmax_build,
        "cosine_rows": binary(T.cosine_rows, (5, 4), (4,)),
        "cosine_similarity": binary(T.cosine_similarity, (4,), (4,)),
    }


OP_CASES = {name: _op_case(b) for name, b in _ops().items()}


def _small_model_cfg(depth: int = 4) -> ModelConfig:
    d = 8
    return ModelConfig(
        image_size=16,
        encoder=EncoderConfig(stage_channels=(4, 8, d), strides=(1, 2, 2), embed_dim=d),
        refine=RefineConfig(num_iterations=depth, attention=AttentionConfig(embed_dim=d, num_heads=2)),
    )


def _episode(rng: np.random.Generator, size: int):
    sm = np.zeros((size, size), dtype=np.float32)
    sm[3:11, 4:12] = 1
    qm = np.zeros((size, size), dtype=np.float32)
    qm[5:13, 2:10] = 1
    si = rng.normal(size=(1, size, size)) + 2 * sm
    qi = rng.normal(size=(1, size, size)) + 2 * qm
    return si, sm, qi, qm


def _module_mife(rng):
    cfg = _small_model_cfg(1)
    params = init_model(cfg, 0)
    si, sm, qi, qm = _episode(rng, cfg.image_size)

    def loss():
        out = forward(params, cfg, si, sm, qi, depth=0)
        return soft_dice_loss(out.initial_prob, qm)

    leaves = [t for k, t in params.items() if k.startswith(("enc.", "mife.cls"))]
    return loss, leaves, 4


def _module_attention(cross: bool):
    def build(rng):
        acfg = AttentionConfig(embed_dim=8, num_heads=2)
        p = init_mha(acfg, rng, out_gain=1.0)
        src = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
        dst = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        mask = np.array([1, 0, 1, 1, 0, 1], dtype=np.float32)
        r = Tensor(np.random.default_rng(7).normal(size=(5 if cross else 6, 8)))

        def loss():
            if cross:
                out = cross_masked_attention(TokenSequence(src, (2, 3)), TokenSequence(dst, (1, 5)), mask, p, acfg)
            else:
                out = self_attention_block(TokenSequence(src, (2, 3)), p, acfg)
            return T.sum(T.mul(out.tensor, r))

        leaves = [src, dst] if cross else [src]
        return loss, leaves + list(p.values()), 6
    return build


def _module_proto(rng):
    fq = Tensor(rng.normal(size=(6, 4, 4)), requires_grad=True)
    fs = Tensor(rng.normal(size=(6, 4, 4)), requires_grad=True)
    sm = (rng.random((4, 4)) > 0.5).astype(np.float32)
    sm[0, 0], sm[3, 3] = 1, 0
    truth = (rng.random((4, 4)) > 0.5).astype(np.float32)
    cfg = ProtoConfig(alpha=3.0)

    def loss():
        probs = prototype_segment(fq, fg_bg_prototypes(fs, sm), cfg)
        return soft_dice_loss(T.select(T.transpose(probs, (2, 0, 1)), 1), truth)

    return loss, [fq, fs], None


def _module_cmat_stack(rng):
    cfg = _small_model_cfg(4)
    params = init_model(cfg, 0)
    for k, t in params.items():  # larger output projections so every block matters
        if k.endswith(("wo", "mlp2.w")):
            t.data *= 10.0
    si, sm, qi, qm = _episode(rng, cfg.image_size)

    def loss():
        return episode_loss(forward(params, cfg, si, sm, qi), qm, cfg)

    leaves = list(params.values())
    return loss, leaves, 1


MODULE_CASES = {
    "mife": _module_mife,
    "self_attention": _module_attention(False),
    "cross_masked_attention": _module_attention(True),
    "prototype_head": _module_proto,
    "cmat_stack_depth4": _module_cmat_stack,
}


def run_op(name: str, seed: int = 0) -> GradResult:
    with T.wide_precision():
        loss, leaves = OP_CASES[name](seed)
        err, n, skipped = check_gradients(loss, leaves)
    return GradResult(name, "op", err, n, skipped)


def run_module(name: str, seed: int = 0) -> GradResult:
    with T.wide_precision():
        rng = np.random.default_rng(seed)
        loss, leaves, per_tensor = MODULE_CASES[name](rng)
        err, n, skipped = check_gradients(loss, leaves, max_coords=per_tensor, rng=rng)
    return GradResult(name, "module", err, n, skipped)


def run_all(seed: int = 0, corrupt: tuple[str, ...] = ()) -> list[GradResult]:
    results = []
    with T.corrupt_gradients(*corrupt):
        for name in OP_CASES:
            results.append(run_op(name, seed))
        for name in MODULE_CASES:
            results.append(run_module(name, seed))
    return results
