"""Dense numpy-backed tensors with a reverse-mode gradient tape.

Every differentiable op creates a :class:`Node` holding its inputs and a
closure that maps the output gradient to input gradients. :func:`backward`
orders the reachable nodes topologically (the :class:`Tape`) and visits each
exactly once.

Shapes are never broadcast implicitly. The few ops that broadcast (bias
addition in :func:`linear`, the mask in :func:`masked_fill`) say so.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MASK_FILL = -1e9

_default_dtype = np.float32
_local = threading.local()
_warn_lock = threading.Lock()
warnings: Counter = Counter()

# op names whose backward is deliberately perturbed (gradcheck mutation hook)
_corrupted_ops: set[str] = set()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op."""


class ConfigError(ValueError):
    """An op or module was configured with impossible parameters."""


class UsageError(RuntimeError):
    """The autodiff machinery was driven incorrectly."""


def warn(key: str, msg: str = "") -> None:
    with _warn_lock:
        warnings[key] += 1
    logger.debug("warning %s %s", key, msg)


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def wide_precision():
    """Run ops in float64 (used for finite-difference checks)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = prev


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def corrupt_gradients(*ops: str):
    """Test hook: scale the backward of the named ops by 1.01."""
    _corrupted_ops.update(ops)
    try:
        yield
    finally:
        _corrupted_ops.difference_update(ops)


@contextlib.contextmanager
def branch_log():
    """Collect a fingerprint of every data-dependent branch taken (ReLU
    patterns, thresholds) so finite differences can detect kink crossings."""
    prev = getattr(_local, "branches", None)
    log: list[bytes] = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = prev


def record_branch(pattern: np.ndarray) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(np.packbits(np.asarray(pattern, dtype=bool)).tobytes())


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype and arr.dtype.kind in "fiub":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __truediv__(self, other): return div(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_default_dtype), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def _make(data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(x: Tensor, s: float) -> Tensor:
    return _make(x.data * s, (x,), lambda g: (g * s,), "scale")


def add_scalar(x: Tensor, s: float) -> Tensor:
    return _make(x.data + s, (x,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    record_branch(keep)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# --------------------------------------------------------------------------
# Reductions and layout


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        out = np.asarray(x.data.sum(), dtype=x.data.dtype)
        return _make(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = _check_axis(x, axis)
    out = x.data.sum(axis=ax)
    return _make(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),), "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[_check_axis(x, axis)]
    return scale(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from e
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def select(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the first axis."""
    if not -x.shape[0] <= index < x.shape[0]:
        raise ShapeError(f"select: index {index} out of range for shape {x.shape}")
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(x.data[index].copy(), (x,), backward, "select")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    ax = _check_axis(xs[0], axis)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} vs {t.shape} on axis {ax}")
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=ax)
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def _check_axis(x: Tensor, axis: int) -> int:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % nd


# --------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dims must be equal when present."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x [T, Din], w [Din, Dout]; b [Dout] broadcasts over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return _make(out, (x, w), lambda g: (g @ wd.T, xd.T @ g), "linear")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
    out = out + b.data
    return _make(out, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of x [T, D] over its last axis, then apply gain/bias."""
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gain, bias), backward, "layer_norm")


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    """Output length along one axis; raises if real input would be dropped.

    Windows tile the padded axis from the left. Any leftover that falls in the
    trailing padding is harmless; leftover reaching real input is an error.
    """
    span = n + 2 * pad - k
    if k % 2 == 0:
        raise ConfigError(f"conv2d: kernel size must be odd, got {k}")
    if span < 0 or stride < 1:
        raise ConfigError(f"conv2d: kernel {k} does not fit extent {n} with pad {pad}")
    if span % stride > pad:
        raise ConfigError(
            f"conv2d: extent {n} (pad {pad}, kernel {k}) is not tiled by stride {stride}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x [Cin, H, W] with w [Cout, Cin, k, k]."""
    if x.data.ndim != 3 or w.data.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    cin, hh, ww = x.shape
    cout, _, k, _ = w.shape
    ho = conv_output_extent(hh, k, stride, pad)
    wo = conv_output_extent(ww, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # cols: [Cin*k*k, Ho*Wo]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
    wmat = w.data.reshape(cout, cin * k * k)
    out = (wmat @ cols).reshape(cout, ho, wo)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} vs {cout} output channels")
        out = out + b.data[:, None, None]
    xshape = xp.shape

    def backward(g):
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ cols.T).reshape(w.shape)
        gcols = (wmat.T @ g2).reshape(cin, k, k, ho, wo)
        gxp = np.zeros(xshape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gcols[:, i, j]
        gx = gxp[:, pad : pad + hh, pad : pad + ww] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, backward, "conv2d")


# --------------------------------------------------------------------------
# Masking and similarity


def _binary(mask, what: str) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{what}: mask entries must be 0 or 1")
    return m.astype(bool)


def masked_fill(x: Tensor, mask, value: float = MASK_FILL) -> Tensor:
    """Keep x where mask is 1, write ``value`` where it is 0.

    The mask broadcasts against x (numpy rules) and carries no gradient.
    """
    keep = _binary(mask, "masked_fill")
    try:
        keep = np.broadcast_to(keep, x.shape)
    except ValueError as e:
        raise ShapeError(f"masked_fill: mask {keep.shape} does not broadcast to {x.shape}") from e
    out = np.where(keep, x.data, np.asarray(value, dtype=x.data.dtype))
    return _make(out, (x,), lambda g: (g * keep,), "masked_fill")


_TINY = 1e-12


def cosine_rows(x: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of every row of x [T, D] with v [D]; returns [T].

    Zero-norm operands give similarity 0 (counted under ``zero_norm_cosine``).
    """
    if x.data.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"cosine: incompatible shapes {x.shape} and {v.shape}")
    xd, vd = x.data, v.data
    nx = np.sqrt((xd * xd).sum(axis=1))
    nv = float(np.sqrt((vd * vd).sum()))
    ok = nx > _TINY
    if nv <= _TINY:
        ok = np.zeros_like(ok)
    if not ok.all():
        warn("zero_norm_cosine", f"{int((~ok).sum())} rows")
    denom = np.where(ok, nx * max(nv, _TINY), 1.0)
    c = np.where(ok, (xd @ vd) / denom, 0.0).astype(xd.dtype)

    def backward(g):
        gg = np.where(ok, g, 0.0)
        safe_nx = np.where(ok, nx, 1.0)
        coef = gg / denom
        gx = coef[:, None] * vd[None, :] - (gg * c / (safe_nx * safe_nx))[:, None] * xd
        if nv <= _TINY:
            gv = np.zeros_like(vd)
        else:
            gv = coef @ xd - (gg * c).sum() / (nv * nv) * vd
        return gx.astype(xd.dtype), gv.astype(vd.dtype)

    return _make(c, (x, v), backward, "cosine")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Scalar cosine similarity of two [D] vectors."""
    if a.data.ndim != 1:
        raise ShapeError(f"cosine_similarity expects vectors, got {a.shape}")
    return reshape(cosine_rows(reshape(a, (1, a.shape[0])), b), ())


# --------------------------------------------------------------------------
# Backward pass


@dataclass
class Tape:
    """Nodes reachable from a loss, inputs before outputs."""

    nodes: list[Node] = field(default_factory=list)
    visits: Counter = field(default_factory=Counter)


def build_tape(root: Tensor) -> Tape:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        node = t.node
        if node is None:
            continue
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((t, True))
        for inp in node.inputs:
            if inp.node is not None and id(inp.node) not in seen:
                stack.append((inp, False))
    return Tape(nodes=order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients accumulate additively, so leaves must be zeroed between steps
    (``sgd_step`` does this).
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise UsageError("backward: loss is not attached to a gradient tape")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # nodes keep only their inputs; recover each node's output tensor
    node_out: dict[int, Tensor] = {id(loss.node): loss}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.node is not None:
                node_out[id(inp.node)] = inp
    for node in reversed(tape.nodes):
        out = node_out[id(node)]
        g = grads.pop(id(out), None)
        tape.visits[id(node)] += 1
        if g is None:
            continue
        out.grad = g
        in_grads = node.backward_fn(g)
        if node.op in _corrupted_ops:
            in_grads = tuple(None if ig is None else ig * 1.01 for ig in in_grads)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.data.dtype).reshape(inp.shape)
            if inp.node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
    return tape


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p -= lr * grad`` followed by zeroing the gradient."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise UsageError(f"sgd_step: parameter {p.name or p.shape} has no gradient")
    for p in params:
        p.data -= np.asarray(lr * p.grad, dtype=p.data.dtype)
        p.grad = None
