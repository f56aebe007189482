"""Dense f64 tensors with a recording tape for reverse-mode differentiation.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = (w @ x).sum()
    backward(tape, loss)

Outside a tape every op is a plain numpy computation, which is what the
inference paths rely on for speed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "as_tensor",
    "matmul",
    "einsum",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "split",
    "exp",
    "log",
    "leaky_relu",
    "sigmoid",
    "softmax",
    "edge_attention",
    "layer_norm",
    "batch_norm",
    "affine_batch_norm",
]

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is already a topological
    order of the computation graph.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(out, inputs, fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients accumulate (``+=``) into existing ``.grad`` buffers.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    end = None
    for idx in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[idx].out is loss:
            end = idx
            break
    if end is None:
        raise RuntimeError("loss was not produced on this tape; run the forward pass under the tape first")

    produced = {id(node.out) for node in tape.nodes[: end + 1]}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: end + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for tensor {t.name or t.shape}")
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from exc

    def fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), fn)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum without ellipsis or repeated indices within an operand.

    Every index of an operand must also appear in the other operand or in the
    output, which keeps both gradients expressible as einsums.
    """
    a, b = as_tensor(a), as_tensor(b)
    try:
        lhs, out_sub = subscripts.replace(" ", "").split("->")
        a_sub, b_sub = lhs.split(",")
    except ValueError as exc:
        raise ShapeError(f"einsum: expected 'ab,bc->ac' form, got {subscripts!r}") from exc
    for sub, other in ((a_sub, b_sub + out_sub), (b_sub, a_sub + out_sub)):
        if len(set(sub)) != len(sub) or any(c not in other for c in sub):
            raise ShapeError(f"einsum: unsupported subscripts {subscripts!r}")
    try:
        out = np.einsum(subscripts, a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts!r}: incompatible shapes {a.shape}, {b.shape}") from exc

    def fn(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), fn)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _emit(out, (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    # materialize: downstream kernels stream along the last axis
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _emit(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    if int(np.sum(sizes)) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    ax = axis % a.ndim
    parts = []
    start = 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[ax] = slice(start, start + size)
        index = tuple(index)

        def fn(g, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        parts.append(_emit(a.data[index], (a,), fn))
        start += size
    return parts


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    # kink at 0 takes the positive-side derivative
    scale = np.where(a.data >= 0.0, 1.0, slope)
    return _emit(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), fn)


def edge_attention(q, k, v, edges, scale: float, slope: float = 0.2, capture: list | None = None) -> Tensor:
    """Fused multi-head attention with additive edge keys.

    Shapes: q, k, v are (B, H, n, c); edges is channel-first, (c, B, H, n, n).
    Computes

        w_ij = softmax_j(leaky_relu(scale * q_i . (k_j + e_ij)))
        out_i = sum_j w_ij v_j

    Same result as composing einsum/leaky_relu/softmax/matmul, with fewer and
    smaller temporaries.
    """
    q, k, v, edges = (as_tensor(t) for t in (q, k, v, edges))
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"edge_attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    n, c = q.shape[-2], q.shape[-1]
    if edges.shape != (c,) + q.shape[:-1] + (n,):
        raise ShapeError(f"edge_attention: edges shape {edges.shape} does not match q {q.shape}")
    qd, kd, vd = q.data, k.data, v.data
    e = edges.data
    logits = np.matmul(qd, np.swapaxes(kd, -1, -2))
    for ch in range(c):
        logits += qd[..., :, None, ch] * e[ch]
    logits *= scale
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite attention logits")
    negative = logits < 0.0
    z = logits * slope
    if 0.0 <= slope <= 1.0:
        np.maximum(logits, z, out=z)
    else:
        z = np.where(negative, z, logits)
    del logits
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    attn = z
    if capture is not None:
        capture.append(attn)
    out = np.matmul(attn, vd)

    def fn(g):
        gv = np.matmul(np.swapaxes(attn, -1, -2), g)
        g_attn = np.matmul(g, np.swapaxes(vd, -1, -2))
        g_attn -= (g_attn * attn).sum(axis=-1, keepdims=True)
        g_attn *= attn
        g_attn *= 1.0 + (slope - 1.0) * negative
        g_attn *= scale
        gq = np.matmul(g_attn, kd)
        for ch in range(c):
            gq[..., ch] += (g_attn * e[ch]).sum(axis=-1)
        gk = np.matmul(np.swapaxes(g_attn, -1, -2), qd)
        ge = None
        if edges.requires_grad:
            ge = np.empty_like(e)
            for ch in range(c):
                np.multiply(g_attn, qd[..., :, None, ch], out=ge[ch])
        return gq, gk, gv, ge

    return _emit(out, (q, k, v, edges), fn)


def _normalize_backward(g_hat, xhat, inv_std, axes, count):
    # d/dx of (x - mean) * inv_std over the reduced axes
    return inv_std * (
        g_hat
        - g_hat.sum(axis=axes, keepdims=True) / count
        - xhat * (g_hat * xhat).sum(axis=axes, keepdims=True) / count
    )


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        gx = _normalize_backward(g * gain.data, xhat, inv_std, -1, d) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gain, bias), fn)


def batch_norm(
    x,
    gain,
    bias,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float | None = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-feature normalization with statistics over every axis but the last.

    In training mode the batch statistics are used and, unless ``momentum`` is
    None, the running buffers are updated in place (unbiased variance).
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"batch_norm: gain/bias must have shape ({d},)")
    axes = tuple(range(x.ndim - 1))
    count = x.data.size // d
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        if momentum is not None:
            unbiased = var.reshape(d) * (count / max(count - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(d)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv_std
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = None
        if x.requires_grad:
            if training:
                gx = _normalize_backward(g * gain.data, xhat, inv_std, axes, count)
            else:
                gx = g * (gain.data * inv_std)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit(out, (x, gain, bias), fn)


def affine_batch_norm(
    feats,
    weight,
    shift,
    gain,
    bias,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float | None = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """``batch_norm(feats @ weight + shift, ...)`` for constant, narrow ``feats``.

    With k input features the batch statistics of the d outputs follow from
    the k x k covariance of ``feats``, so the whole map collapses to a single
    affine transform and the backward pass needs only ``feats^T G`` and
    ``sum(G)``. ``feats`` itself receives no gradient.
    """
    feats, weight, shift, gain, bias = (as_tensor(t) for t in (feats, weight, shift, gain, bias))
    k, d = weight.shape
    if feats.shape[-1] != k or shift.shape != (d,) or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"affine_batch_norm: feats {feats.shape}, weight {weight.shape} mismatch")
    X = feats.data.reshape(-1, k)
    count = X.shape[0]
    W = weight.data
    if training:
        mean_x = X.mean(axis=0)
        Xc = X - mean_x
        cov = Xc.T @ Xc / count
        var = np.einsum("kf,kl,lf->f", W, cov, W)
        inv_std = 1.0 / np.sqrt(var + eps)
        eff_w = W * (inv_std * gain.data)
        eff_b = bias.data - (mean_x @ W) * inv_std * gain.data
        if momentum is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * (mean_x @ W + shift.data)
            running_var *= 1.0 - momentum
            running_var += momentum * var * (count / max(count - 1, 1))
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        eff_w = W * (inv_std * gain.data)
        eff_b = (shift.data - running_mean) * inv_std * gain.data + bias.data
    out = (X @ eff_w + eff_b).reshape(feats.shape[:-1] + (d,))

    def fn(g):
        G = g.reshape(-1, d)
        g_sum = G.sum(axis=0)
        if training:
            M = Xc.T @ G  # (k, d)
            wM = (W * M).sum(axis=0)
            g_gain = inv_std * wM
            gW = gain.data * inv_std * M - (gain.data * inv_std**3 * wM) * (cov @ W)
            g_shift = np.zeros(d)
        else:
            M = X.T @ G
            scale = inv_std * gain.data
            gW = M * scale
            g_shift = g_sum * scale
            g_gain = inv_std * ((W * M).sum(axis=0) + (shift.data - running_mean) * g_sum)
        return None, gW, g_shift, g_gain, g_sum

    return _emit(out, (feats, weight, shift, gain, bias), fn)
