"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

Only the operations the U-Net family needs are provided. Every op records
its inputs and a backward closure on the output tensor; ``backward`` walks
the recorded nodes in exact reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DimensionError, UsageError

_creation_counter = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional gradient and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id", "_released")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._id = next(_creation_counter)
        self._released = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x: Union[Tensor, float]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it and feeds ``loss``.

    The graph is released afterwards; calling again on the same loss is an error.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise UsageError("backward already ran on this graph; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    loss.grad = np.ones_like(loss.data)
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad += g
    for node in nodes.values():
        if node.op == "leaf":
            continue
        node._backward = None
        node._parents = ()
        node._released = True


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Union[Tensor, float], b: Union[Tensor, float]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def _bw(g):
        ga = g if a.shape == g.shape else np.asarray(g.sum()).reshape(a.shape)
        gb = g if b.shape == g.shape else np.asarray(g.sum()).reshape(b.shape)
        return ga, gb

    return _make(out, (a, b), _bw, "add")


def mul(a: Union[Tensor, float], b: Union[Tensor, float]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"mul shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def _bw(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = np.asarray(ga.sum()).reshape(a.shape)
        if gb.shape != b.shape:
            gb = np.asarray(gb.sum()).reshape(b.shape)
        return ga, gb

    return _make(out, (a, b), _bw, "mul")


def tensor_sum(x: Tensor) -> Tensor:
    def _bw(g):
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(x.data.sum()), (x,), _bw, "sum")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def _bw(g):
        return (g * positive,)

    return _make(np.where(positive, x.data, 0.0), (x,), _bw, "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-log(1 + exp(-z))) never overflows
    return np.exp(-np.logaddexp(0.0, -z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def _bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), _bw, "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects NCHW tensors")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise DimensionError(f"concat_channels needs matching N,H,W: {a.shape} vs {b.shape}")

    def _bw(g):
        return g[:, :ca], g[:, ca:]

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), _bw, "concat")


def mask_scale(x: Tensor, scale: np.ndarray) -> Tensor:
    """Multiply by a constant array (used for dropout masks)."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != x.shape:
        raise DimensionError(f"mask shape {scale.shape} does not match {x.shape}")

    def _bw(g):
        return (g * scale,)

    return _make(x.data * scale, (x,), _bw, "mask_scale")


# ---------------------------------------------------------------------------
# convolutional ops


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, padding: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = x.shape[:2]
    xp = _pad(x, padding)
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, shape=(n, c, kh, kw, ho, wo),
                     strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return win.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, padding: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dxp[:, :, padding:padding + h, padding:padding + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of an NCHW input with a (Cout, Cin, kH, kW) kernel.

    A 5-d (N, Cout, Cin, kH, kW) weight or an (N, Cout) bias gives every
    sample its own parameters. That form is forward-only; finite-difference
    checks use it to evaluate many perturbed parameter sets in one pass.
    """
    if x.data.ndim != 4 or weight.data.ndim not in (4, 5):
        raise DimensionError("conv2d expects 4-d input and weight")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape[-4:]
    if c != c_in:
        raise DimensionError(f"conv2d input has {c} channels, weight expects {c_in}")
    if weight.data.ndim == 5 and weight.shape[0] != n:
        raise DimensionError(f"per-sample conv2d weight has {weight.shape[0]} kernels for {n} samples")
    if bias.shape not in ((c_out,), (n, c_out)):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({c_out},)")
    if (weight.data.ndim == 5 or bias.data.ndim == 2) and _grad_enabled and (
            x.requires_grad or weight.requires_grad or bias.requires_grad):
        raise DimensionError("per-sample conv2d parameters are forward-only; use no_grad()")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d needs stride >= 1 and padding >= 0")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigError(f"conv2d output size is not a positive integer for input {h}x{w}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    cols = _im2col(x.data, kh, kw, padding, stride, ho, wo)
    wmat = weight.data.reshape(*weight.shape[:-3], -1)
    # per-sample gemm keeps results independent of batch composition
    out = np.matmul(wmat, cols)
    out += bias.data[..., None]
    out = out.reshape(n, c_out, ho, wo)

    def _bw(g):
        gm = g.reshape(n, c_out, ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if stride == 1 and padding <= min(kh, kw) - 1 and kh == kw:
                # input gradient of a stride-1 correlation is a full correlation
                # with the flipped, channel-transposed kernel
                back = kh - 1 - padding
                flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gcols = _im2col(g, kh, kw, back, 1, h, w)
                gx = np.matmul(flipped, gcols).reshape(n, c, h, w)
            else:
                gx = _col2im(np.matmul(wmat.T, gm), (n, c, h, w), kh, kw, padding, stride, ho, wo)
        return gx, gw, gb

    return _make(out, (x, weight, bias), _bw, "conv2d")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first element in row-major order."""
    if x.data.ndim != 4:
        raise DimensionError("max_pool2 expects NCHW input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even H and W, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def _bw(g):
        gw = np.zeros(windows.shape)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, (x,), _bw, "max_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError("upsample_nearest2 expects NCHW input")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def _bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), _bw, "upsample2")


# ---------------------------------------------------------------------------
# loss


def bce_with_logits(logits: Tensor, target, per_sample: bool = False) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form.

    With ``per_sample`` the mean is taken within each sample, giving shape (N,).
    """
    t = np.asarray(target, dtype=np.float64)
    z = logits.data
    if t.shape != z.shape:
        raise DimensionError(f"bce target shape {t.shape} != logits shape {z.shape}")
    per_pixel = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    if per_sample:
        n = z.shape[0]
        count = z.size // n

        def _bw_each(g):
            return (g.reshape((n,) + (1,) * (z.ndim - 1)) * (_sigmoid(z) - t) / count,)

        return _make(per_pixel.reshape(n, -1).mean(axis=1), (logits,), _bw_each, "bce")
    count = z.size

    def _bw(g):
        return (g * (_sigmoid(z) - t) / count,)

    return _make(np.asarray(per_pixel.mean()), (logits,), _bw, "bce")


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-4

    @classmethod
    def zeros(cls, size: int, **kwargs) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), **kwargs)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              learning_rate: Optional[float] = None) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update on a flat parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(
            f"adam_step length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    lr = state.learning_rate if learning_rate is None else learning_rate
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, m=m, v=v, step=step, learning_rate=lr)
