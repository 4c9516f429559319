"""Central finite-difference checks of the autodiff gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .unet import ModelConfig, build_model, forward_relation


@dataclass
class GradcheckReport:
    checked: int
    failures: int
    max_rel_error: float  # over elements with |grad| >= REPORT_FLOOR
    max_abs_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.failures == 0


REPORT_FLOOR = 1e-5


def compare(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-7):
    """Return (relative error, absolute error, failure count).

    An element fails only if both its relative error reaches ``rtol`` and its
    absolute error reaches ``atol``.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
    bad = (rel >= rtol) & (diff >= atol)
    return rel, diff, scale, int(np.count_nonzero(bad))


def _numeric_single(loss_fn, p: Tensor, h: float) -> np.ndarray:
    flat = p.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = loss_fn().item()
        flat[i] = orig - h
        minus = loss_fn().item()
        flat[i] = orig
        numeric[i] = (plus - minus) / (2 * h)
    return numeric


def _numeric_batched(loss_fn, p: Tensor, h: float, chunk: int) -> np.ndarray:
    base = p.data
    size = base.size
    numeric = np.empty(size)
    try:
        for lo in range(0, size, chunk):
            idx = np.arange(lo, min(lo + chunk, size))
            k = idx.size
            # rows 0..k-1 carry +h on one element each, rows k..2k-1 carry -h
            stack = np.repeat(base.reshape(1, -1), 2 * k, axis=0)
            rows = np.arange(k)
            stack[rows, idx] = base.reshape(-1)[idx] + h
            stack[rows + k, idx] = base.reshape(-1)[idx] - h
            p.data = stack.reshape((2 * k,) + base.shape)
            losses = np.asarray(loss_fn(2 * k).data)
            numeric[idx] = (losses[:k] - losses[k:]) / (2 * h)
    finally:
        p.data = base
    return numeric


def check_gradients(loss_fn: Callable[..., Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    rtol: float = 1e-4, atol: float = 1e-7, batched: bool = False,
                    chunk: int = 64) -> GradcheckReport:
    """Compare ``backward`` against central differences for every element of ``params``.

    ``loss_fn()`` returns the scalar loss. With ``batched``, ``loss_fn(n)`` must
    instead return ``n`` per-sample losses while each checked parameter holds
    ``n`` stacked copies of itself (leading axis); the central differences for
    up to ``chunk`` elements are then evaluated in one forward pass.
    """
    start = time.perf_counter()
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    checked = failures = 0
    max_rel = max_abs = 0.0
    with T.no_grad():
        for p, grad in zip(params, analytic):
            numeric = _numeric_batched(loss_fn, p, h, chunk) if batched else _numeric_single(loss_fn, p, h)
            rel, diff, scale, bad = compare(grad.reshape(-1), numeric, rtol, atol)
            checked += numeric.size
            failures += bad
            # tiny gradients make the ratio meaningless; they are judged by atol
            significant = rel[scale >= REPORT_FLOOR]
            if significant.size:
                max_rel = max(max_rel, float(significant.max()))
            max_abs = max(max_abs, float(diff.max()))
    return GradcheckReport(checked, failures, max_rel, max_abs, time.perf_counter() - start)


def relation_unet_gradcheck(depth: int = 2, size: int = 8, base_channels: int = 8, seed: int = 0,
                            h: float = 1e-5) -> GradcheckReport:
    """Check every parameter of a small relation U-Net on a 1x2xSxS input."""
    cfg = ModelConfig(in_channels_per_image=1, base_channels=base_channels, depth=depth,
                      input_size=(size, size), variant="relation")
    net = build_model(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    # zero biases put pre-activations exactly on the relu kink where the
    # function has no derivative; nudge them off it
    for name, p in net.params.items():
        if name.endswith(".bias"):
            p.data = rng.normal(0.0, 0.1, size=p.shape)
    x1 = Tensor(rng.random((1, 1, size, size)))
    x2 = Tensor(rng.random((1, 1, size, size)))
    targets: Dict[str, np.ndarray] = {
        k: (rng.random((1, 1, size, size)) > 0.5).astype(np.float64) for k in ("s1", "s2", "rp", "rc")}

    def loss_fn(n: Optional[int] = None) -> Tensor:
        # n=None: the plain scalar loss; n=k: k per-sample losses for stacked parameters
        reps = 1 if n is None else n
        a, b = (Tensor(np.repeat(x.data, reps, axis=0)) for x in (x1, x2))
        out = forward_relation(net, a, b, train_mode=T._grad_enabled)
        total = None
        for head, logits in out.heads().items():
            term = T.bce_with_logits(logits, np.repeat(targets[head], reps, axis=0), per_sample=n is not None)
            total = term if total is None else total + term
        return total

    return check_gradients(loss_fn, list(net.params.values()), h=h, batched=True)
