"""Reverse-mode automatic differentiation on numpy arrays, plus plain SGD.

The engine is deliberately small: a dozen primitives (enough to express the
benchmark's CNN/MLP forward passes and every unlearning objective), a dynamic
tape rebuilt on each forward pass, and an SGD step supporting descent, ascent,
momentum and weight decay.  All math runs in float64 so gradient checks
against central finite differences are decisive.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DetachedLoss,
    LabelOutOfRange,
    NonFiniteInput,
    NotScalar,
    ShapeMismatch,
)
from .rng import RngStream, stream

Array = np.ndarray


class Tensor:
    """Float64 array with optional participation in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)


_tape_stack: list[Tape] = []
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable recording; outputs inside the block carry no gradient."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *arrays: Array):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteInput(f"{op}: non-finite input value")


def _finish(op: str, inputs: Sequence[Tensor], out_data: Array, backfn: Callable) -> Tensor:
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req and _tape_stack:
        tape = _tape_stack[-1]
        tape._nodes.append((out, tuple(inputs), backfn))
        out._tape = tape
    return out


def _unbroadcast(g: Array, shape: tuple) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeMismatch(f"matmul: {ad.shape} x {bd.shape}")
    _check_finite("matmul", ad, bd)
    out = ad @ bd

    def back(g):
        return g @ bd.T, ad.T @ g

    return _finish("matmul", (a, b), out, back)


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) over [B, C, H, W] input."""
    x, w = as_tensor(x), as_tensor(w)
    if bias is not None:
        bias = as_tensor(bias)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeMismatch(f"conv2d: input {xd.shape}, kernel {wd.shape}")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise ShapeMismatch(f"conv2d: stride {s}, padding {p}")
    nb, cin, h, w_in = xd.shape
    cout, _, kh, kw = wd.shape
    hout = (h + 2 * p - kh) // s + 1
    wout = (w_in + 2 * p - kw) // s + 1
    if hout < 1 or wout < 1:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} too large for {h}x{w_in} with padding {p}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias {bias.data.shape}, expected ({cout},)")
    _check_finite("conv2d", xd, wd, *(() if bias is None else (bias.data,)))

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = np.empty((nb, cin, kh, kw, hout, wout))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * (hout - 1) + 1 : s, j : j + s * (wout - 1) + 1 : s]
    # tensordot instead of einsum: same contractions without per-call path planning
    out = np.tensordot(cols, wd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def back(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * (hout - 1) + 1 : s, j : j + s * (wout - 1) + 1 : s] += gcols[:, :, i, j]
        gx = gxp[:, :, p : p + h, p : p + w_in] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _finish("conv2d", inputs, out, back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("relu", x.data)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def back(g):
        return (g * mask,)

    return _finish("relu", (x,), out, back)


def maxpool(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise ShapeMismatch(f"maxpool: expected 4-d input, got {xd.shape}")
    k = int(size)
    nb, c, h, w = xd.shape
    ho, wo = h // k, w // k
    if k < 1 or ho < 1 or wo < 1:
        raise ShapeMismatch(f"maxpool: window {k} on {h}x{w}")
    _check_finite("maxpool", xd)
    xc = xd[:, :, : ho * k, : wo * k]
    xr = xc.reshape(nb, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, ho, wo, k * k)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gxr = np.zeros((nb, c, ho, wo, k * k))
        np.put_along_axis(gxr, idx[..., None], g[..., None], axis=-1)
        gxc = gxr.reshape(nb, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, ho * k, wo * k)
        gx = np.zeros((nb, c, h, w))
        gx[:, :, : ho * k, : wo * k] = gxc
        return (gx,)

    return _finish("maxpool", (x,), out, back)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeMismatch(f"flatten: expected batch dimension, got {x.data.shape}")
    _check_finite("flatten", x.data)
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)

    def back(g):
        return (g.reshape(shape),)

    return _finish("flatten", (x,), out, back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("add", a.data, b.data)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.data.shape} + {b.data.shape}") from exc

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _finish("add", (a, b), out, back)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteInput("scale: non-finite factor")
    _check_finite("scale", x.data)
    out = x.data * c

    def back(g):
        return (g * c,)

    return _finish("scale", (x,), out, back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("mul", a.data, b.data)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.data.shape} * {b.data.shape}") from exc

    def back(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _finish("mul", (a, b), out, back)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("softmax", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * out,)

    return _finish("softmax", (x,), out, back)


def log(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("log", x.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def back(g):
        return (g / x.data,)

    return _finish("log", (x,), out, back)


def mean(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("mean", x.data)
    n = x.data.size
    out = np.asarray(x.data.mean())

    def back(g):
        return (np.full(x.data.shape, float(g) / n),)

    return _finish("mean", (x,), out, back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    logits = as_tensor(logits)
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeMismatch(f"cross_entropy: expected [B, C] logits, got {ld.shape}")
    _check_finite("cross_entropy", ld)
    y = np.asarray(labels)
    nb, nc = ld.shape
    if y.shape != (nb,):
        raise ShapeMismatch(f"cross_entropy: {nb} logits rows, labels {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.floor(y)):
            raise LabelOutOfRange("cross_entropy: labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= nc):
        raise LabelOutOfRange(f"cross_entropy: label outside [0, {nc})")
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = np.asarray(-logp[np.arange(nb), y].mean())
    probs = np.exp(logp)

    def back(g):
        gi = probs.copy()
        gi[np.arange(nb), y] -= 1.0
        return (gi * (float(g) / nb),)

    return _finish("cross_entropy", (logits,), out, back)


def kl_divergence(p_logits, q_logits) -> Tensor:
    """Mean over the batch of KL(softmax(p) || softmax(q)); differentiable in both arguments."""
    a, b = as_tensor(p_logits), as_tensor(q_logits)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeMismatch(f"kl_divergence: {a.data.shape} vs {b.data.shape}")
    _check_finite("kl_divergence", a.data, b.data)

    def logsoft(z):
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    lp, lq = logsoft(a.data), logsoft(b.data)
    p, q = np.exp(lp), np.exp(lq)
    rows = (p * (lp - lq)).sum(axis=1)
    out = np.asarray(rows.mean())
    nb = a.data.shape[0]

    def back(g):
        ga = p * ((lp - lq) - rows[:, None]) * (float(g) / nb)
        gb = (q - p) * (float(g) / nb)
        return ga, gb

    return _finish("kl_divergence", (a, b), out, back)


_FORWARD_OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool": maxpool,
    "flatten": flatten,
    "add": add,
    "scale": scale,
    "softmax": softmax,
    "log": log,
    "mean": mean,
    "mul": mul,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; used by generic tests and diagnostics."""
    try:
        fn = _FORWARD_OPS[op_kind]
    except KeyError:
        raise ShapeMismatch(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(loss: Tensor):
    """Populate grad buffers for every requires_grad tensor reachable from loss."""
    if not isinstance(loss, Tensor):
        raise DetachedLoss("backward: loss is not a Tensor")
    if loss.data.shape != ():
        raise NotScalar(f"backward: loss has shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise DetachedLoss("backward: loss was not recorded on a tape")
    grads: dict[int, Array] = {id(loss): np.ones(())}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, backfn in reversed(tape._nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, backfn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = inp
    for key, t in holders.items():
        t.grad = np.asarray(grads[key], dtype=np.float64).reshape(t.data.shape)
    for out, _, _ in tape._nodes:
        out._tape = None
    tape._nodes.clear()


@dataclass
class SgdConfig:
    """Plain SGD hyperparameters; direction selects gradient descent or ascent."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    direction: str = "descent"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.direction not in ("descent", "ascent"):
            raise ValueError(f"direction must be descent or ascent, got {self.direction!r}")


class SgdState:
    """Momentum buffers, one per parameter slot."""

    def __init__(self):
        self.velocity: dict[int, Array] = {}


def sgd_step(params: Sequence[Tensor], grads, state: SgdState, cfg: SgdConfig):
    """One SGD update in place.

    Descent: v <- m*v + (g + wd*p); p <- p - lr*v.  Ascent negates g before
    the identical update, so weight decay still pulls toward zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeMismatch(f"sgd_step: {len(params)} params, {len(grads)} grads")
    sign = -1.0 if cfg.direction == "ascent" else 1.0
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ShapeMismatch(f"sgd_step: missing gradient for parameter {i}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"sgd_step: param {p.data.shape}, grad {g.shape}")
        eff = sign * g + cfg.weight_decay * p.data
        v = state.velocity.get(i)
        v = eff if v is None else cfg.momentum * v + eff
        state.velocity[i] = v
        p.data = p.data - cfg.learning_rate * v
    return params


def inject_noise(params: Sequence[Tensor], sigma: float, rng) -> Sequence[Tensor]:
    """Add elementwise N(0, sigma^2) noise to each parameter, reproducibly."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return params
    base = rng if isinstance(rng, RngStream) else stream(int(rng))
    for i, p in enumerate(params):
        gen = base.child("noise", i).generator()
        p.data = p.data + gen.normal(0.0, sigma, size=p.data.shape)
    return params
