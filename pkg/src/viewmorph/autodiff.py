"""Dense tensors with reverse-mode automatic differentiation.

Operations record backward closures onto an explicit tape in execution
order; ``backward`` replays the tape in exact reverse order, accumulating
gradients with ``+=`` so fan-out (a tensor consumed twice) sums its
per-use contributions. Outside a ``Tape`` context nothing is recorded,
which doubles as inference mode.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, NumericError, ShapeError

POINTWISE_KINDS = ("relu", "leaky_relu", "sigmoid", "tanh", "mul", "add")

# When set (by kink_probe), relu and leaky_relu append the sign pattern
# of their inputs here so callers can tell whether two nearby forward
# passes ran through the same piecewise-linear region.
_KINK_SIGNS: list[np.ndarray] | None = None


@contextmanager
def kink_probe():
    """Collect the sign pattern of every kinked activation in the block.

    Yields a list that receives one boolean array per relu / leaky_relu
    call, in execution order. Two forward passes of the same function
    evaluated at nearby points are differentiable-path-equivalent iff
    their collected patterns match elementwise.
    """
    global _KINK_SIGNS
    prev = _KINK_SIGNS
    signs: list[np.ndarray] = []
    _KINK_SIGNS = signs
    try:
        yield signs
    finally:
        _KINK_SIGNS = prev


class Tensor:
    """A dense float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"


def tensor(shape: Sequence[int], fill=0.0, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Allocate a tensor from a scalar fill value or a flat buffer."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"shape entries must be >= 1, got {list(shape)}")
    n = math.prod(shape)
    if np.isscalar(fill):
        data = np.full(shape, fill, dtype=dtype)
    else:
        buf = np.asarray(fill, dtype=dtype).ravel()
        if buf.size != n:
            raise ShapeError(f"buffer length {buf.size} does not match shape {list(shape)} (expects {n})")
        data = buf.reshape(shape)
    return Tensor(data, requires_grad=requires_grad)


# --- tape ---------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Recorded computation: one (output, pull) node per differentiable op."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, pull: Callable[[], None]) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append((out, pull))


def record_op(out: Tensor, pull: Callable[[], None]) -> None:
    """Register a custom op's backward closure (for fused ops built outside this module)."""
    _record(out, pull)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t``'s gradient buffer, allocating on first use."""
    _accum(t, g)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grad buffers of every tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    loss.grad = np.ones_like(loss.data)
    for out, pull in reversed(tape.nodes):
        if out.grad is not None:
            pull()


# --- elementwise and shape ops ------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {list(a.shape)} and {list(b.shape)} do not broadcast") from e
    out = Tensor(out_data, a.requires_grad or b.requires_grad)

    def pull():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    _record(out, pull)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {list(a.shape)} and {list(b.shape)} do not broadcast") from e
    out = Tensor(out_data, a.requires_grad or b.requires_grad)

    def pull():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    _record(out, pull)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, a.requires_grad)

    def pull():
        if a.requires_grad:
            _accum(a, out.grad * s)

    _record(out, pull)
    return out


def relu(x: Tensor) -> Tensor:
    if _KINK_SIGNS is not None:
        _KINK_SIGNS.append(x.data < 0)
    out = Tensor(np.maximum(x.data, 0), x.requires_grad)

    def pull():
        if x.requires_grad:
            _accum(x, out.grad * (x.data > 0))

    _record(out, pull)
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if _KINK_SIGNS is not None:
        _KINK_SIGNS.append(x.data < 0)
    # one slope-factor array serves both the forward map and its derivative
    factor = np.where(x.data < 0, x.data.dtype.type(slope), x.data.dtype.type(1.0))
    out = Tensor(x.data * factor, x.requires_grad)

    def pull():
        if x.requires_grad:
            _accum(x, out.grad * factor)

    _record(out, pull)
    return out


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid exp overflow on large magnitudes
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    s = s.astype(d.dtype)
    out = Tensor(s, x.requires_grad)

    def pull():
        if x.requires_grad:
            _accum(x, out.grad * s * (1.0 - s))

    _record(out, pull)
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t, x.requires_grad)

    def pull():
        if x.requires_grad:
            _accum(x, out.grad * (1.0 - t * t))

    _record(out, pull)
    return out


def pointwise(kind: str, a: Tensor, b: Tensor | None = None, slope: float = 0.2) -> Tensor:
    """Dispatch by name; binary kinds require ``b``."""
    if kind not in POINTWISE_KINDS:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    if kind in ("mul", "add"):
        if b is None:
            raise ShapeError(f"pointwise {kind!r} needs two operands")
        return mul(a, b) if kind == "mul" else add(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "sigmoid":
        return sigmoid(a)
    return tanh(a)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {list(x.shape)} to {list(shape)}")
    out = Tensor(x.data.reshape(shape), x.requires_grad)

    def pull():
        if x.requires_grad:
            _accum(x, out.grad.reshape(x.shape))

    _record(out, pull)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1 (channels for NCHW, features for NK)."""
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise ShapeError(f"concat_channels: ranks {a.data.ndim} and {b.data.ndim} incompatible")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {list(a.shape)} and {list(b.shape)} differ off-channel")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), a.requires_grad or b.requires_grad)

    def pull():
        g = out.grad
        if a.requires_grad:
            _accum(a, g[:, :ca])
        if b.requires_grad:
            _accum(b, g[:, ca:])

    _record(out, pull)
    return out


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along the leading axis."""
    n = x.shape[0] if x.data.ndim else 0
    if x.data.ndim < 1 or not (0 <= start < stop <= n):
        raise ShapeError(f"take_rows: range [{start}, {stop}) invalid for shape {list(x.shape)}")
    out = Tensor(np.ascontiguousarray(x.data[start:stop]), x.requires_grad)

    def pull():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            _accum(x, g)

    _record(out, pull)
    return out


def spatial_mean(x: Tensor) -> Tensor:
    """Per-channel mean over the spatial dimensions of an NCHW map."""
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_mean expects NCHW, got shape {list(x.shape)}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), x.requires_grad)

    def pull():
        if x.requires_grad:
            g = out.grad[:, :, None, None] / (h * w)
            _accum(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))

    _record(out, pull)
    return out


# --- matmul and convolutions --------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} x {list(b.shape)}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def pull():
        g = out.grad
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    _record(out, pull)
    return out


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(f"conv: size {size} with kernel {k}, stride {stride}, pad {pad} has no integral output")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Padded NCHW map -> [N*Ho*Wo, kh*kw*C] patch matrix.

    Columns are ordered (kh, kw, C) with channels innermost so that the
    matching scatter in ``_col2im`` writes contiguous channel runs.
    """
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1))
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(dcols: np.ndarray, n: int, c: int, hp: int, wp: int, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add a [N*Ho*Wo, kh*kw*C] patch matrix onto a padded channels-last buffer [N, Hp, Wp, C]."""
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += d6[:, :, :, i, j, :]
    return dxp


def _kc_matrix(w4: np.ndarray) -> np.ndarray:
    """[A, B, kh, kw] weight -> [A, kh*kw*B] matrix in ``_im2col``'s column order."""
    a = w4.shape[0]
    return np.ascontiguousarray(w4.transpose(0, 2, 3, 1)).reshape(a, -1)


def _kc_to_weight(m2: np.ndarray, a: int, b: int, kh: int, kw: int) -> np.ndarray:
    """Inverse of ``_kc_matrix``: [A, kh*kw*B] -> [A, B, kh, kw]."""
    return m2.reshape(a, kh, kw, b).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding over NCHW input."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weight")
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {list(b.shape)} != [{cout}]")
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(wdt, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride)
    wm = _kc_matrix(w.data)
    out2 = cols @ wm.T
    if b is not None:
        out2 += b.data
    out_data = out2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    req = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    out = Tensor(np.ascontiguousarray(out_data), req)

    def pull():
        g2 = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if w.requires_grad:
            _accum(w, _kc_to_weight(g2.T @ cols, cout, cin, kh, kw))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = g2 @ wm
            dxp = _col2im(dcols, n, cin, h + 2 * pad, wdt + 2 * pad, kh, kw, stride, ho, wo)
            core = dxp[:, pad : pad + h, pad : pad + wdt, :] if pad else dxp
            _accum(x, core.transpose(0, 3, 1, 2))

    _record(out, pull)
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution (the gradient of conv2d as a forward map).

    Weight layout is IOHW: [Cin, Cout, kh, kw].
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects NCHW input and IOHW weight")
    n, cin, h, wdt = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv_transpose2d: input channels {cin} != weight channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {list(b.shape)} != [{cout}]")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wdt - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output {ho}x{wo} is empty")

    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * wdt, cin)
    wm = _kc_matrix(w.data)
    cols = x2 @ wm
    ypt = _col2im(cols, n, cout, ho + 2 * pad, wo + 2 * pad, kh, kw, stride, h, wdt)
    core = ypt[:, pad : pad + ho, pad : pad + wo, :] if pad else ypt
    out_data = core.transpose(0, 3, 1, 2)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    req = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    out = Tensor(np.ascontiguousarray(out_data), req)

    def pull():
        g = out.grad
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        dcols = _im2col(gp, kh, kw, stride)  # [N*h*wdt, kh*kw*Cout]
        if w.requires_grad:
            _accum(w, _kc_to_weight(x2.T @ dcols, cin, cout, kh, kw))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx2 = dcols @ wm.T
            _accum(x, dx2.reshape(n, h, wdt, cin).transpose(0, 3, 1, 2))

    _record(out, pull)
    return out


# --- softmax and loss ---------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax_lastdim: NaN in input")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, x.requires_grad)

    def pull():
        g = out.grad
        if x.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accum(x, p * (g - dot))

    _record(out, pull)
    return out


def cross_entropy_logits(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-softmax likelihood of the target classes."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects [N,K] logits, got {list(logits.shape)}")
    n, k = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy_logits: {n} rows but {t.size} targets")
    if t.min() < 0 or t.max() >= k:
        bad = int(t[(t < 0) | (t >= k)][0])
        raise LabelError(f"target {bad} out of range [0, {k})")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    nll = lse - logits.data[np.arange(n), t]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype), logits.requires_grad)

    def pull():
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), t] -= 1.0
            _accum(logits, p * (out.grad / n))

    _record(out, pull)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype), x.requires_grad)

    def pull():
        if x.requires_grad:
            _accum(x, np.broadcast_to(out.grad, x.shape).astype(x.data.dtype))

    _record(out, pull)
    return out


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype), x.requires_grad)

    def pull():
        if x.requires_grad:
            _accum(x, np.broadcast_to(out.grad / x.size, x.shape).astype(x.data.dtype))

    _record(out, pull)
    return out


# --- gradient checking --------------------------------------------------


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, atol: float = 1e-7) -> float:
    """Compare backward grads with central differences; return max relative error.

    ``fn`` must map the input tensors to a scalar tensor. The relative
    error denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.

    Two kinds of coordinate are skipped rather than rated. Where both
    values are below ``atol`` in magnitude, because a parameter can have
    a genuinely zero gradient (a conv bias feeding batch norm, a
    saturated unit) and there the finite difference is pure cancellation
    noise. And where the two probe evaluations run through different
    piecewise-linear regions of a kinked activation (detected by
    comparing relu / leaky-relu input signs), because the
    central-difference estimator presumes the function is smooth across
    the probed interval and is biased by up to the slope change when a
    kink sits inside it. A wrong backward formula is unaffected by
    either skip: it disagrees on ordinary coordinates, which dominate.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for t in inputs:
        t.zero_grad()
        t.requires_grad = True
    with Tape() as tape:
        loss = fn(*inputs)
        backward(tape, loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for t, ref in zip(inputs, analytic):
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with kink_probe() as hi_signs:
                hi = float(fn(*inputs).data)
            flat[i] = orig - eps
            with kink_probe() as lo_signs:
                lo = float(fn(*inputs).data)
            flat[i] = orig
            if len(hi_signs) != len(lo_signs) or any(
                a.shape != b.shape or not np.array_equal(a, b)
                for a, b in zip(hi_signs, lo_signs)
            ):
                continue
            num = (hi - lo) / (2.0 * eps)
            ana = float(ref.ravel()[i])
            if max(abs(ana), abs(num)) < atol:
                continue
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
