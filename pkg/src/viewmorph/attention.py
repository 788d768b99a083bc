"""Cross-feature attention links between decoder and encoder maps.

Each decoder position builds a query, scores it against encoder keys in
a square window centered on the same location (or over the whole map in
the global variant), and returns the attention-weighted encoder values.
Positions outside the map are excluded from the softmax rather than
zero-padded, so edge windows renormalize over their in-bounds neighbors.

The windowed op works on channels-last copies surrounded by a zero ring
of width r: scores come from one einsum over a strided window view of
the padded keys, out-of-bounds slots are then forced to -inf before the
softmax, and the weighted sums run as whole-map slice updates per window
offset, so no [N, positions, window, C] gather is ever materialized.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .errors import ShapeError

ATTENTION_MODES = ("windowed", "global")


def _check_qkv(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor) -> None:
    if q.data.ndim != 4 or k.data.ndim != 4 or v.data.ndim != 4:
        raise ShapeError("attention expects NCHW query, key, and value maps")
    if q.shape != k.shape:
        raise ShapeError(f"query shape {list(q.shape)} != key shape {list(k.shape)}")
    if v.shape[0] != q.shape[0] or v.shape[2:] != q.shape[2:]:
        raise ShapeError(f"value shape {list(v.shape)} does not align with query shape {list(q.shape)}")


def _offset_slices(dy: int, dx: int, h: int, w: int):
    """Slices selecting center positions whose (dy, dx) neighbor is in bounds."""
    ys = slice(max(0, -dy), h - max(0, dy))
    xs = slice(max(0, -dx), w - max(0, dx))
    ns = slice(ys.start + dy, ys.stop + dy)
    ms = slice(xs.start + dx, xs.stop + dx)
    return ys, xs, ns, ms


def _window_offsets(radius: int) -> list[tuple[int, int]]:
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]


def _pad_lastc(x_nchw: np.ndarray, radius: int) -> np.ndarray:
    """NCHW map -> channels-last [N, H+2r, W+2r, C] copy with a zero ring."""
    n, c, h, w = x_nchw.shape
    out = np.zeros((n, h + 2 * radius, w + 2 * radius, c), dtype=x_nchw.dtype)
    out[:, radius : radius + h, radius : radius + w, :] = x_nchw.transpose(0, 2, 3, 1)
    return out


def _oob_mask(h: int, w: int, radius: int) -> np.ndarray:
    """[H, W, (2r+1)^2] booleans marking window slots that fall outside the map."""
    offs = np.array(_window_offsets(radius))
    yy = np.arange(h)[:, None, None] + offs[None, None, :, 0]
    xx = np.arange(w)[None, :, None] + offs[None, None, :, 1]
    return (yy < 0) | (yy >= h) | (xx < 0) | (xx >= w)


def _window_logits(qt: np.ndarray, kp: np.ndarray, radius: int, scale: float) -> np.ndarray:
    """Masked scores [N, H, W, (2r+1)^2] of channels-last queries against padded keys."""
    n, h, w, _ = qt.shape
    side = 2 * radius + 1
    kwin = sliding_window_view(kp, (side, side), axis=(1, 2))  # [N, H, W, C, side, side]
    logits = np.einsum("nhwc,nhwcyx->nhwyx", qt, kwin).reshape(n, h, w, side * side)
    if scale != 1.0:
        logits *= scale
    logits[:, _oob_mask(h, w, radius)] = -np.inf
    return logits


def gather_window(feature_map: np.ndarray, center: tuple[int, int], radius: int):
    """In-bounds features of the (2r+1)^2 square around ``center`` of a [C,H,W] map.

    Returns (window [C, n_valid], mask), where mask lists, in row-major
    window order, which of the (2r+1)^2 slots fall inside the map.
    """
    fm = np.asarray(feature_map)
    if fm.ndim != 3:
        raise ShapeError(f"gather_window expects a [C,H,W] map, got shape {list(fm.shape)}")
    _, h, w = fm.shape
    row, col = center
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"center {center} outside map of size {h}x{w}")
    cols, mask = [], []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            yy, xx = row + dy, col + dx
            ok = 0 <= yy < h and 0 <= xx < w
            mask.append(ok)
            if ok:
                cols.append(fm[:, yy, xx])
    return np.stack(cols, axis=1), mask


def windowed_attention_weights(q: np.ndarray, k: np.ndarray, radius: int, scaled: bool = False) -> np.ndarray:
    """Attention distributions [N,H,W,(2r+1)^2]; out-of-bounds slots carry exactly 0."""
    ch = q.shape[1]
    scale = 1.0 / np.sqrt(ch) if scaled else 1.0
    qt = np.ascontiguousarray(np.asarray(q).transpose(0, 2, 3, 1))
    logits = _window_logits(qt, _pad_lastc(np.asarray(k), radius), radius, scale)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)  # exp(-inf) = 0 zeroes the out-of-bounds slots
    return e / e.sum(axis=-1, keepdims=True)


def windowed_attention(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, radius: int, scaled: bool = False) -> ad.Tensor:
    """Attention over a (2r+1)^2 window around each position."""
    _check_qkv(q, k, v)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    n, ch, h, w = q.shape
    cv = v.shape[1]
    side = 2 * radius + 1
    offsets = _window_offsets(radius)
    scale = 1.0 / np.sqrt(ch) if scaled else 1.0

    qt = np.ascontiguousarray(q.data.transpose(0, 2, 3, 1))  # [N, H, W, C]
    kp = _pad_lastc(k.data, radius)
    vp = _pad_lastc(v.data, radius)

    logits = _window_logits(qt, kp, radius, scale)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)  # exp(-inf) = 0 drops out-of-bounds entries
    alpha = e / e.sum(axis=-1, keepdims=True)

    # Out-of-bounds weights are exactly 0, so reading the zero ring adds nothing.
    out_t = np.zeros((n, h, w, cv), dtype=v.data.dtype)
    for d, (dy, dx) in enumerate(offsets):
        ys = slice(radius + dy, radius + dy + h)
        xs = slice(radius + dx, radius + dx + w)
        out_t += alpha[:, :, :, d, None] * vp[:, ys, xs, :]

    req = q.requires_grad or k.requires_grad or v.requires_grad
    out = ad.Tensor(np.ascontiguousarray(out_t.transpose(0, 3, 1, 2)), req)

    def pull():
        gt = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1))  # [N, H, W, Cv]
        vwin = sliding_window_view(vp, (side, side), axis=(1, 2))
        dalpha = np.einsum("nhwc,nhwcyx->nhwyx", gt, vwin).reshape(n, h, w, side * side)
        dlogits = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
        if scaled:
            dlogits = dlogits * scale
        dqt = np.zeros_like(qt) if q.requires_grad else None
        dkp = np.zeros_like(kp) if k.requires_grad else None
        dvp = np.zeros_like(vp) if v.requires_grad else None
        for d, (dy, dx) in enumerate(offsets):
            ys = slice(radius + dy, radius + dy + h)
            xs = slice(radius + dx, radius + dx + w)
            wd = dlogits[:, :, :, d, None]
            if dqt is not None:
                dqt += wd * kp[:, ys, xs, :]
            if dkp is not None:
                dkp[:, ys, xs, :] += wd * qt
            if dvp is not None:
                dvp[:, ys, xs, :] += alpha[:, :, :, d, None] * gt
        core_y = slice(radius, radius + h)
        core_x = slice(radius, radius + w)
        if dqt is not None:
            ad.accumulate_grad(q, dqt.transpose(0, 3, 1, 2))
        if dkp is not None:
            ad.accumulate_grad(k, dkp[:, core_y, core_x, :].transpose(0, 3, 1, 2))
        if dvp is not None:
            ad.accumulate_grad(v, dvp[:, core_y, core_x, :].transpose(0, 3, 1, 2))

    ad.record_op(out, pull)
    return out


def global_attention(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, scaled: bool = False) -> ad.Tensor:
    """Attention of every position over every other position."""
    _check_qkv(q, k, v)
    n, ch, h, w = q.shape
    cv = v.shape[1]
    p = h * w
    scale = 1.0 / np.sqrt(ch) if scaled else 1.0
    q3 = q.data.reshape(n, ch, p)
    k3 = k.data.reshape(n, ch, p)
    v3 = v.data.reshape(n, cv, p)

    logits = np.einsum("ncp,ncq->npq", q3, k3) * scale
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    alpha = e / e.sum(axis=-1, keepdims=True)
    out = ad.Tensor(
        np.einsum("npq,ncq->ncp", alpha, v3).reshape(n, cv, h, w),
        q.requires_grad or k.requires_grad or v.requires_grad,
    )

    def pull():
        g3 = out.grad.reshape(n, cv, p)
        dalpha = np.einsum("ncp,ncq->npq", g3, v3)
        dlogits = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            ad.accumulate_grad(q, np.einsum("npq,ncq->ncp", dlogits, k3).reshape(q.shape))
        if k.requires_grad:
            ad.accumulate_grad(k, np.einsum("npq,ncp->ncq", dlogits, q3).reshape(k.shape))
        if v.requires_grad:
            ad.accumulate_grad(v, np.einsum("npq,ncp->ncq", alpha, g3).reshape(v.shape))

    ad.record_op(out, pull)
    return out


class CrossAttentionLink:
    """Bias-free 1x1 projections feeding windowed or global attention.

    Queries come from the decoder-side map, keys and values from the
    encoder-side map at the same resolution; the returned map carries
    ``head_channels`` channels of attended encoder content.
    """

    def __init__(
        self,
        query_channels: int,
        source_channels: int,
        head_channels: int,
        radius: int,
        mode: str = "windowed",
        scaled: bool = False,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        if mode not in ATTENTION_MODES:
            raise ValueError(f"mode must be one of {ATTENTION_MODES}, got {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mode = mode
        self.radius = radius
        self.scaled = scaled
        self.head_channels = head_channels

        def proj(cout, cin):
            w = rng.uniform(-0.05, 0.05, size=(cout, cin, 1, 1)).astype(dtype)
            return ad.Tensor(w, requires_grad=True)

        self.wq = proj(head_channels, query_channels)
        self.wk = proj(head_channels, source_channels)
        self.wv = proj(head_channels, source_channels)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv}

    def attended(self, y: ad.Tensor, x: ad.Tensor) -> ad.Tensor:
        """Attention-weighted encoder values only, [N, head_channels, H, W]."""
        if y.shape[2:] != x.shape[2:]:
            raise ShapeError(f"maps must share spatial size, got {list(y.shape)} vs {list(x.shape)}")
        q = ad.conv2d(y, self.wq)
        k = ad.conv2d(x, self.wk)
        v = ad.conv2d(x, self.wv)
        if self.mode == "windowed":
            return windowed_attention(q, k, v, self.radius, self.scaled)
        return global_attention(q, k, v, self.scaled)

    def __call__(self, y: ad.Tensor, x: ad.Tensor) -> ad.Tensor:
        """Decoder map with attended encoder content appended: [N, Cy+head, H, W]."""
        return ad.concat_channels(y, self.attended(y, x))
