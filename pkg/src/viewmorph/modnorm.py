"""Batch normalization and its identity-modulated variant.

The modulated form normalizes a decoder map with batch statistics, then
scales and shifts it per channel with coefficients predicted from the
identity feature. The identity feature is first gated by a channel
attention vector derived from the map's own spatial averages, so the
modulation can emphasize different identity components at each layer.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import BatchSizeError, ShapeError
from .layers import Dense, collect_parameters

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(
    x: ad.Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> ad.Tensor:
    """Normalize an NCHW map per channel; no learnable affine.

    Training uses biased batch statistics over (N, H, W) and folds them
    into the running buffers in place; eval reads the running buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got shape {list(x.shape)}")
    n, c, h, w = x.shape
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"running stats must have shape [{c}]")

    if train:
        if n < 2:
            raise BatchSizeError(f"batch statistics need at least 2 samples, got {n}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = ad.Tensor(xhat.astype(x.data.dtype), x.requires_grad)

    m = n * h * w

    def pull():
        if not x.requires_grad:
            return
        g = out.grad
        if not train:
            ad.accumulate_grad(x, g * invstd[None, :, None, None])
            return
        sum_g = g.sum(axis=(0, 2, 3))
        sum_gx = (g * xhat).sum(axis=(0, 2, 3))
        dx = (invstd[None, :, None, None] / m) * (m * g - sum_g[None, :, None, None] - xhat * sum_gx[None, :, None, None])
        ad.accumulate_grad(x, dx.astype(x.data.dtype))

    ad.record_op(out, pull)
    return out


class PlainBatchNorm:
    """Batch norm with a learnable per-channel affine, for the unmodulated variants."""

    def __init__(self, channels: int, dtype=np.float64):
        self.channels = channels
        self.gamma = ad.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def __call__(self, x: ad.Tensor, train: bool) -> ad.Tensor:
        xhat = batch_norm(x, self.running_mean, self.running_var, train)
        n = x.shape[0]
        g = ad.reshape(self.gamma, [1, self.channels, 1, 1])
        b = ad.reshape(self.beta, [1, self.channels, 1, 1])
        return ad.add(ad.mul(xhat, g), b)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class IdentityModulatedNorm:
    """Normalization whose affine coefficients are predicted from an identity feature.

    The map's per-channel spatial averages drive a two-layer gate ending
    in a sigmoid; the gated identity feature then feeds two small heads
    producing the per-sample scale (bias starts at 1) and shift (bias
    starts at 0) applied to the normalized map.
    """

    def __init__(self, channels: int, id_features: int, rng: np.random.Generator, dtype=np.float64):
        self.channels = channels
        self.id_features = id_features
        self.gate1 = Dense(channels, id_features, rng, dtype=dtype)
        self.gate2 = Dense(id_features, id_features, rng, dtype=dtype)
        self.scale1 = Dense(id_features, id_features, rng, dtype=dtype)
        self.scale2 = Dense(id_features, channels, rng, bias_fill=1.0, dtype=dtype)
        self.shift1 = Dense(id_features, id_features, rng, dtype=dtype)
        self.shift2 = Dense(id_features, channels, rng, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def gate(self, x: ad.Tensor) -> ad.Tensor:
        """Channel attention over the identity feature, in (0, 1)."""
        pooled = ad.spatial_mean(x)
        return ad.sigmoid(self.gate2(ad.leaky_relu(self.gate1(pooled))))

    def __call__(self, x: ad.Tensor, identity: ad.Tensor, train: bool) -> ad.Tensor:
        if identity.data.ndim != 2 or identity.shape != (x.shape[0], self.id_features):
            raise ShapeError(
                f"identity feature must be [{x.shape[0]}, {self.id_features}], got {list(identity.shape)}"
            )
        xhat = batch_norm(x, self.running_mean, self.running_var, train)
        gated = ad.mul(identity, self.gate(x))
        scale = self.scale2(ad.leaky_relu(self.scale1(gated)))
        shift = self.shift2(ad.leaky_relu(self.shift1(gated)))
        n = x.shape[0]
        scale4 = ad.reshape(scale, [n, self.channels, 1, 1])
        shift4 = ad.reshape(shift, [n, self.channels, 1, 1])
        return ad.add(ad.mul(xhat, scale4), shift4)

    def parameters(self) -> dict[str, ad.Tensor]:
        return collect_parameters(
            {
                "gate1": self.gate1,
                "gate2": self.gate2,
                "scale1": self.scale1,
                "scale2": self.scale2,
                "shift1": self.shift1,
                "shift2": self.shift2,
            }
        )

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}
