"""Parameterized layer primitives shared by the network builders."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

WEIGHT_STD = 0.02


def normal_param(rng: np.random.Generator, shape, std: float = WEIGHT_STD, dtype=np.float64) -> ad.Tensor:
    return ad.Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def const_param(shape, fill: float, dtype=np.float64) -> ad.Tensor:
    return ad.Tensor(np.full(shape, fill, dtype=dtype), requires_grad=True)


class Dense:
    """Affine map on [N, in] rows; weight stored [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias_fill: float = 0.0, dtype=np.float64):
        self.weight = normal_param(rng, (in_features, out_features), dtype=dtype)
        self.bias = const_param((out_features,), bias_fill, dtype=dtype)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class Conv:
    """Strided 2d convolution with bias; weight stored OIHW."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, pad: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = normal_param(rng, (out_channels, in_channels, kernel, kernel), dtype=dtype)
        self.bias = const_param((out_channels,), 0.0, dtype=dtype)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class ConvTranspose:
    """Strided transposed 2d convolution with bias; weight stored IOHW."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, pad: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = normal_param(rng, (in_channels, out_channels, kernel, kernel), dtype=dtype)
        self.bias = const_param((out_channels,), 0.0, dtype=dtype)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def collect_parameters(named_children: dict[str, object]) -> dict[str, ad.Tensor]:
    """Flatten child parameter dicts into dotted names."""
    out: dict[str, ad.Tensor] = {}
    for prefix, child in named_children.items():
        if isinstance(child, ad.Tensor):
            out[prefix] = child
            continue
        for name, p in child.parameters().items():
            out[f"{prefix}.{name}"] = p
    return out
