"""Finite-difference verification registry for every differentiable piece.

Each entry builds several random small instances of one operation (or a
whole network), wraps it into a scalar loss, and compares analytic
gradients against central differences at 64-bit. ``run_all`` returns one
result per entry; the command-line front end renders them as a table and
fails if any entry's worst relative error reaches the threshold.

Losses are weighted means with random fixed weights so that symmetric
mistakes (transposed axes, swapped operands) cannot cancel out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import global_attention, windowed_attention
from .modnorm import IdentityModulatedNorm
from .networks import Discriminator, Generator, NetworkConfig, one_hot_codes

THRESHOLD = 1e-4
DEFAULT_INSTANCES = 5


@dataclass(frozen=True)
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    threshold: float = THRESHOLD

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def _t(rng: np.random.Generator, *shape) -> ad.Tensor:
    return ad.Tensor(rng.standard_normal(shape))


def _away_from_kinks(x: ad.Tensor, margin: float = 0.05) -> ad.Tensor:
    x.data += margin * np.sign(x.data)
    return x


class _Weighter:
    """Weighted mean with weights drawn once and reused on every call.

    A gradient check evaluates its loss many times; the random weights
    must be frozen after the first evaluation or the finite differences
    would probe a different function each time.
    """

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._cache: dict = {}

    def __call__(self, out: ad.Tensor) -> ad.Tensor:
        key = tuple(out.shape)
        if key not in self._cache:
            self._cache[key] = ad.Tensor(self._rng.standard_normal(out.shape))
        return ad.mean_all(ad.mul(out, self._cache[key]))


def _check_matmul(rng):
    wm = _Weighter(rng)
    a, b = _t(rng, 3, 4), _t(rng, 4, 5)
    return ad.grad_check(lambda a, b: wm(ad.matmul(a, b)), [a, b])


def _check_conv2d(rng):
    wm = _Weighter(rng)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x, w, b = _t(rng, 2, 3, 7, 7), _t(rng, 2, 3, 3, 3), _t(rng, 2)
    return ad.grad_check(lambda x, w, b: wm(ad.conv2d(x, w, b, stride, pad)), [x, w, b])


def _check_conv_transpose2d(rng):
    wm = _Weighter(rng)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x, w, b = _t(rng, 2, 3, 4, 4), _t(rng, 3, 2, 3, 3), _t(rng, 2)
    return ad.grad_check(lambda x, w, b: wm(ad.conv_transpose2d(x, w, b, stride, pad)), [x, w, b])


def _check_softmax(rng):
    wm = _Weighter(rng)
    x = _t(rng, 4, 7)
    return ad.grad_check(lambda x: wm(ad.softmax_lastdim(x)), [x])


def _check_relu(rng):
    wm = _Weighter(rng)
    x = _away_from_kinks(_t(rng, 3, 5, 2, 2))
    return ad.grad_check(lambda x: wm(ad.relu(x)), [x])


def _check_leaky_relu(rng):
    wm = _Weighter(rng)
    x = _away_from_kinks(_t(rng, 3, 5, 2, 2))
    return ad.grad_check(lambda x: wm(ad.leaky_relu(x, 0.2)), [x])


def _check_sigmoid(rng):
    wm = _Weighter(rng)
    x = _t(rng, 4, 6)
    return ad.grad_check(lambda x: wm(ad.sigmoid(x)), [x])


def _check_tanh(rng):
    wm = _Weighter(rng)
    x = _t(rng, 4, 6)
    return ad.grad_check(lambda x: wm(ad.tanh(x)), [x])


def _check_add(rng):
    wm = _Weighter(rng)
    a, b = _t(rng, 3, 4), _t(rng, 4)
    return ad.grad_check(lambda a, b: wm(ad.add(a, b)), [a, b])


def _check_mul(rng):
    wm = _Weighter(rng)
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)
    return ad.grad_check(lambda a, b: wm(ad.mul(a, b)), [a, b])


def _check_scale(rng):
    wm = _Weighter(rng)
    s = float(rng.standard_normal())
    x = _t(rng, 3, 5)
    return ad.grad_check(lambda x: wm(ad.scale(x, s)), [x])


def _check_reshape(rng):
    wm = _Weighter(rng)
    x = _t(rng, 2, 3, 4)
    return ad.grad_check(lambda x: wm(ad.reshape(x, (6, 4))), [x])


def _check_concat_channels(rng):
    wm = _Weighter(rng)
    a, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 2, 4, 4)
    return ad.grad_check(lambda a, b: wm(ad.concat_channels(a, b)), [a, b])


def _check_take_rows(rng):
    wm = _Weighter(rng)
    x = _t(rng, 6, 3)
    return ad.grad_check(lambda x: wm(ad.take_rows(x, 1, 4)), [x])


def _check_spatial_mean(rng):
    wm = _Weighter(rng)
    x = _t(rng, 2, 3, 4, 5)
    return ad.grad_check(lambda x: wm(ad.spatial_mean(x)), [x])


def _check_cross_entropy(rng):
    logits = _t(rng, 5, 7)
    labels = rng.integers(0, 7, size=5)
    return ad.grad_check(lambda lg: ad.cross_entropy_logits(lg, labels), [logits])


def _check_windowed_attention(rng):
    wm = _Weighter(rng)
    radius = int(rng.integers(1, 3))
    scaled = bool(rng.integers(0, 2))
    q, k, v = _t(rng, 1, 3, 5, 5), _t(rng, 1, 3, 5, 5), _t(rng, 1, 3, 5, 5)
    return ad.grad_check(lambda q, k, v: wm(windowed_attention(q, k, v, radius, scaled)), [q, k, v])


def _check_global_attention(rng):
    wm = _Weighter(rng)
    scaled = bool(rng.integers(0, 2))
    q, k, v = _t(rng, 1, 3, 4, 4), _t(rng, 1, 3, 4, 4), _t(rng, 1, 3, 4, 4)
    return ad.grad_check(lambda q, k, v: wm(global_attention(q, k, v, scaled)), [q, k, v])


def _check_modulated_norm(rng):
    wm = _Weighter(rng)
    norm = IdentityModulatedNorm(3, 4, rng)
    x, ident = _t(rng, 4, 3, 5, 5), _t(rng, 4, 4)
    params = list(norm.parameters().values())
    return ad.grad_check(
        lambda x, ident, *ps: wm(norm(x, ident, train=True)), [x, ident, *params]
    )


_TINY = dict(
    n_identities=3,
    image_size=16,
    base_channels=2,
    id_features=4,
    noise_features=4,
    n_viewpoints=5,
    variant="full",
    link_radius=1,
)


def _pick_small_param(rng, params: dict, limit: int = 256) -> ad.Tensor:
    """One parameter tensor small enough for an affordable FD sweep."""
    small = sorted(name for name, p in params.items() if p.data.size <= limit)
    return params[small[int(rng.integers(len(small)))]]


def _check_generator(rng):
    # Noise and code sweep the seed/fusion/normalization/decoder path;
    # the first encoder weight sweeps encoding and identity modulation.
    # Together they traverse every module end to end. Parameters that
    # move whole pre-activation channels in one step (decoder biases)
    # are left out: batch norm cancels the constant part, and finite
    # differences across an activation kink then dominate the residual
    # gradient at any usable step size.
    wm = _Weighter(rng)
    gen = Generator(NetworkConfig(**_TINY), rng)
    images = _t(rng, 2, 3, 16, 16)
    z = _t(rng, 2, 4)
    code = ad.Tensor(one_hot_codes(rng.integers(0, 5, size=2), 5))
    enc1_weight = gen.parameters()["enc1.weight"]
    return ad.grad_check(
        lambda z, code, w: wm(gen.generate(images, z, code, train=True)),
        [z, code, enc1_weight],
        eps=1e-6,
    )


def _check_discriminator(rng):
    wm_id, wm_attr = _Weighter(rng), _Weighter(rng)
    disc = Discriminator(NetworkConfig(**_TINY), rng)
    images = _t(rng, 2, 3, 16, 16)
    chosen = _pick_small_param(rng, disc.parameters())

    def loss(imgs, p):
        id_logits, attr_logits = disc(imgs)
        return ad.add(wm_id(id_logits), wm_attr(attr_logits))

    return ad.grad_check(loss, [images, chosen], eps=1e-6)


_REGISTRY = [
    ("matmul", _check_matmul),
    ("conv2d", _check_conv2d),
    ("conv_transpose2d", _check_conv_transpose2d),
    ("softmax", _check_softmax),
    ("relu", _check_relu),
    ("leaky_relu", _check_leaky_relu),
    ("sigmoid", _check_sigmoid),
    ("tanh", _check_tanh),
    ("add", _check_add),
    ("mul", _check_mul),
    ("scale", _check_scale),
    ("reshape", _check_reshape),
    ("concat_channels", _check_concat_channels),
    ("take_rows", _check_take_rows),
    ("spatial_mean", _check_spatial_mean),
    ("cross_entropy", _check_cross_entropy),
    ("windowed_attention", _check_windowed_attention),
    ("global_attention", _check_global_attention),
    ("modulated_norm", _check_modulated_norm),
    ("generator", _check_generator),
    ("discriminator", _check_discriminator),
]


def registered_names() -> list:
    return [name for name, _ in _REGISTRY]


def run_all(seed: int = 0, instances: int = DEFAULT_INSTANCES, progress=None) -> list:
    """Run every registered check ``instances`` times; collect worst errors."""
    results = []
    for index, (name, fn) in enumerate(_REGISTRY):
        rng = np.random.default_rng((seed, index))
        worst = 0.0
        for _ in range(instances):
            worst = max(worst, fn(rng))
        result = CheckResult(name=name, instances=instances, max_rel_err=worst)
        results.append(result)
        if progress is not None:
            progress(result)
    return results


def format_table(results) -> str:
    lines = [f"{'operation':<22} {'instances':>9} {'max rel err':>12}  status"]
    for r in results:
        lines.append(
            f"{r.name:<22} {r.instances:>9} {r.max_rel_err:>12.3e}  {'pass' if r.passed else 'FAIL'}"
        )
    n_bad = sum(not r.passed for r in results)
    lines.append(f"{len(results)} checks, {len(results) - n_bad} passed, {n_bad} failed (threshold {THRESHOLD:g})")
    return "\n".join(lines)
