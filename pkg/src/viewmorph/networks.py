"""Generator and discriminator builders, including the ablation variants.

The generator encodes an image to an identity feature, concatenates it
with noise and a viewpoint code, seeds a decoder from that latent, and
upsamples back to an image. Depending on the variant, decoder blocks are
normalized with identity-modulated or plain batch norm, and one decoder
resolution receives encoder content through a windowed attention link, a
global attention link, a same-location skip, or nothing at all.

The discriminator shares a conv trunk between an identity head (one
extra class reserved for generated images) and a viewpoint head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import CrossAttentionLink
from .errors import ConfigError, ShapeError
from .layers import Conv, ConvTranspose, Dense, collect_parameters
from .modnorm import IdentityModulatedNorm, PlainBatchNorm

# Link type x normalization: "full" = windowed attention link + identity
# modulation; "attention" / "global_attention" = windowed / global link
# with plain batch norm; "unet" = same-location concat skip with identity
# modulation; "vanilla" = no link, plain batch norm.
VARIANTS = ("full", "vanilla", "global_attention", "attention", "unet")
MODULATED_VARIANTS = ("full", "unet")
LINKED_VARIANTS = ("full", "global_attention", "attention")


@dataclass
class NetworkConfig:
    """Shared shape plan for generator and discriminator."""

    n_identities: int
    image_size: int = 64
    base_channels: int = 64
    id_features: int = 128
    noise_features: int = 128
    n_viewpoints: int = 5
    variant: str = "full"
    link_radius: int = 4
    attention_scaled: bool = False
    dtype: object = field(default=np.float64, repr=False)

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 16 != 0:
            raise ConfigError(f"image_size must be a multiple of 16 and >= 16, got {self.image_size}")
        if self.base_channels < 2 or self.base_channels % 2 != 0:
            raise ConfigError(f"base_channels must be even and >= 2, got {self.base_channels}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.link_radius < 0:
            raise ConfigError(f"link_radius must be >= 0, got {self.link_radius}")
        for name in ("n_identities", "id_features", "noise_features"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_viewpoints < 2:
            raise ConfigError(f"n_viewpoints must be >= 2, got {self.n_viewpoints}")

    @property
    def channel_plan(self) -> tuple[int, int, int, int]:
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c)

    @property
    def seed_size(self) -> int:
        return self.image_size // 16

    @property
    def latent_features(self) -> int:
        return self.id_features + self.noise_features + self.n_viewpoints

    @property
    def fake_class(self) -> int:
        """Internal 0-based index of the generated-image class in the identity head."""
        return self.n_identities


def _check_images(x: ad.Tensor, size: int, who: str) -> None:
    if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
        raise ShapeError(f"{who} expects [N,3,{size},{size}] images, got {list(x.shape)}")


class Generator:
    """Encoder, latent seed, and decoder for one ablation variant."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        c1, c2, c3, c4 = config.channel_plan
        dt = config.dtype
        self.enc1 = Conv(3, c1, 4, 2, 1, rng, dtype=dt)
        self.enc2 = Conv(c1, c2, 4, 2, 1, rng, dtype=dt)
        self.enc3 = Conv(c2, c3, 4, 2, 1, rng, dtype=dt)
        self.enc4 = Conv(c3, c4, 4, 2, 1, rng, dtype=dt)
        self.id_head = Dense(c4, config.id_features, rng, dtype=dt)

        self.seed = Dense(config.latent_features, c4 * config.seed_size**2, rng, dtype=dt)
        self.dec1 = ConvTranspose(c4, c3, 4, 2, 1, rng, dtype=dt)
        self.dec2 = ConvTranspose(c3, c2, 4, 2, 1, rng, dtype=dt)
        self.dec3 = ConvTranspose(c2, c1, 4, 2, 1, rng, dtype=dt)
        self.to_image = ConvTranspose(c1, 3, 4, 2, 1, rng, dtype=dt)

        if config.variant in MODULATED_VARIANTS:
            self.norm1 = IdentityModulatedNorm(c3, config.id_features, rng, dtype=dt)
            self.norm2 = IdentityModulatedNorm(c2, config.id_features, rng, dtype=dt)
            self.norm3 = IdentityModulatedNorm(c1, config.id_features, rng, dtype=dt)
        else:
            self.norm1 = PlainBatchNorm(c3, dtype=dt)
            self.norm2 = PlainBatchNorm(c2, dtype=dt)
            self.norm3 = PlainBatchNorm(c1, dtype=dt)

        # encoder content enters the decoder at the c2 resolution (image_size/4)
        self.link = None
        self.fusion = None
        if config.variant in LINKED_VARIANTS:
            mode = "global" if config.variant == "global_attention" else "windowed"
            head = c2 // 2
            self.link = CrossAttentionLink(
                c2, c2, head, radius=config.link_radius, mode=mode, scaled=config.attention_scaled, rng=rng, dtype=dt
            )
            self.fusion = Conv(c2 + head, c2, 1, 1, 0, rng, dtype=dt)
        elif config.variant == "unet":
            self.fusion = Conv(c2 + c2, c2, 1, 1, 0, rng, dtype=dt)

    def _norm(self, layer, x: ad.Tensor, f_id: ad.Tensor, train: bool) -> ad.Tensor:
        if isinstance(layer, IdentityModulatedNorm):
            return layer(x, f_id, train)
        return layer(x, train)

    def encode(self, images: ad.Tensor):
        """Identity feature plus the intermediate maps the decoder links into."""
        _check_images(images, self.config.image_size, "encode")
        e1 = ad.leaky_relu(self.enc1(images))
        e2 = ad.leaky_relu(self.enc2(e1))
        e3 = ad.leaky_relu(self.enc3(e2))
        e4 = ad.leaky_relu(self.enc4(e3))
        f_id = self.id_head(ad.spatial_mean(e4))
        return f_id, {"e1": e1, "e2": e2, "e3": e3, "e4": e4}

    def decode(self, f_id: ad.Tensor, z: ad.Tensor, code: ad.Tensor, skips: dict, train: bool) -> ad.Tensor:
        cfg = self.config
        n = f_id.shape[0]
        if z.shape != (n, cfg.noise_features):
            raise ShapeError(f"noise must be [N,{cfg.noise_features}], got {list(z.shape)}")
        if code.shape != (n, cfg.n_viewpoints):
            raise ShapeError(f"viewpoint code must be [N,{cfg.n_viewpoints}], got {list(code.shape)}")
        latent = ad.concat_channels(ad.concat_channels(f_id, z), code)
        c4 = cfg.channel_plan[3]
        h = ad.reshape(self.seed(latent), [n, c4, cfg.seed_size, cfg.seed_size])
        h = ad.relu(self._norm(self.norm1, self.dec1(h), f_id, train))
        h = ad.relu(self._norm(self.norm2, self.dec2(h), f_id, train))
        if self.link is not None:
            h = self.fusion(self.link(h, skips["e2"]))
        elif self.config.variant == "unet":
            h = self.fusion(ad.concat_channels(h, skips["e2"]))
        h = ad.relu(self._norm(self.norm3, self.dec3(h), f_id, train))
        return ad.tanh(self.to_image(h))

    def generate(self, images: ad.Tensor, z: ad.Tensor, code: ad.Tensor, train: bool) -> ad.Tensor:
        f_id, skips = self.encode(images)
        return self.decode(f_id, z, code, skips, train)

    def _children(self) -> dict[str, object]:
        kids = {
            "enc1": self.enc1,
            "enc2": self.enc2,
            "enc3": self.enc3,
            "enc4": self.enc4,
            "id_head": self.id_head,
            "seed": self.seed,
            "dec1": self.dec1,
            "dec2": self.dec2,
            "dec3": self.dec3,
            "to_image": self.to_image,
            "norm1": self.norm1,
            "norm2": self.norm2,
            "norm3": self.norm3,
        }
        if self.link is not None:
            kids["link"] = self.link
        if self.fusion is not None:
            kids["fusion"] = self.fusion
        return kids

    def parameters(self) -> dict[str, ad.Tensor]:
        return collect_parameters(self._children())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("norm1", "norm2", "norm3"):
            for key, buf in getattr(self, name).buffers().items():
                out[f"{name}.{key}"] = buf
        return out


class Discriminator:
    """Shared conv trunk with identity (plus fake class) and viewpoint heads."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        c1, c2, c3, c4 = config.channel_plan
        dt = config.dtype
        self.conv1 = Conv(3, c1, 4, 2, 1, rng, dtype=dt)
        self.conv2 = Conv(c1, c2, 4, 2, 1, rng, dtype=dt)
        self.conv3 = Conv(c2, c3, 4, 2, 1, rng, dtype=dt)
        self.conv4 = Conv(c3, c4, 4, 2, 1, rng, dtype=dt)
        flat = c4 * config.seed_size**2
        self.identity_head = Dense(flat, config.n_identities + 1, rng, dtype=dt)
        self.viewpoint_head = Dense(flat, config.n_viewpoints, rng, dtype=dt)

    def __call__(self, images: ad.Tensor):
        _check_images(images, self.config.image_size, "discriminate")
        h = ad.leaky_relu(self.conv1(images))
        h = ad.leaky_relu(self.conv2(h))
        h = ad.leaky_relu(self.conv3(h))
        h = ad.leaky_relu(self.conv4(h))
        n = h.shape[0]
        flat = ad.reshape(h, [n, h.size // n])
        return self.identity_head(flat), self.viewpoint_head(flat)

    def parameters(self) -> dict[str, ad.Tensor]:
        return collect_parameters(
            {
                "conv1": self.conv1,
                "conv2": self.conv2,
                "conv3": self.conv3,
                "conv4": self.conv4,
                "identity_head": self.identity_head,
                "viewpoint_head": self.viewpoint_head,
            }
        )


def count_parameters(params: dict[str, ad.Tensor]) -> int:
    return sum(p.size for p in params.values())


def one_hot_codes(labels, n_classes: int, dtype=np.float64) -> np.ndarray:
    """Rows of the identity matrix for 0-based labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ShapeError(f"labels must lie in [0,{n_classes}), got range [{labels.min()},{labels.max()}]")
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out
