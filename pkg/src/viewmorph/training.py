"""Adversarial training: losses, optimizer, loop, and checkpointing.

Both adversarial objectives are realized as cross-entropy minimization.
The discriminator learns to put real images into their identity class
and viewpoint class, and generated images into a reserved extra
identity class; the generator learns to get its outputs classified as
the source identity and the target viewpoint. The viewpoint head only
ever trains on real images.

Checkpoints are a flat named-tensor container (magic "MGCK") holding
generator/discriminator weights, optimizer moments, normalization
buffers, the RNG state, the step counter, and the config text, so a
checkpoint alone is enough to rebuild the model or resume bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    ConfigError,
    LabelError,
)
from .networks import Discriminator, Generator, NetworkConfig, one_hot_codes

CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint64): 3,
    np.dtype(np.uint8): 4,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


# --- configuration ------------------------------------------------------


@dataclass
class TrainConfig:
    network: NetworkConfig
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-4
    attr_weight: float = 5.0
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 500
    deterministic: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.attr_weight < 0:
            raise ConfigError(f"attr_weight must be >= 0, got {self.attr_weight}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (batch statistics), got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    def to_text(self) -> str:
        net = self.network
        dtype_name = "float32" if np.dtype(net.dtype) == np.float32 else "float64"
        pairs = [
            ("n_identities", net.n_identities),
            ("image_size", net.image_size),
            ("base_channels", net.base_channels),
            ("id_features", net.id_features),
            ("noise_features", net.noise_features),
            ("n_viewpoints", net.n_viewpoints),
            ("variant", net.variant),
            ("link_radius", net.link_radius),
            ("attention_scaled", int(net.attention_scaled)),
            ("dtype", dtype_name),
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("lr", repr(self.lr)),
            ("attr_weight", repr(self.attr_weight)),
            ("beta1", repr(self.beta1)),
            ("beta2", repr(self.beta2)),
            ("adam_eps", repr(self.adam_eps)),
            ("seed", self.seed),
            ("checkpoint_every", self.checkpoint_every),
            ("deterministic", int(self.deterministic)),
        ]
        return "".join(f"{k}={v}\n" for k, v in pairs)

    _KEYS = frozenset((
        "n_identities", "image_size", "base_channels", "id_features",
        "noise_features", "n_viewpoints", "variant", "link_radius",
        "attention_scaled", "dtype", "steps", "batch_size", "lr",
        "attr_weight", "beta1", "beta2", "adam_eps", "seed",
        "checkpoint_every", "deterministic",
    ))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kv: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in cls._KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kv[key] = value
        try:
            net = NetworkConfig(
                n_identities=int(kv["n_identities"]),
                image_size=int(kv["image_size"]),
                base_channels=int(kv["base_channels"]),
                id_features=int(kv["id_features"]),
                noise_features=int(kv["noise_features"]),
                n_viewpoints=int(kv["n_viewpoints"]),
                variant=kv["variant"],
                link_radius=int(kv["link_radius"]),
                attention_scaled=bool(int(kv["attention_scaled"])),
                dtype=np.float32 if kv["dtype"] == "float32" else np.float64,
            )
            return cls(
                network=net,
                steps=int(kv["steps"]),
                batch_size=int(kv["batch_size"]),
                lr=float(kv["lr"]),
                attr_weight=float(kv["attr_weight"]),
                beta1=float(kv["beta1"]),
                beta2=float(kv["beta2"]),
                adam_eps=float(kv["adam_eps"]),
                seed=int(kv["seed"]),
                checkpoint_every=int(kv["checkpoint_every"]),
                deterministic=bool(int(kv["deterministic"])),
            )
        except KeyError as e:
            raise ConfigError(f"config text missing key {e.args[0]!r}") from e
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"invalid config value: {e}") from e


# --- losses -------------------------------------------------------------


def discriminator_loss(
    id_logits_real: ad.Tensor,
    attr_logits_real: ad.Tensor,
    id_logits_fake: ad.Tensor,
    identity_labels,
    viewpoint_labels,
    fake_class: int,
    attr_weight: float,
) -> ad.Tensor:
    """Real images to their identity and viewpoint; fakes to the reserved class."""
    n = id_logits_fake.shape[0]
    loss = ad.cross_entropy_logits(id_logits_real, identity_labels)
    loss = ad.add(loss, ad.scale(ad.cross_entropy_logits(attr_logits_real, viewpoint_labels), attr_weight))
    return ad.add(loss, ad.cross_entropy_logits(id_logits_fake, [fake_class] * n))


def generator_loss(
    id_logits_fake: ad.Tensor,
    attr_logits_fake: ad.Tensor,
    identity_labels,
    target_viewpoints,
    attr_weight: float,
) -> ad.Tensor:
    """Fakes toward the source identity and the requested viewpoint."""
    loss = ad.scale(ad.cross_entropy_logits(attr_logits_fake, target_viewpoints), attr_weight)
    return ad.add(loss, ad.cross_entropy_logits(id_logits_fake, identity_labels))


def _check_labels(labels, upper: int, what: str) -> None:
    arr = np.asarray(labels)
    if arr.size and (arr.min() < 0 or arr.max() >= upper):
        raise LabelError(f"{what} must lie in [0, {upper}), got range [{arr.min()}, {arr.max()}]")


# --- optimizer ----------------------------------------------------------


class Adam:
    """Adam over a fixed named parameter set, with state exposed for checkpoints."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            gg = np.square(g)
            gg *= 1.0 - self.beta2
            v += gg
            denom = np.sqrt(v / correct2)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= self.lr / correct1
            p.data -= denom.astype(p.data.dtype, copy=False)


# --- steps --------------------------------------------------------------


def d_step(
    gen: Generator,
    disc: Discriminator,
    opt: Adam,
    images: ad.Tensor,
    identity_labels,
    viewpoint_labels,
    z: ad.Tensor,
    target_codes: ad.Tensor,
    attr_weight: float,
) -> float:
    """One discriminator update; generated images enter as constants."""
    cfg = gen.config
    _check_labels(identity_labels, cfg.n_identities, "identity labels")
    _check_labels(viewpoint_labels, cfg.n_viewpoints, "viewpoint labels")
    fake = gen.generate(images, z, target_codes, train=True).detach()
    opt.zero_grad()
    with ad.Tape() as tape:
        id_real, attr_real = disc(images)
        id_fake, _ = disc(fake)
        loss = discriminator_loss(
            id_real, attr_real, id_fake, identity_labels, viewpoint_labels, cfg.fake_class, attr_weight
        )
        ad.backward(tape, loss)
    opt.step()
    return float(loss.data)


def _frozen(disc: Discriminator) -> list[ad.Tensor]:
    """Turn off discriminator weight gradients; returns the params to unfreeze."""
    params = [p for p in disc.parameters().values() if p.requires_grad]
    for p in params:
        p.requires_grad = False
    return params


def g_step(
    gen: Generator,
    disc: Discriminator,
    opt: Adam,
    images: ad.Tensor,
    identity_labels,
    target_viewpoints,
    z: ad.Tensor,
    target_codes: ad.Tensor,
    attr_weight: float,
) -> float:
    """One generator update through the frozen-parameter discriminator."""
    cfg = gen.config
    _check_labels(identity_labels, cfg.n_identities, "identity labels")
    _check_labels(target_viewpoints, cfg.n_viewpoints, "target viewpoints")
    opt.zero_grad()
    frozen = _frozen(disc)
    try:
        with ad.Tape() as tape:
            fake = gen.generate(images, z, target_codes, train=True)
            id_fake, attr_fake = disc(fake)
            loss = generator_loss(id_fake, attr_fake, identity_labels, target_viewpoints, attr_weight)
            ad.backward(tape, loss)
    finally:
        for p in frozen:
            p.requires_grad = True
    opt.step()
    return float(loss.data)


def train_step(
    gen: Generator,
    disc: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    images: ad.Tensor,
    identity_labels,
    viewpoint_labels,
    target_viewpoints,
    z: ad.Tensor,
    target_codes: ad.Tensor,
    attr_weight: float,
) -> tuple[float, float]:
    """One 1:1 discriminator+generator update sharing a single generator forward.

    The generator runs once, recorded on the generator tape. Its output
    enters the discriminator update as a constant, stacked under the real
    batch so the discriminator sees both in one pass (it is norm-free, so
    stacking changes nothing per row; twice the stacked mean equals the
    sum of the real and fake means). Afterwards the tape is reopened so
    the generator loss is scored by the refreshed discriminator. Losses
    and parameter updates match running ``d_step`` then ``g_step`` on the
    same draw up to summation order; only the normalization running
    buffers advance once here instead of twice.
    """
    cfg = gen.config
    _check_labels(identity_labels, cfg.n_identities, "identity labels")
    _check_labels(viewpoint_labels, cfg.n_viewpoints, "viewpoint labels")
    _check_labels(target_viewpoints, cfg.n_viewpoints, "target viewpoints")

    opt_g.zero_grad()
    tape_g = ad.Tape()
    with tape_g:
        fake = gen.generate(images, z, target_codes, train=True)

    opt_d.zero_grad()
    n = images.shape[0]
    both = ad.Tensor(np.concatenate([images.data, fake.data]))
    id_labels_all = np.concatenate([np.asarray(identity_labels), np.full(n, cfg.fake_class, dtype=np.int64)])
    with ad.Tape() as tape_d:
        id_all, attr_all = disc(both)
        id_term = ad.scale(ad.cross_entropy_logits(id_all, id_labels_all), 2.0)
        attr_real = ad.take_rows(attr_all, 0, n)
        d_loss = ad.add(id_term, ad.scale(ad.cross_entropy_logits(attr_real, viewpoint_labels), attr_weight))
        ad.backward(tape_d, d_loss)
    opt_d.step()

    frozen = _frozen(disc)
    try:
        with tape_g:
            id_fake, attr_fake = disc(fake)
            g_loss = generator_loss(id_fake, attr_fake, identity_labels, target_viewpoints, attr_weight)
            ad.backward(tape_g, g_loss)
    finally:
        for p in frozen:
            p.requires_grad = True
    opt_g.step()
    return float(d_loss.data), float(g_loss.data)


# --- checkpoint container ----------------------------------------------


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays to the binary container format."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")  # keeps rank-0 shapes, unlike ascontiguousarray
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BI", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    path.write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by save_tensors, validating structure."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointCorruptionError(f"truncated checkpoint: wanted {n} bytes at offset {pos}")
        piece = view[pos : pos + n]
        pos += n
        return piece

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _TAG_DTYPES:
            raise CheckpointCorruptionError(f"unknown dtype tag {tag} for entry {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        data = np.frombuffer(take(nbytes), dtype=dtype.newbyteorder("<")).astype(dtype)
        out[name] = data.reshape(dims)
    if pos != len(view):
        raise CheckpointCorruptionError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def _pack_rng_state(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointFormatError(f"unsupported bit generator {st['bit_generator']}")
    words = []
    for big in (st["state"]["state"], st["state"]["inc"]):
        for shift in (0, 64):
            words.append((big >> shift) & 0xFFFFFFFFFFFFFFFF)
    words.append(int(st["has_uint32"]))
    words.append(int(st["uinteger"]))
    return np.array(words, dtype=np.uint64)


def _unpack_rng_state(words: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in words]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return rng


def _text_to_u8(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def checkpoint_payload(
    config: TrainConfig,
    gen: Generator,
    disc: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    step: int,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    payload: dict[str, np.ndarray] = {"step": np.array([step], dtype=np.int64)}
    payload["config"] = _text_to_u8(config.to_text())
    payload["rng"] = _pack_rng_state(rng)
    for name, p in gen.parameters().items():
        payload[f"g.{name}"] = p.data
    for name, buf in gen.buffers().items():
        payload[f"gbuf.{name}"] = buf
    for name, p in disc.parameters().items():
        payload[f"d.{name}"] = p.data
    for prefix, opt in (("optg", opt_g), ("optd", opt_d)):
        payload[f"{prefix}.t"] = np.array([opt.t], dtype=np.int64)
        for name, m in opt.m.items():
            payload[f"{prefix}.m.{name}"] = m
        for name, v in opt.v.items():
            payload[f"{prefix}.v.{name}"] = v
    return payload


def save_checkpoint(path, config, gen, disc, opt_g, opt_d, step, rng) -> None:
    save_tensors(path, checkpoint_payload(config, gen, disc, opt_g, opt_d, step, rng))


@dataclass
class LoadedCheckpoint:
    config: TrainConfig
    gen: Generator
    disc: Discriminator
    opt_g: Adam
    opt_d: Adam
    step: int
    rng: np.random.Generator


def load_checkpoint(path) -> LoadedCheckpoint:
    """Rebuild networks and optimizer state from a saved container."""
    payload = load_tensors(path)
    try:
        config = TrainConfig.from_text(bytes(payload["config"].tobytes()).decode("utf-8"))
        step = int(payload["step"][0])
        rng = _unpack_rng_state(payload["rng"])
    except KeyError as e:
        raise CheckpointCorruptionError(f"checkpoint missing entry {e.args[0]!r}") from e

    build_rng = np.random.default_rng(config.seed)
    gen = Generator(config.network, build_rng)
    disc = Discriminator(config.network, build_rng)
    opt_g = Adam(gen.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)
    opt_d = Adam(disc.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)

    def restore(target: np.ndarray, key: str) -> None:
        if key not in payload:
            raise CheckpointCorruptionError(f"checkpoint missing entry {key!r}")
        src = payload[key]
        if src.shape != target.shape:
            raise CheckpointCorruptionError(f"entry {key!r} has shape {list(src.shape)}, expected {list(target.shape)}")
        target[...] = src.astype(target.dtype)

    for name, p in gen.parameters().items():
        restore(p.data, f"g.{name}")
    for name, buf in gen.buffers().items():
        restore(buf, f"gbuf.{name}")
    for name, p in disc.parameters().items():
        restore(p.data, f"d.{name}")
    for prefix, opt in (("optg", opt_g), ("optd", opt_d)):
        opt.t = int(payload[f"{prefix}.t"][0])
        for name in opt.m:
            restore(opt.m[name], f"{prefix}.m.{name}")
            restore(opt.v[name], f"{prefix}.v.{name}")
    return LoadedCheckpoint(config, gen, disc, opt_g, opt_d, step, rng)


# --- loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    config: TrainConfig
    gen: Generator
    disc: Discriminator
    opt_g: Adam
    opt_d: Adam
    step: int
    rng: np.random.Generator
    metrics_path: Path
    checkpoint_path: Path
    d_losses: list = field(default_factory=list)
    g_losses: list = field(default_factory=list)


def train(config: TrainConfig, data, out_dir, resume_from=None, progress=None) -> TrainResult:
    """Alternate one discriminator and one generator update per step.

    ``data`` must expose float images [M,3,H,W] in [-1,1] and 0-based
    integer ``identities`` and ``viewpoints`` arrays. Each step draws one
    batch plus one noise/target-code set shared by both updates. Metrics
    append to ``metrics.tsv`` (step, d_loss, g_loss per line);
    checkpoints land in ``checkpoint.bin``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.tsv"
    checkpoint_path = out_dir / "checkpoint.bin"

    m = len(data.images)
    if m == 0:
        raise ConfigError("training data is empty")
    net = config.network
    _check_labels(data.identities, net.n_identities, "dataset identity labels")
    _check_labels(data.viewpoints, net.n_viewpoints, "dataset viewpoint labels")

    if resume_from is not None:
        loaded = load_checkpoint(resume_from)
        gen, disc, opt_g, opt_d = loaded.gen, loaded.disc, loaded.opt_g, loaded.opt_d
        rng, start = loaded.rng, loaded.step
        mode = "a"
    else:
        build_rng = np.random.default_rng(config.seed)
        gen = Generator(net, build_rng)
        disc = Discriminator(net, build_rng)
        opt_g = Adam(gen.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)
        opt_d = Adam(disc.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)
        rng = np.random.default_rng(config.seed + 1)
        start = 0
        mode = "w"

    dt = net.dtype
    result = TrainResult(config, gen, disc, opt_g, opt_d, start, rng, metrics_path, checkpoint_path)
    with open(metrics_path, mode, encoding="utf-8", newline="\n") as log:
        for step in range(start + 1, config.steps + 1):
            idx = rng.integers(0, m, size=config.batch_size)
            images = ad.Tensor(np.ascontiguousarray(data.images[idx]).astype(dt))
            y_i = np.asarray(data.identities)[idx]
            y_a = np.asarray(data.viewpoints)[idx]
            z = ad.Tensor(rng.standard_normal((config.batch_size, net.noise_features)).astype(dt))
            targets = rng.integers(0, net.n_viewpoints, size=config.batch_size)
            codes = ad.Tensor(one_hot_codes(targets, net.n_viewpoints, dtype=dt))

            d_loss, g_loss = train_step(
                gen, disc, opt_g, opt_d, images, y_i, y_a, targets, z, codes, config.attr_weight
            )

            log.write("%d\t%.17g\t%.17g\n" % (step, d_loss, g_loss))
            log.flush()
            result.d_losses.append(d_loss)
            result.g_losses.append(g_loss)
            result.step = step
            if progress is not None:
                progress(step, d_loss, g_loss)
            if step % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, config, gen, disc, opt_g, opt_d, step, rng)
    save_checkpoint(checkpoint_path, config, gen, disc, opt_g, opt_d, result.step, rng)
    return result


def viewpoint_accuracy(disc: Discriminator, images: np.ndarray, viewpoints, batch_size: int = 64) -> float:
    """Fraction of images whose viewpoint-head argmax matches the label."""
    viewpoints = np.asarray(viewpoints)
    hits = 0
    for lo in range(0, len(images), batch_size):
        chunk = ad.Tensor(np.ascontiguousarray(images[lo : lo + batch_size]).astype(disc.config.dtype))
        _, attr_logits = disc(chunk)
        hits += int((attr_logits.data.argmax(axis=1) == viewpoints[lo : lo + batch_size]).sum())
    return hits / len(images)
