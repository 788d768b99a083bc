"""Recognition-oriented evaluation: KNN identity preservation and few-shot
learning with generated-image augmentation.

Both protocols score a generator indirectly, through classifiers:

* ``knn_idpres`` fits a KNN on real-image features (a small conv net
  trained on the auxiliary split provides the features), generates one
  fake per viewpoint for every held-out test image, and reports how
  often the fakes retrieve their source identity.
* ``fewshot_eval`` trains an image classifier on s real images per
  class, then retrains it from the same initialization on that set
  augmented with generated images (each fake keeps its source image's
  identity label and carries a real/fake bit that is appended to the
  pooled feature), and reports both accuracies on the real test images.

All randomness flows from explicit seeds; identical seeds give
identical reports. Generators enter as plain callables
``fn(images, z, codes) -> images`` over [-1,1] image arrays so that
degenerate references (identity, constant) and trained models share one
interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import N_VIEWPOINTS
from .errors import ConfigError, DataError
from .layers import WEIGHT_STD, Conv, Dense, collect_parameters
from .networks import Generator, one_hot_codes
from .training import Adam

_T_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def _he_rescale(layer) -> None:
    """Switch a layer's weights to fan-in scaled init.

    The shared layer primitives default to the small fixed std the
    adversarial networks want; a plain classifier stack this deep needs
    variance-preserving init to train within a small step budget.
    """
    w = layer.weight.data
    fan_in = int(np.prod(w.shape[1:])) if w.ndim == 4 else int(w.shape[0])
    w *= np.sqrt(2.0 / fan_in) / WEIGHT_STD


@dataclass(frozen=True)
class ClassifierConfig:
    """Budget and shape of the small conv classifiers used by the protocols."""

    base_channels: int = 16
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


class ConvClassifier:
    """Four strided conv blocks, global average pool, linear head.

    The pooled vector is the feature representation. With ``with_bit``
    a per-sample scalar in {0,1} is appended to the pooled vector before
    the head, marking real (1) versus generated (0) inputs.
    """

    def __init__(self, n_classes: int, config: ClassifierConfig, rng: np.random.Generator, with_bit: bool = False):
        if n_classes < 2:
            raise ConfigError(f"classifier needs >= 2 classes, got {n_classes}")
        c = config.base_channels
        dt = np.float32
        self.convs = [
            Conv(3, c, 4, 2, 1, rng, dtype=dt),
            Conv(c, 2 * c, 4, 2, 1, rng, dtype=dt),
            Conv(2 * c, 4 * c, 4, 2, 1, rng, dtype=dt),
            Conv(4 * c, 8 * c, 4, 2, 1, rng, dtype=dt),
        ]
        self.with_bit = with_bit
        self.feature_dim = 8 * c
        self.n_classes = n_classes
        self.head = Dense(self.feature_dim + (1 if with_bit else 0), n_classes, rng, dtype=dt)
        for layer in [*self.convs, self.head]:
            _he_rescale(layer)

    def parameters(self) -> dict:
        children = {f"conv{i + 1}": conv for i, conv in enumerate(self.convs)}
        children["head"] = self.head
        return collect_parameters(children)

    def forward(self, images: ad.Tensor, bits=None):
        """Return (pooled features [N,F], logits [N,n_classes])."""
        h = images
        for conv in self.convs:
            h = ad.leaky_relu(conv(h))
        pooled = ad.spatial_mean(h)
        if self.with_bit:
            if bits is None:
                raise ConfigError("classifier was built with a real/fake bit input; bits are required")
            n, c = pooled.data.shape
            col = np.asarray(bits, dtype=pooled.data.dtype).reshape(n, 1, 1, 1)
            joined = ad.concat_channels(ad.reshape(pooled, (n, c, 1, 1)), ad.Tensor(col))
            flat = ad.reshape(joined, (n, c + 1))
        else:
            flat = pooled
        return pooled, self.head(flat)

    def _batched(self, images: np.ndarray, bits, batch_size: int):
        feats, logits = [], []
        for start in range(0, len(images), batch_size):
            stop = min(start + batch_size, len(images))
            x = ad.Tensor(np.ascontiguousarray(images[start:stop], dtype=np.float32))
            b = None if bits is None else bits[start:stop]
            pooled, out = self.forward(x, b)
            feats.append(pooled.data)
            logits.append(out.data)
        return np.concatenate(feats), np.concatenate(logits)

    def features(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        bits = np.ones(len(images)) if self.with_bit else None
        return self._batched(images, bits, batch_size)[0]

    def logits(self, images: np.ndarray, bits=None, batch_size: int = 64) -> np.ndarray:
        if self.with_bit and bits is None:
            bits = np.ones(len(images))
        return self._batched(images, bits, batch_size)[1]


def _train_classifier(
    images: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    config: ClassifierConfig,
    bits=None,
) -> ConvClassifier:
    if len(images) == 0:
        raise DataError("cannot train a classifier on an empty image set")
    rng = np.random.default_rng(config.seed)
    clf = ConvClassifier(n_classes, config, rng, with_bit=bits is not None)
    opt = Adam(clf.parameters(), lr=config.lr, beta1=0.9)
    labels = np.asarray(labels, dtype=np.int64)
    for _ in range(config.steps):
        idx = rng.integers(0, len(images), size=config.batch_size)
        x = ad.Tensor(np.ascontiguousarray(images[idx], dtype=np.float32))
        b = None if bits is None else bits[idx]
        opt.zero_grad()
        with ad.Tape() as tape:
            _, logits = clf.forward(x, b)
            loss = ad.cross_entropy_logits(logits, labels[idx])
            ad.backward(tape, loss)
        opt.step()
    return clf


def train_feature_extractor(auxiliary, config: ClassifierConfig) -> ConvClassifier:
    """Fit the feature-providing classifier on the auxiliary split."""
    if len(auxiliary.images) == 0:
        raise DataError("auxiliary set is empty")
    classes, dense_labels = np.unique(np.asarray(auxiliary.identities), return_inverse=True)
    return _train_classifier(auxiliary.images, dense_labels, len(classes), config)


def classification_accuracy(clf: ConvClassifier, images: np.ndarray, labels, bits=None) -> float:
    logits = clf.logits(images, bits)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# --- KNN ----------------------------------------------------------------


class KNNClassifier:
    """Euclidean KNN that ranks every known class for top-m scoring.

    Classes appearing among the k nearest neighbors are ordered by vote
    count, then by their closest neighbor's distance; the remaining
    classes follow, ordered by their nearest training sample. Final ties
    break on the class label, so rankings are fully deterministic.
    """

    def __init__(self, features: np.ndarray, labels, k: int):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature rows vs {len(self.labels)} labels")
        if not 1 <= k <= len(self.features):
            raise ConfigError(f"k must be in [1, {len(self.features)}], got {k}")
        self.k = k
        self.classes = np.unique(self.labels)
        self._class_masks = [self.labels == c for c in self.classes]

    def rank_classes(self, queries: np.ndarray) -> np.ndarray:
        """[Q, n_classes] class labels, best-first, per query."""
        q = np.asarray(queries, dtype=np.float64)
        d2 = (
            np.sum(q**2, axis=1)[:, None]
            - 2.0 * q @ self.features.T
            + np.sum(self.features**2, axis=1)[None, :]
        )
        np.maximum(d2, 0.0, out=d2)
        order = np.argsort(d2, axis=1, kind="stable")
        rankings = np.empty((len(q), len(self.classes)), dtype=np.int64)
        for row in range(len(q)):
            neighbors = order[row, : self.k]
            neighbor_labels = self.labels[neighbors]
            neighbor_d = d2[row, neighbors]
            keys = []
            for ci, c in enumerate(self.classes):
                in_neigh = neighbor_labels == c
                votes = int(in_neigh.sum())
                if votes:
                    dist = float(neighbor_d[in_neigh].min())
                else:
                    dist = float(d2[row, self._class_masks[ci]].min())
                keys.append((-votes, dist, int(c)))
            rankings[row] = [c for _, _, c in sorted(keys)]
        return rankings

    def predict(self, queries: np.ndarray) -> np.ndarray:
        return self.rank_classes(queries)[:, 0]


def topk_hits(rankings: np.ndarray, labels, m: int) -> float:
    labels = np.asarray(labels)
    width = min(m, rankings.shape[1])
    return float(np.mean((rankings[:, :width] == labels[:, None]).any(axis=1)))


# --- reference generators ----------------------------------------------


def identity_generator(images: np.ndarray, z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Returns inputs unchanged; upper reference for identity retention."""
    return np.array(images, dtype=np.float32, copy=True)


def constant_generator(images: np.ndarray, z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Returns the same blank image for every input; chance-level reference."""
    return np.zeros_like(np.asarray(images, dtype=np.float32))


def model_generator(gen: Generator, batch_size: int = 32):
    """Wrap a trained network as the protocols' callable interface."""

    def generate(images: np.ndarray, z: np.ndarray, codes: np.ndarray) -> np.ndarray:
        dt = gen.config.dtype
        outs = []
        for start in range(0, len(images), batch_size):
            stop = min(start + batch_size, len(images))
            out = gen.generate(
                ad.Tensor(np.ascontiguousarray(images[start:stop], dtype=dt)),
                ad.Tensor(np.ascontiguousarray(z[start:stop], dtype=dt)),
                ad.Tensor(np.ascontiguousarray(codes[start:stop], dtype=dt)),
                train=False,
            )
            outs.append(np.asarray(out.data, dtype=np.float32))
        return np.concatenate(outs)

    return generate


# --- reports ------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    protocol: str
    n_classes: int
    top1: float
    top5: float
    per_class_counts: dict = field(compare=False)
    config_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0 or not 0.0 <= self.top5 <= 1.0:
            raise ConfigError(f"accuracies must be in [0,1]: top1={self.top1}, top5={self.top5}")
        if self.top5 < self.top1 - 1e-12:
            raise ConfigError(f"top5 ({self.top5}) cannot be below top1 ({self.top1})")


def _select_classes(rng: np.random.Generator, identities: np.ndarray, n_classes: int) -> np.ndarray:
    classes = np.unique(identities)
    if n_classes < 1:
        raise ConfigError(f"n_classes must be >= 1, got {n_classes}")
    if n_classes > len(classes):
        raise ConfigError(f"requested {n_classes} classes but only {len(classes)} are available")
    return np.sort(rng.choice(classes, size=n_classes, replace=False))


def _stratified_split(rng, identities, chosen, train_fraction=None, shots=None):
    """Per-class index split: either a fraction (rounded) or a fixed count."""
    train_idx, test_idx = [], []
    for c in chosen:
        idx = rng.permutation(np.flatnonzero(identities == c))
        m = len(idx)
        if shots is not None:
            if m <= shots:
                raise ConfigError(f"class {int(c)} has {m} image(s); need more than {shots} for {shots}-shot")
            n_train = shots
        else:
            if m < 2:
                raise ConfigError(f"class {int(c)} has {m} image(s); need >= 2 to split")
            n_train = min(m - 1, max(1, int(round(train_fraction * m))))
        train_idx.extend(idx[:n_train])
        test_idx.extend(idx[n_train:])
    return np.sort(np.array(train_idx)), np.sort(np.array(test_idx))


def knn_idpres(
    standard,
    generate,
    extractor: ConvClassifier,
    n_classes: int,
    k: int = 5,
    n_viewpoints: int = N_VIEWPOINTS,
    noise_features: int = 64,
    seed: int = 0,
    config_hash: str = "",
) -> EvalReport:
    """Identity preservation: do generated views retrieve their source class?"""
    rng = np.random.default_rng(seed)
    identities = np.asarray(standard.identities)
    chosen = _select_classes(rng, identities, n_classes)
    train_idx, test_idx = _stratified_split(rng, identities, chosen, train_fraction=0.8)

    knn = KNNClassifier(extractor.features(standard.images[train_idx]), identities[train_idx], k)
    test_images = standard.images[test_idx]
    test_labels = identities[test_idx]

    fake_images, fake_labels = [], []
    for viewpoint in range(n_viewpoints):
        codes = one_hot_codes(np.full(len(test_idx), viewpoint), n_viewpoints)
        z = rng.standard_normal((len(test_idx), noise_features))
        fake_images.append(generate(test_images, z, codes))
        fake_labels.append(test_labels)
    fakes = np.concatenate(fake_images)
    labels = np.concatenate(fake_labels)

    rankings = knn.rank_classes(extractor.features(fakes))
    counts = {int(c): int(np.sum(labels == c)) for c in chosen}
    return EvalReport(
        protocol="idpres",
        n_classes=n_classes,
        top1=topk_hits(rankings, labels, 1),
        top5=topk_hits(rankings, labels, 5),
        per_class_counts=counts,
        config_hash=config_hash,
        seed=seed,
    )


# --- few-shot augmentation ---------------------------------------------


@dataclass
class AugmentedSet:
    """Real rows (bit 1) followed by generated rows (bit 0)."""

    images: np.ndarray
    identities: np.ndarray
    real_bits: np.ndarray
    codes: np.ndarray  # viewpoint code per row; convex rows for fakes


def augment_fewshot(
    train_set,
    generate,
    fakes_per_image: int = 20,
    n_viewpoints: int = N_VIEWPOINTS,
    noise_features: int = 64,
    seed: int = 0,
    batch_size: int = 64,
) -> AugmentedSet:
    """Extend a labeled set with viewpoint-interpolated generated images."""
    if fakes_per_image % len(_T_GRID) != 0:
        raise ConfigError(f"fakes_per_image must be a multiple of {len(_T_GRID)}, got {fakes_per_image}")
    n_pairs = fakes_per_image // len(_T_GRID)
    images = np.asarray(train_set.images, dtype=np.float32)
    identities = np.asarray(train_set.identities, dtype=np.int64)
    real_views = np.asarray(train_set.viewpoints, dtype=np.int64)
    rng = np.random.default_rng(seed)

    src, codes = [], []
    for i in range(len(images)):
        for _ in range(n_pairs):
            a = int(rng.integers(n_viewpoints))
            b = (a + 1 + int(rng.integers(n_viewpoints - 1))) % n_viewpoints
            ca = one_hot_codes([a], n_viewpoints)[0]
            cb = one_hot_codes([b], n_viewpoints)[0]
            for t in _T_GRID:
                src.append(i)
                codes.append((1.0 - t) * ca + t * cb)
    src = np.array(src)
    codes = np.array(codes)
    z = rng.standard_normal((len(src), noise_features))

    fakes = np.concatenate(
        [
            generate(images[src[s : s + batch_size]], z[s : s + batch_size], codes[s : s + batch_size])
            for s in range(0, len(src), batch_size)
        ]
    )
    return AugmentedSet(
        images=np.concatenate([images, fakes]),
        identities=np.concatenate([identities, identities[src]]),
        real_bits=np.concatenate([np.ones(len(images), dtype=np.int64), np.zeros(len(src), dtype=np.int64)]),
        codes=np.concatenate([one_hot_codes(real_views, n_viewpoints), codes]),
    )


def fewshot_eval(
    standard,
    generate,
    n_classes: int,
    shots: int,
    config: ClassifierConfig,
    fakes_per_image: int = 20,
    n_viewpoints: int = N_VIEWPOINTS,
    noise_features: int = 64,
    seed: int = 0,
    config_hash: str = "",
):
    """(baseline, augmented) reports sharing one class selection and split."""
    rng = np.random.default_rng(seed)
    identities = np.asarray(standard.identities)
    chosen = _select_classes(rng, identities, n_classes)
    train_idx, test_idx = _stratified_split(rng, identities, chosen, shots=shots)
    if len(test_idx) == 0:
        raise ConfigError("few-shot split left no test images")

    dense = {int(c): i for i, c in enumerate(chosen)}
    to_dense = np.vectorize(dense.__getitem__)

    train_images = standard.images[train_idx]
    train_labels = to_dense(identities[train_idx])
    test_images = standard.images[test_idx]
    test_labels = to_dense(identities[test_idx])
    counts = {int(c): int(np.sum(identities[test_idx] == c)) for c in chosen}

    def evaluate(clf, protocol):
        logits = clf.logits(test_images, np.ones(len(test_images)))
        ranked = np.argsort(-logits, axis=1, kind="stable")
        return EvalReport(
            protocol=protocol,
            n_classes=n_classes,
            top1=topk_hits(ranked, test_labels, 1),
            top5=topk_hits(ranked, test_labels, 5),
            per_class_counts=counts,
            config_hash=config_hash,
            seed=seed,
        )

    baseline_clf = _train_classifier(
        train_images, train_labels, n_classes, config, bits=np.ones(len(train_images), dtype=np.int64)
    )
    baseline = evaluate(baseline_clf, "fewshot-baseline")

    few = _ArraySet(train_images, identities[train_idx], np.asarray(standard.viewpoints)[train_idx])
    augmented_set = augment_fewshot(
        few,
        generate,
        fakes_per_image=fakes_per_image,
        n_viewpoints=n_viewpoints,
        noise_features=noise_features,
        seed=seed + 1,
    )
    augmented_clf = _train_classifier(
        augmented_set.images,
        to_dense(augmented_set.identities),
        n_classes,
        config,
        bits=augmented_set.real_bits,
    )
    augmented = evaluate(augmented_clf, "fewshot-augmented")
    return baseline, augmented


@dataclass
class _ArraySet:
    images: np.ndarray
    identities: np.ndarray
    viewpoints: np.ndarray
