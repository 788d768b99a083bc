"""Synthetic fine-grained vehicle sprites plus dataset build/load plumbing.

Each identity index deterministically maps to a parameter tuple (body
length, canopy silhouette, wheel radius, stripe position, hue) whose
values step only slightly between adjacent indices, so classes are
fine-grained by construction while identity ground truth stays exact.
Images render analytically: every output sample point is mapped through
the viewpoint's inverse affine into canonical sprite coordinates and
colored by shape membership, at 2x supersampling. Right-facing
viewpoints are literal horizontal flips of their left-facing partners,
applied after all jitter, so the mirror relation is exact.

On disk a dataset is a directory of 8-bit RGB PNGs plus a
``manifest.csv`` (``path,identity,viewpoint,split``, UTF-8, LF, sorted
by path). The same schema can describe externally produced imagery; the
loader only cares about the manifest.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, LabelError

VIEWPOINTS = ("frontal", "frontal_left", "frontal_right", "left_side", "right_side")
N_VIEWPOINTS = len(VIEWPOINTS)

# viewpoint label (1-based) -> (x scale, x shear, y scale, mirrored)
_VIEW_AFFINES = {
    1: (0.40, 0.00, 0.96, False),
    2: (0.72, 0.16, 0.97, False),
    3: (0.72, 0.16, 0.97, True),
    4: (1.00, 0.00, 1.00, False),
    5: (1.00, 0.00, 1.00, True),
}

_CANOPY_VARIANTS = 4
_BODY_CENTER_Y = 0.17
_BODY_HALF_HEIGHT = 0.17
_WHEEL_Y = 0.34


def _tri(x: float) -> float:
    """Triangle wave [0,1] -> [0,1]: small input steps give small output steps."""
    return 1.0 - abs(1.0 - 2.0 * (x % 1.0))


@dataclass(frozen=True)
class IdentitySpec:
    """Sprite parameters for one identity."""

    index: int
    body_half_length: float
    canopy: int
    wheel_radius: float
    stripe_offset: float
    hue: float

    @classmethod
    def from_index(cls, index: int) -> "IdentitySpec":
        if index < 0:
            raise DataError(f"identity index must be >= 0, got {index}")
        i = int(index)
        return cls(
            index=i,
            body_half_length=0.62 + 0.23 * _tri(i * 0.0437),
            canopy=i % _CANOPY_VARIANTS,
            wheel_radius=0.085 + 0.040 * _tri(i * 0.0291),
            stripe_offset=-0.065 + 0.130 * _tri(i * 0.0533),
            hue=(0.083 + i * 0.0618) % 1.0,
        )


def _rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _paint(spec: IdentitySpec, cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
    """Color sample points at canonical coordinates (left-facing sprite)."""
    length = spec.body_half_length
    wr = spec.wheel_radius

    body = (cx / length) ** 4 + ((cy - _BODY_CENTER_Y) / _BODY_HALF_HEIGHT) ** 4 <= 1.0
    stripe = body & (np.abs(cy - (_BODY_CENTER_Y + spec.stripe_offset)) <= 0.028)

    ccx = cx - 0.08  # canopy sits toward the rear (nose points to -x)
    band = (cy >= -0.16) & (cy <= 0.0)
    rel = np.clip((cy + 0.16) / 0.16, 0.0, 1.0)
    half = 0.5 * length
    if spec.canopy == 0:
        canopy = (cy <= 0.0) & ((ccx / half) ** 2 + (cy / 0.17) ** 2 <= 1.0)
    elif spec.canopy == 1:
        canopy = band & (np.abs(ccx) <= half * (0.50 + 0.50 * rel))
    elif spec.canopy == 2:
        canopy = band & (np.abs(ccx - 0.10 * (1.0 - rel)) <= half * (0.45 + 0.55 * rel))
    else:
        canopy = band & (np.abs(ccx) <= half * rel)

    wx = length - wr - 0.10
    front = (cx + wx) ** 2 + (cy - _WHEEL_Y) ** 2
    rear = (cx - wx) ** 2 + (cy - _WHEEL_Y) ** 2
    wheels = (front <= wr**2) | (rear <= wr**2)
    hubs = (front <= (0.45 * wr) ** 2) | (rear <= (0.45 * wr) ** 2)

    light = (cx + (length - 0.05)) ** 2 + (cy - 0.08) ** 2 <= 0.04**2

    img = np.empty(cx.shape + (3,))
    img[...] = _rgb(spec.hue, 0.06, 0.93)
    img[body] = _rgb(spec.hue, 0.65, 0.75)
    img[stripe] = _rgb(spec.hue + 0.5, 0.55, 0.90)
    img[canopy] = _rgb(0.58, 0.35, 0.45)
    img[wheels] = _rgb(0.0, 0.0, 0.12)
    img[hubs] = _rgb(0.0, 0.0, 0.55)
    img[light] = _rgb(0.14, 0.70, 0.95)
    return img


def render_sample(spec: IdentitySpec, viewpoint: int, jitter_seed, image_size: int = 64) -> np.ndarray:
    """One [3,S,S] image in [-1,1]; deterministic in (spec, viewpoint, seed)."""
    if viewpoint not in _VIEW_AFFINES:
        raise LabelError(f"viewpoint must be in [1, {N_VIEWPOINTS}], got {viewpoint}")
    sx, shear, sy, mirrored = _VIEW_AFFINES[viewpoint]
    rng = np.random.default_rng(jitter_seed)
    dx, dy = rng.uniform(-0.05, 0.05, size=2)
    brightness = rng.uniform(0.90, 1.10)

    ss = 2 * image_size
    centers = (np.arange(ss) + 0.5) / ss * 2.0 - 1.0
    u = centers[None, :] - dx
    v = centers[:, None] - dy
    cx = (u + shear * v) / sx
    cy = (v / sy) + 0.0 * u

    img = _paint(spec, np.broadcast_to(cx, (ss, ss)), np.broadcast_to(cy, (ss, ss)))
    img = np.clip(img * brightness, 0.0, 1.0)
    img = img.reshape(image_size, 2, image_size, 2, 3).mean(axis=(1, 3))
    if mirrored:
        img = img[:, ::-1]
    return np.ascontiguousarray((img * 2.0 - 1.0).transpose(2, 0, 1))


# --- building -----------------------------------------------------------


@dataclass
class DatasetManifest:
    """What got written: manifest-relative paths plus aligned labels."""

    root: Path
    paths: list
    identities: np.ndarray
    viewpoints: np.ndarray  # 1-based, matching the CSV
    splits: list

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.csv"

    def identity_count(self, split: str) -> int:
        chosen = {int(i) for i, s in zip(self.identities, self.splits) if s == split}
        return len(chosen)


def auxiliary_identity_count(n_identities: int) -> int:
    """Identity-disjoint 80/20 split size; both sides stay nonempty when possible."""
    n_aux = int(round(0.8 * n_identities))
    n_aux = max(1, min(n_identities - 1, n_aux)) if n_identities >= 2 else n_identities
    return n_aux


def build_dataset(
    n_identities: int,
    samples_per_identity_viewpoint: int,
    out_dir,
    seed: int = 0,
    image_size: int = 64,
) -> DatasetManifest:
    """Render the full grid of identities x viewpoints x repeats to PNGs."""
    if n_identities < 1:
        raise DataError(f"n_identities must be >= 1, got {n_identities}")
    if samples_per_identity_viewpoint < 1:
        raise DataError(f"samples_per_identity_viewpoint must be >= 1, got {samples_per_identity_viewpoint}")
    root = Path(out_dir)
    image_dir = root / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {image_dir}: {e}") from e

    n_aux = auxiliary_identity_count(n_identities)
    rows = []
    for i in range(n_identities):
        spec = IdentitySpec.from_index(i)
        split = "auxiliary" if i < n_aux else "standard"
        for viewpoint in range(1, N_VIEWPOINTS + 1):
            for s in range(samples_per_identity_viewpoint):
                rel = f"images/id{i:04d}_vp{viewpoint}_s{s:03d}.png"
                image = render_sample(spec, viewpoint, jitter_seed=(seed, i, viewpoint, s), image_size=image_size)
                pixels = np.round((image.transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)
                try:
                    Image.fromarray(pixels, mode="RGB").save(root / rel)
                except OSError as e:
                    raise DataError(f"cannot write image {root / rel}: {e}") from e
                rows.append((rel, i, viewpoint, split))

    rows.sort(key=lambda r: r[0])
    try:
        with open(root / "manifest.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "identity", "viewpoint", "split"])
            writer.writerows(rows)
    except OSError as e:
        raise DataError(f"cannot write manifest {root / 'manifest.csv'}: {e}") from e

    return DatasetManifest(
        root=root,
        paths=[r[0] for r in rows],
        identities=np.array([r[1] for r in rows], dtype=np.int64),
        viewpoints=np.array([r[2] for r in rows], dtype=np.int64),
        splits=[r[3] for r in rows],
    )


# --- loading ------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    """One image with its identity label and 1-based viewpoint label."""

    image: np.ndarray
    identity: int
    viewpoint: int


@dataclass
class Dataset:
    """Decoded images plus aligned 0-based label arrays."""

    images: np.ndarray  # [M, 3, H, W] float32 in [-1, 1]
    identities: np.ndarray  # int64
    viewpoints: np.ndarray  # int64, 0-based
    splits: np.ndarray
    paths: list

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_identities(self) -> int:
        return int(self.identities.max()) + 1 if len(self) else 0

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.identities[i]), int(self.viewpoints[i]) + 1)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return Dataset(
            images=self.images[idx],
            identities=self.identities[idx],
            viewpoints=self.viewpoints[idx],
            splits=self.splits[idx],
            paths=[self.paths[j] for j in idx],
        )

    def split(self, name: str) -> "Dataset":
        if name not in ("auxiliary", "standard"):
            raise DataError(f"unknown split {name!r}; expected 'auxiliary' or 'standard'")
        return self.subset(self.splits == name)


def load_dataset(manifest_path, n_viewpoints: int = N_VIEWPOINTS) -> Dataset:
    """Decode every manifest row; errors carry the offending row number."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent

    with open(manifest_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"manifest {manifest_path} is empty") from None
        if header != ["path", "identity", "viewpoint", "split"]:
            raise DataError(f"manifest header {header!r} != ['path', 'identity', 'viewpoint', 'split']")

        images, identities, viewpoints, splits, paths = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"manifest row {lineno}: expected 4 fields, got {len(row)}")
            rel, id_text, vp_text, split = row
            try:
                identity = int(id_text)
                viewpoint = int(vp_text)
            except ValueError:
                raise DataError(f"manifest row {lineno}: non-integer label in {row!r}") from None
            if identity < 0:
                raise LabelError(f"manifest row {lineno}: identity {identity} is negative")
            if not (1 <= viewpoint <= n_viewpoints):
                raise LabelError(f"manifest row {lineno}: viewpoint {viewpoint} outside [1, {n_viewpoints}]")
            if split not in ("auxiliary", "standard"):
                raise DataError(f"manifest row {lineno}: unknown split {split!r}")
            path = root / rel
            if not path.exists():
                raise DataError(f"manifest row {lineno}: image file missing: {path}")
            with Image.open(path) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.float32)
            images.append((pixels / 127.5 - 1.0).transpose(2, 0, 1))
            identities.append(identity)
            viewpoints.append(viewpoint - 1)
            splits.append(split)
            paths.append(rel)

    if not images:
        raise DataError(f"manifest {manifest_path} lists no samples")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DataError(f"images disagree on shape: {sorted(shapes)}")
    return Dataset(
        images=np.ascontiguousarray(np.stack(images)),
        identities=np.array(identities, dtype=np.int64),
        viewpoints=np.array(viewpoints, dtype=np.int64),
        splits=np.array(splits),
        paths=paths,
    )
