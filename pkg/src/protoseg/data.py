"""Synthetic dataset generation, on-disk ingestion, split management and the
augmentation pipeline.

On-disk layout: ``images/<id>.png`` (8-bit grayscale), ``masks/<id>.png``
(label values as pixel values) and ``splits.csv`` with ``id,role`` rows.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from skimage.draw import polygon as draw_polygon
from skimage.transform import resize
from scipy import ndimage

from protoseg.geometry import SegMask

ROLES = ("labeled", "unlabeled", "val", "test")


@dataclass
class Sample:
    image: np.ndarray          # (H, W) float32, normalized
    mask: SegMask | None
    id: str


@dataclass
class SplitManifest:
    labeled: list[str]
    unlabeled: list[str]
    val: list[str]
    test: list[str]
    labeled_fraction: float
    seed: int

    def role_pairs(self):
        for role in ROLES:
            for sid in getattr(self, role):
                yield sid, role


@dataclass
class AugmentRecord:
    """Geometric operations applied to a sample, in application order."""
    hflip: bool = False
    vflip: bool = False
    crop: tuple[int, int, int, int] | None = None  # (y0, x0, ch, cw)
    noise_sigma: float | None = None


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance normalization of one image."""
    image = np.asarray(image, dtype=np.float32)
    std = image.std()
    if std < 1e-8:
        raise ValueError("cannot normalize a constant image")
    return (image - image.mean()) / std


def _ellipse_mask(rng, size):
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
    ay = rng.uniform(0.12 * size, 0.3 * size)
    ax = rng.uniform(0.12 * size, 0.3 * size)
    theta = rng.uniform(0, np.pi)
    y, x = yy - cy, xx - cx
    yr = y * np.cos(theta) + x * np.sin(theta)
    xr = -y * np.sin(theta) + x * np.cos(theta)
    return (yr / ay) ** 2 + (xr / ax) ** 2 <= 1.0


def _star_mask(rng, size):
    # spiky polygon: alternating outer/inner radii with jitter
    n_spikes = int(rng.integers(5, 10))
    cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
    r_out = rng.uniform(0.18 * size, 0.32 * size)
    r_in = r_out * rng.uniform(0.35, 0.6)
    angles = np.linspace(0, 2 * np.pi, 2 * n_spikes, endpoint=False)
    angles = angles + rng.uniform(-0.1, 0.1, size=angles.shape)
    radii = np.where(np.arange(2 * n_spikes) % 2 == 0, r_out, r_in)
    radii = radii * rng.uniform(0.85, 1.15, size=radii.shape)
    ys = cy + radii * np.sin(angles)
    xs = cx + radii * np.cos(angles)
    mask = np.zeros((size, size), dtype=bool)
    rr, cc = draw_polygon(ys, xs, shape=mask.shape)
    mask[rr, cc] = True
    return mask


def _synth_one(rng, size, classes, contrast=0.3, noise=0.05):
    """One labels/image pair.  Returns (image uint8, labels, kind)."""
    for _ in range(50):
        kind = "ellipse" if rng.random() < 0.5 else "star"
        shape_fn = _ellipse_mask if kind == "ellipse" else _star_mask
        fg = shape_fn(rng, size)
        labels = np.zeros((size, size), dtype=np.uint8)
        labels[fg] = 1
        if classes == "three-class":
            inner = shape_fn(rng, size) & ndimage.binary_erosion(fg, iterations=3)
            labels[inner] = 2
        frac = (labels > 0).mean()
        if 0.02 <= frac <= 0.60 and (classes != "three-class" or (labels == 2).any()):
            break
    else:
        raise RuntimeError("failed to draw a shape with admissible foreground fraction")

    # textured background plus per-class intensity offsets and noise
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=4.0)
    image = 0.35 + 0.1 * texture
    image = image + contrast * (labels >= 1) + 0.2 * (labels == 2)
    image = image + rng.normal(0.0, noise, (size, size))
    image = np.clip(image, 0.0, 1.0)
    return (image * 255).round().astype(np.uint8), labels, kind


def generate_synthetic(out_dir: str, n: int, classes: str = "binary",
                       seed: int = 0, size: int = 64, contrast: float = 0.3,
                       noise: float = 0.05) -> list[str]:
    """Write n synthetic image/mask PNG pairs; returns the sample ids.

    Shapes are smooth ellipses (regular boundaries) and spiky star polygons
    (irregular boundaries); three-class mode nests a second structure inside
    the first.  contrast is the foreground intensity offset and noise the
    additive Gaussian sigma, together setting task difficulty.  Deterministic
    under seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if classes not in ("binary", "three-class"):
        raise ValueError(f"unknown class mode {classes!r}")
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    ids = []
    for k in range(n):
        image, labels, kind = _synth_one(rng, size, classes,
                                         contrast=contrast, noise=noise)
        sid = f"{kind}_{k:05d}"
        Image.fromarray(image, mode="L").save(os.path.join(img_dir, sid + ".png"))
        Image.fromarray(labels, mode="L").save(os.path.join(mask_dir, sid + ".png"))
        ids.append(sid)
    return ids


def num_classes_of(classes: str) -> int:
    return 3 if classes == "three-class" else 2


def load_dataset(data_dir: str, num_classes: int | None = None) -> list[Sample]:
    """Read every image/mask pair under data_dir, normalized."""
    img_dir = os.path.join(data_dir, "images")
    mask_dir = os.path.join(data_dir, "masks")
    if not os.path.isdir(img_dir):
        raise FileNotFoundError(f"no images directory under {data_dir}")
    samples = []
    raw = {}
    for name in sorted(os.listdir(img_dir)):
        if not name.endswith(".png"):
            continue
        sid = name[:-4]
        raw[sid] = (
            np.asarray(Image.open(os.path.join(img_dir, name)), dtype=np.float32) / 255.0,
            np.asarray(Image.open(os.path.join(mask_dir, name)), dtype=np.int64),
        )
    if num_classes is None:
        num_classes = max(int(m.max()) for _, m in raw.values()) + 1
        num_classes = max(num_classes, 2)
    for sid, (image, labels) in raw.items():
        mask = SegMask(labels=labels, num_classes=num_classes)
        samples.append(Sample(image=normalize_image(image), mask=mask, id=sid))
    return samples


def augment(sample: Sample, seed, allow_crop: bool = True) -> tuple[Sample, AugmentRecord]:
    """Stochastic augmentation: flips, area crop with resize-back, additive
    Gaussian noise (image only).  Each op fires with probability 0.5 and the
    whole pipeline is deterministic under seed.  allow_crop=False restricts
    the pipeline to the exactly invertible ops (flips + noise)."""
    rng = np.random.default_rng(seed)
    image = sample.image.copy()
    labels = None if sample.mask is None else sample.mask.labels.copy()
    rec = AugmentRecord()

    if rng.random() < 0.5:
        rec.hflip = True
        image = image[:, ::-1].copy()
        if labels is not None:
            labels = labels[:, ::-1].copy()
    if rng.random() < 0.5:
        rec.vflip = True
        image = image[::-1, :].copy()
        if labels is not None:
            labels = labels[::-1, :].copy()
    if allow_crop and rng.random() < 0.5:
        h, w = image.shape
        scale = np.sqrt(rng.uniform(0.75, 1.0))
        ch, cw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        rec.crop = (y0, x0, ch, cw)
        image = resize(image[y0:y0 + ch, x0:x0 + cw], (h, w), order=1,
                       preserve_range=True, anti_aliasing=False).astype(np.float32)
        if labels is not None:
            labels = resize(labels[y0:y0 + ch, x0:x0 + cw].astype(float), (h, w),
                            order=0, preserve_range=True,
                            anti_aliasing=False).astype(np.int64)
    if rng.random() < 0.5:
        rec.noise_sigma = float(rng.uniform(0.01, 0.1))
        image = image + rng.normal(0.0, rec.noise_sigma, image.shape).astype(np.float32)

    mask = None
    if labels is not None:
        mask = SegMask(labels=labels, num_classes=sample.mask.num_classes,
                       provenance=sample.mask.provenance)
    return Sample(image=image.astype(np.float32), mask=mask, id=sample.id), rec


def invert_probabilities(probs: np.ndarray, rec: AugmentRecord) -> tuple[np.ndarray, np.ndarray]:
    """Undo the geometric part of an augmentation on a (C, H, W) probability
    map.  Returns (probs, valid) where valid marks pixels the augmented view
    actually covered (False outside an inverted crop; those pixels are filled
    with a uniform distribution).  Noise needs no inversion."""
    probs = np.asarray(probs)
    c, h, w = probs.shape
    valid = np.ones((h, w), dtype=bool)
    if rec.crop is not None:
        y0, x0, ch, cw = rec.crop
        back = resize(np.moveaxis(probs, 0, -1), (ch, cw, c), order=1,
                      preserve_range=True, anti_aliasing=False)
        back = np.clip(back, 0.0, None)
        back = back / back.sum(axis=-1, keepdims=True)
        full = np.full((h, w, c), 1.0 / c, dtype=probs.dtype)
        full[y0:y0 + ch, x0:x0 + cw] = back
        probs = np.moveaxis(full, -1, 0)
        valid[:] = False
        valid[y0:y0 + ch, x0:x0 + cw] = True
    if rec.vflip:
        probs = probs[:, ::-1, :].copy()
        valid = valid[::-1, :].copy()
    if rec.hflip:
        probs = probs[:, :, ::-1].copy()
        valid = valid[:, ::-1].copy()
    return probs, valid


def _stratum_of(sid: str) -> str:
    return sid.split("_")[0]


def make_splits(ids: list[str], labeled_fraction: float, seed: int = 0) -> SplitManifest:
    """70/10/20 train/val/test split with the train part divided into
    labeled/unlabeled ids.  Roughly stratified by the id prefix (shape kind)
    via proportional interleaving; deterministic under seed."""
    if not ids:
        raise ValueError("dataset is empty")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError("labeled_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    strata: dict[str, list[str]] = {}
    for sid in sorted(ids):
        strata.setdefault(_stratum_of(sid), []).append(sid)
    for group in strata.values():
        rng.shuffle(group)
    # proportional round-robin merge keeps strata spread through the order
    order = []
    pools = sorted(strata.items())
    positions = {k: 0 for k, _ in pools}
    while len(order) < len(ids):
        for key, group in pools:
            if positions[key] < len(group):
                order.append(group[positions[key]])
                positions[key] += 1

    n = len(order)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    train, val, test = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]
    n_labeled = int(round(labeled_fraction * len(train)))
    if n_labeled == 0:
        raise ValueError("labeled_fraction too small: labeled set would be empty")
    train = list(train)
    rng.shuffle(train)
    return SplitManifest(
        labeled=sorted(train[:n_labeled]),
        unlabeled=sorted(train[n_labeled:]),
        val=sorted(val),
        test=sorted(test),
        labeled_fraction=labeled_fraction,
        seed=seed,
    )


def write_splits(manifest: SplitManifest, data_dir: str) -> str:
    path = os.path.join(data_dir, "splits.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "role"])
        for sid, role in manifest.role_pairs():
            writer.writerow([sid, role])
    return path


def read_splits(data_dir: str, labeled_fraction: float = 0.0, seed: int = 0) -> SplitManifest:
    path = os.path.join(data_dir, "splits.csv")
    roles: dict[str, list[str]] = {role: [] for role in ROLES}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["role"] not in roles:
                raise ValueError(f"unknown role {row['role']!r} in {path}")
            roles[row["role"]].append(row["id"])
    return SplitManifest(labeled=roles["labeled"], unlabeled=roles["unlabeled"],
                         val=roles["val"], test=roles["test"],
                         labeled_fraction=labeled_fraction, seed=seed)
