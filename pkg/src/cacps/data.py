"""Synthetic multi-domain segmentation benchmark and corpus handling.

Every sample is a 2D scene of two nested ellipses on a shaded background
(class 0 background, class 1 outer ring, class 2 inner core). A domain is an
appearance transform applied after rendering: gamma contrast, additive
sinusoidal texture, a smooth multiplicative shading field with a random
orientation, a global intensity bias and Gaussian noise. Geometry and
therefore masks depend only on (seed, subject), never on the domain, so the
same subject rendered under two domains has an identical mask.

The trainer-facing types (TrainItem, SegBatch) deliberately carry no domain
field: training code cannot condition on the domain even by accident.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


class DataError(Exception):
    pass


NUM_CLASSES = 3


@dataclass(frozen=True)
class DomainSpec:
    """Appearance transform parameters for one acquisition 'domain'."""

    id: str
    intensity_bias: float
    contrast_gamma: float
    texture_frequency: float
    texture_amplitude: float
    noise_sigma: float
    shading_strength: float = 0.0

    def __post_init__(self):
        if self.contrast_gamma <= 0:
            raise DataError(f"contrast_gamma must be positive, got {self.contrast_gamma}")
        if self.noise_sigma < 0 or self.texture_amplitude < 0:
            raise DataError(f"negative noise/texture amplitude in {self}")
        if self.shading_strength < 0:
            raise DataError(f"negative shading strength in {self}")


# Four presets emulating four scanners. Domain A is the most shifted one
# (largest bias, strongest gamma, finest texture, most noise, heaviest
# shading) and is the default held-out target. Mean image intensity follows
# the bias ordering C < B < D < A; gammas are chosen so they do not upset it.
# The multiplicative shading field is the part a per-image normalization
# cannot undo, so it carries most of the generalization gap; at the stronger
# settings it locally collapses the class contrast (a brightened background
# meets a darkened ring), which is what makes predictions on such pixels
# genuinely unreliable rather than merely harder.
DOMAIN_PRESETS: dict[str, DomainSpec] = {
    "A": DomainSpec("A", intensity_bias=0.28, contrast_gamma=1.40, texture_frequency=11.0,
                    texture_amplitude=0.10, noise_sigma=0.05, shading_strength=0.50),
    "B": DomainSpec("B", intensity_bias=0.00, contrast_gamma=1.00, texture_frequency=5.0,
                    texture_amplitude=0.08, noise_sigma=0.02, shading_strength=0.10),
    "C": DomainSpec("C", intensity_bias=-0.12, contrast_gamma=1.15, texture_frequency=7.0,
                    texture_amplitude=0.12, noise_sigma=0.035, shading_strength=0.45),
    "D": DomainSpec("D", intensity_bias=0.10, contrast_gamma=0.90, texture_frequency=3.0,
                    texture_amplitude=0.06, noise_sigma=0.015, shading_strength=0.25),
}

# Cycles per image side for the smooth shading field; low enough that the
# default amplitude-mix band always contains it.
SHADING_FREQUENCY = 1.5


@dataclass
class Sample:
    """One subject's image and mask; hidden_domain never reaches the trainer."""

    image: np.ndarray            # [1,H,W] float in [0,1]
    mask: np.ndarray             # [H,W] int class indices
    labeled: bool
    subject_id: int
    hidden_domain: str


@dataclass
class TrainItem:
    """Domain-blind training view; mask is None for unlabeled subjects."""

    image: np.ndarray
    mask: np.ndarray | None
    labeled: bool
    subject_id: int


@dataclass
class SegBatch:
    """Stacked batch handed to train_step; masks hold -1 where unlabeled."""

    images: np.ndarray           # [N,1,h,w]
    masks: np.ndarray            # [N,h,w] int, -1 on unlabeled rows
    labeled: np.ndarray          # [N] bool


@dataclass(frozen=True)
class SplitSpec:
    held_out_domain: str
    labeled_fraction: float
    seed: int

    def __post_init__(self):
        if not 0 < self.labeled_fraction <= 1:
            raise DataError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")


def _domain_stream(seed: int, subject: int, domain_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, subject, zlib.crc32(domain_id.encode())])


def _render_clean(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Clean scene and mask from geometry randomness only."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cy = size * (0.5 + rng.uniform(-0.08, 0.08))
    cx = size * (0.5 + rng.uniform(-0.08, 0.08))
    a_out = size * rng.uniform(0.22, 0.30)
    b_out = size * rng.uniform(0.18, 0.26)
    scale_in = rng.uniform(0.45, 0.60)
    theta = rng.uniform(0.0, np.pi)

    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    outer = (u / a_out) ** 2 + (v / b_out) ** 2 <= 1.0
    inner = (u / (a_out * scale_in)) ** 2 + (v / (b_out * scale_in)) ** 2 <= 1.0

    mask = np.zeros((size, size), dtype=np.int64)
    mask[outer] = 1
    mask[inner] = 2

    gx, gy = rng.uniform(-1, 1, size=2)
    shading = 0.06 * (gx * (xx / size - 0.5) + gy * (yy / size - 0.5))
    image = np.full((size, size), 0.22) + shading
    image[mask == 1] = 0.55
    image[mask == 2] = 0.85
    return np.clip(image, 0.0, 1.0), mask


def _apply_domain(clean: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    size = clean.shape[-1]
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.power(clean, spec.contrast_gamma)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)  # drawn even when unused: stream alignment
    if spec.texture_amplitude > 0:
        f = spec.texture_frequency
        img = img + spec.texture_amplitude * np.sin(2 * np.pi * f * xx / size + ph1) * np.sin(
            2 * np.pi * f * yy / size + ph2
        )
    angle, phase = rng.uniform(0, 2 * np.pi, size=2)
    if spec.shading_strength > 0:
        axis = np.cos(angle) * xx + np.sin(angle) * yy
        field = 1.0 + spec.shading_strength * np.sin(
            2 * np.pi * SHADING_FREQUENCY * axis / size + phase
        )
        img = img * field
    img = img + spec.intensity_bias
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_domain(spec: DomainSpec, n_subjects: int, size: int, seed: int) -> list[Sample]:
    """Render n_subjects scenes under one domain's appearance transform.

    Geometry (and mask) for subject i depends only on (seed, i); the domain
    influences appearance alone.
    """
    if n_subjects < 1:
        raise DataError(f"n_subjects must be >= 1, got {n_subjects}")
    if size < 8:
        raise DataError(f"size too small: {size}")
    samples = []
    for i in range(n_subjects):
        geo_rng = np.random.default_rng([seed, i])
        clean, mask = _render_clean(size, geo_rng)
        img = _apply_domain(clean, spec, _domain_stream(seed, i, spec.id))
        samples.append(Sample(image=img[None], mask=mask, labeled=True, subject_id=i, hidden_domain=spec.id))
    return samples


def generate_benchmark(n_subjects: int = 10, size: int = 64, seed: int = 0,
                       presets: dict[str, DomainSpec] = DOMAIN_PRESETS) -> list[Sample]:
    """All domains over a shared geometry seed; subject ids globally unique."""
    pool = []
    next_id = 0
    for domain_id in sorted(presets):
        for s in generate_domain(presets[domain_id], n_subjects, size, seed):
            s.subject_id = next_id
            next_id += 1
            pool.append(s)
    return pool


def make_split(pool: list[Sample], spec: SplitSpec) -> tuple[list[TrainItem], list[Sample]]:
    """Leave-one-domain-out split with per-domain ceil-rule labeled selection."""
    domains = sorted({s.hidden_domain for s in pool})
    if spec.held_out_domain not in domains:
        raise DataError(f"held-out domain {spec.held_out_domain!r} not present (have {domains})")

    test = [s for s in pool if s.hidden_domain == spec.held_out_domain]
    rng = np.random.default_rng(spec.seed)
    train: list[TrainItem] = []
    labeled_total = 0
    for domain_id in domains:
        if domain_id == spec.held_out_domain:
            continue
        members = [s for s in pool if s.hidden_domain == domain_id]
        n_labeled = int(np.ceil(spec.labeled_fraction * len(members)))
        chosen = set(rng.choice(len(members), size=n_labeled, replace=False).tolist())
        labeled_total += n_labeled
        for j, s in enumerate(members):
            labeled = j in chosen
            train.append(
                TrainItem(image=s.image, mask=s.mask if labeled else None, labeled=labeled,
                          subject_id=s.subject_id)
            )
    if labeled_total == 0:
        raise DataError("labeled_fraction selects zero labeled subjects in every source domain")
    return train, test


# -- corpus I/O --------------------------------------------------------------


def save_corpus(root, pool: list[Sample], presets: dict[str, DomainSpec] | None = None,
                seed: int | None = None) -> None:
    """Write root/<domain>/subject_XXX/{image_000.png, mask_000.png} + manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in pool:
        sub = root / s.hidden_domain / f"subject_{s.subject_id:03d}"
        sub.mkdir(parents=True, exist_ok=True)
        img16 = np.round(s.image[0] * 65535.0).astype(np.uint16)
        Image.fromarray(img16).save(sub / "image_000.png")
        if s.mask is not None:
            Image.fromarray(s.mask.astype(np.uint8)).save(sub / "mask_000.png")
    if presets is not None:
        lines = ["# domain presets: id bias gamma texture_freq texture_amp noise_sigma shading"]
        if seed is not None:
            lines.append(f"seed = {seed}")
        for d in sorted(presets):
            p = presets[d]
            lines.append(
                f"{p.id} {p.intensity_bias} {p.contrast_gamma} {p.texture_frequency} "
                f"{p.texture_amplitude} {p.noise_sigma} {p.shading_strength}"
            )
        (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def _read_raster(path: Path) -> np.ndarray:
    if path.suffix.lower() not in (".png", ".pgm", ".tif", ".tiff", ".bmp"):
        raise DataError(f"unknown file type: {path.name}")
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"{path.name}: expected single-channel raster, got shape {arr.shape}")
    return arr


def load_corpus(root, num_classes: int = NUM_CLASSES) -> list[Sample]:
    """Read the save_corpus layout back; missing masks mean unlabeled."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    samples: list[Sample] = []
    next_id = 0
    domain_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    for dom in domain_dirs:
        for sub in sorted(d for d in dom.iterdir() if d.is_dir()):
            images = sorted(sub.glob("image_*"))
            for img_path in images:
                arr = _read_raster(img_path)
                if arr.dtype == np.uint8:
                    image = arr.astype(np.float64) / 255.0
                elif arr.dtype in (np.uint16, np.int32):
                    image = arr.astype(np.float64) / 65535.0
                else:
                    raise DataError(f"{img_path.name}: unsupported pixel type {arr.dtype}")
                mask_path = sub / img_path.name.replace("image_", "mask_")
                mask = None
                if mask_path.exists():
                    m = _read_raster(mask_path).astype(np.int64)
                    if m.shape != image.shape:
                        raise DataError(f"{sub.name}: image {image.shape} vs mask {m.shape}")
                    if m.max() >= num_classes or m.min() < 0:
                        raise DataError(f"{sub.name}: mask class id outside [0, {num_classes})")
                    mask = m
                samples.append(
                    Sample(image=image[None], mask=mask, labeled=mask is not None,
                           subject_id=next_id, hidden_domain=dom.name)
                )
                next_id += 1
    if not samples:
        warnings.warn(f"corpus at {root} is empty")
    return samples


# -- batch iteration ---------------------------------------------------------


@dataclass(frozen=True)
class AugmentFlags:
    flip: bool = True
    rotation: bool = True
    scaling: bool = True
    random_crop: bool = True


def _geometric_transform(image: np.ndarray, mask: np.ndarray | None, rng: np.random.Generator,
                         flags: AugmentFlags) -> tuple[np.ndarray, np.ndarray | None]:
    """Identical rotation/scale/flip on image (bilinear) and mask (nearest)."""
    img = image[0]
    angle = rng.uniform(-15.0, 15.0) if flags.rotation else 0.0
    scale = rng.uniform(0.9, 1.1) if flags.scaling else 1.0
    do_flip = flags.flip and rng.random() < 0.5

    if angle != 0.0 or scale != 1.0:
        theta = np.deg2rad(angle)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        mat = rot / scale  # output->input mapping
        center = (np.asarray(img.shape) - 1) / 2.0
        offset = center - mat @ center
        img = ndimage.affine_transform(img, mat, offset=offset, order=1, mode="nearest")
        if mask is not None:
            mask = ndimage.affine_transform(mask, mat, offset=offset, order=0, mode="nearest")
    if do_flip:
        img = img[:, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]
    return img[None], mask


def _crop(image: np.ndarray, mask: np.ndarray | None, crop: int, rng, random_crop: bool):
    h, w = image.shape[-2], image.shape[-1]
    if crop > h or crop > w:
        raise DataError(f"crop {crop} larger than image {(h, w)}")
    if random_crop:
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
    else:
        top, left = (h - crop) // 2, (w - crop) // 2
    img = image[:, top : top + crop, left : left + crop]
    msk = None if mask is None else mask[top : top + crop, left : left + crop]
    return img, msk


def iterate_batches(items: list[TrainItem], batch_size: int, seed: int, epoch: int,
                    crop: int, flags: AugmentFlags = AugmentFlags()):
    """Deterministic shuffled batch stream for one epoch.

    The per-epoch generator is derived from (seed, epoch), so any epoch can
    be replayed in isolation — resume depends on this.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if not items:
        raise DataError("empty training set")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        chunk = [items[i] for i in order[start : start + batch_size]]
        images, masks, labeled = [], [], []
        for item in chunk:
            img, msk = item.image, item.mask
            if flags.rotation or flags.scaling or flags.flip:
                img, msk = _geometric_transform(img, msk, rng, flags)
            img, msk = _crop(img, msk, crop, rng, flags.random_crop)
            images.append(np.ascontiguousarray(img, dtype=np.float64))
            masks.append(np.full((crop, crop), -1, dtype=np.int64) if msk is None
                         else np.ascontiguousarray(msk, dtype=np.int64))
            labeled.append(item.labeled)
        yield SegBatch(images=np.stack(images), masks=np.stack(masks), labeled=np.array(labeled))
