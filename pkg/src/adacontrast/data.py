"""Synthetic long-tailed 2-D segmentation scenes, augmentation, view batches.

Each scene paints up to three foreground shapes (disk, annulus, thin ribbon)
over a background, with pixel budgets taken from a Zipf-like frequency
profile — the ribbon class is the scarce tail. Shapes live in disjoint
placement regions so realized frequencies stay close to the target; the
dihedral augmentations supply orientation variety. Intensities are per-class
Gaussian: the annulus and ribbon means sit close together, so the tail class
is not separable by brightness alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream

DEFAULT_PROFILE = (0.90, 0.06, 0.03, 0.01)
DEFAULT_INTENSITY_MEANS = (0.10, 0.45, 0.75, 0.62)


class InfeasibleProfileError(ValueError):
    """Requested class frequencies cannot be painted at this image size."""


class PoolTooSmallError(ValueError):
    """Mined-view request larger than the unlabeled pool."""


@dataclass(frozen=True)
class SceneConfig:
    """Generator knobs for the synthetic dataset."""

    image_size: int = 64
    num_classes: int = 4
    class_frequencies: tuple = DEFAULT_PROFILE
    intensity_means: tuple = DEFAULT_INTENSITY_MEANS
    noise_sigma: float = 0.05
    aug_noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        if not 1 <= self.num_classes <= 4:
            raise InfeasibleProfileError(
                "supported class counts are 1..4 (background + up to 3 shapes)"
            )
        if len(self.class_frequencies) != self.num_classes:
            raise ValueError("class_frequencies length must equal num_classes")
        if abs(sum(self.class_frequencies) - 1.0) > 1e-9:
            raise ValueError("class_frequencies must sum to 1")
        if len(self.intensity_means) < self.num_classes:
            raise ValueError("need an intensity mean per class")
        if sum(self.class_frequencies[1:]) > 0.35:
            raise InfeasibleProfileError(
                "foreground budget above 35% cannot fit the disjoint regions"
            )


@dataclass(frozen=True)
class SegmentationSample:
    """One scene: intensities plus dense class labels."""

    image: np.ndarray   # 1 x H x W
    labels: np.ndarray  # H x W, values 1..K
    id: int


@dataclass(frozen=True)
class ViewBatch:
    """Two augmentations per source sample plus N independently mined views."""

    x1: np.ndarray         # B x 1 x H x W
    x2: np.ndarray         # B x 1 x H x W
    x3: np.ndarray         # N x 1 x H x W
    source_ids: tuple
    mined_ids: tuple


# ------------------------------------------------------------- dihedral

def apply_dihedral(arr, idx: int):
    """Apply dihedral-group element idx (0..7) to the trailing two axes.

    idx 0..3: rotate by idx * 90 degrees; idx 4..7: mirror the last axis,
    then rotate by (idx - 4) * 90 degrees.
    """
    if not 0 <= idx <= 7:
        raise ValueError("dihedral index must be in 0..7")
    out = arr
    if idx >= 4:
        out = np.flip(out, axis=-1)
    return np.rot90(out, idx % 4, axes=(-2, -1))


def _build_inverse_table():
    probe = np.arange(16).reshape(4, 4)
    table = []
    for idx in range(8):
        fwd = apply_dihedral(probe, idx)
        inv = next(
            j for j in range(8) if np.array_equal(apply_dihedral(fwd, j), probe)
        )
        table.append(inv)
    return tuple(table)


DIHEDRAL_INVERSE = _build_inverse_table()


# ------------------------------------------------------------- painting

def _paint_scene(config: SceneConfig, gen: np.random.Generator):
    """Paint one scene. Shapes live in disjoint placement boxes: the disk in
    the left strip (x <= 0.46 H), the annulus top-right (y <= 0.52 H), the
    ribbon bottom-right — so realized class frequencies track the profile."""
    H = config.image_size
    labels = np.ones((H, H), dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:H]
    freqs = config.class_frequencies
    area = H * H

    def require(ok: bool, what: str):
        if not ok:
            raise InfeasibleProfileError(what)

    if config.num_classes >= 2:  # disk
        r0 = np.sqrt(freqs[1] * area / np.pi)
        r = r0 * (1.0 + 0.08 * gen.uniform(-1, 1))
        cx = H * gen.uniform(0.17, 0.30)
        cy = H * gen.uniform(0.25, 0.75)
        require(
            cx - r >= 0.02 * H and cx + r <= 0.46 * H
            and cy - r >= 0.02 * H and cy + r <= 0.98 * H,
            "disk does not fit its region",
        )
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 2
    if config.num_classes >= 3:  # annulus
        inner_ratio = 0.55
        r1 = np.sqrt(freqs[2] * area / (np.pi * (1.0 - inner_ratio ** 2)))
        r_out = r1 * (1.0 + 0.08 * gen.uniform(-1, 1))
        r_in = inner_ratio * r_out
        cx = H * gen.uniform(0.60, 0.80)
        cy = H * gen.uniform(0.20, 0.38)
        require(
            cx - r_out >= 0.46 * H and cx + r_out <= 0.98 * H
            and cy - r_out >= 0.02 * H and cy + r_out <= 0.52 * H,
            "annulus does not fit its region",
        )
        dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
        labels[(dist2 <= r_out * r_out) & (dist2 >= r_in * r_in)] = 3
    if config.num_classes >= 4:  # thin ribbon
        half_width = 1.0
        eff_width = 2.6  # empirical rasterized width of the +-1.0 band
        half_len0 = freqs[3] * area / (2.0 * eff_width)
        half_len = half_len0 * (1.0 + 0.10 * gen.uniform(-1, 1))
        cx = H * gen.uniform(0.64, 0.80)
        cy = H * gen.uniform(0.70, 0.80)
        theta = gen.uniform(0.0, np.pi)
        dxu, dyu = np.cos(theta), np.sin(theta)
        extent = half_len + half_width + 1.0
        require(
            cx - extent >= 0.46 * H and cx + extent <= 0.98 * H
            and cy - extent >= 0.52 * H and cy + extent <= 0.98 * H,
            "ribbon does not fit its region",
        )
        # distance from each pixel center to the segment
        px = xx - cx
        py = yy - cy
        t = np.clip(px * dxu + py * dyu, -half_len, half_len)
        dist = np.sqrt((px - t * dxu) ** 2 + (py - t * dyu) ** 2)
        labels[dist <= half_width] = 4

    means = np.asarray(config.intensity_means[: config.num_classes])
    image = means[labels - 1] + config.noise_sigma * gen.standard_normal((H, H))
    return image[None, :, :], labels


def generate_dataset(config: SceneConfig, count: int):
    """Deterministically paint `count` scenes; sample i uses substream (seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    root = RngStream(config.seed)
    samples = []
    for i in range(count):
        gen = root.substream("scene", i).generator()
        image, labels = _paint_scene(config, gen)
        samples.append(SegmentationSample(image=image, labels=labels, id=i))
    return samples


def measure_frequencies(samples, num_classes: int) -> np.ndarray:
    """Mean per-class pixel frequency across a sample list."""
    counts = np.zeros(num_classes)
    total = 0
    for s in samples:
        for c in range(1, num_classes + 1):
            counts[c - 1] += np.sum(s.labels == c)
        total += s.labels.size
    return counts / total


# ---------------------------------------------------------- augmentation

def augment_with_params(sample: SegmentationSample, rng: RngStream, noise_sigma: float):
    """Dihedral element + additive image noise; returns (sample, dihedral idx)."""
    gen = rng.generator()
    idx = int(gen.integers(0, 8))
    image = apply_dihedral(sample.image, idx).copy()
    labels = apply_dihedral(sample.labels, idx).copy()
    if noise_sigma > 0:
        image = image + noise_sigma * gen.standard_normal(image.shape)
    return SegmentationSample(image=image, labels=labels, id=sample.id), idx


def augment(sample: SegmentationSample, rng: RngStream, noise_sigma: float = 0.02):
    """Uniform dihedral-8 transform of image+labels plus image-only noise."""
    out, _ = augment_with_params(sample, rng, noise_sigma)
    return out


def make_view_batch(pool, batch_ids, n_mined: int, rng: RngStream) -> ViewBatch:
    """Assemble the two augmented views per batch sample plus N mined views.

    Mined views are drawn uniformly without replacement from the whole pool,
    each with its own augmentation. Raises PoolTooSmallError if the pool has
    fewer than n_mined samples.
    """
    if len(pool) < n_mined:
        raise PoolTooSmallError(f"pool of {len(pool)} cannot supply {n_mined} views")
    by_id = {s.id: s for s in pool}
    x1, x2 = [], []
    for sid in batch_ids:
        s = by_id[sid]
        a1 = augment(s, rng.substream("view1", sid), noise_sigma=0.02)
        a2 = augment(s, rng.substream("view2", sid), noise_sigma=0.02)
        x1.append(a1.image)
        x2.append(a2.image)
    gen = rng.substream("mined").generator()
    order = gen.permutation(len(pool))[:n_mined]
    mined_ids = tuple(pool[int(i)].id for i in order)
    x3 = [
        augment(by_id[mid], rng.substream("view3", mid), noise_sigma=0.02).image
        for mid in mined_ids
    ]
    return ViewBatch(
        x1=np.stack(x1) if x1 else np.zeros((0,)),
        x2=np.stack(x2) if x2 else np.zeros((0,)),
        x3=np.stack(x3),
        source_ids=tuple(batch_ids),
        mined_ids=mined_ids,
    )


def split_dataset(samples, labeled_fraction: float, val_fraction: float, seed: int):
    """Disjoint, seed-stable (labeled, unlabeled, validation) split.

    The validation slice is carved off first; the labeled slice is then a
    fraction of the remaining training pool.
    """
    if not 0.0 < labeled_fraction < 1.0 or not 0.0 < val_fraction < 1.0:
        raise ValueError("fractions must lie in (0, 1)")
    ids = np.arange(len(samples))
    gen = RngStream(seed).substream("split").generator()
    order = gen.permutation(ids)
    n_val = max(1, int(round(val_fraction * len(samples))))
    val_ids = set(int(i) for i in order[:n_val])
    train_order = [int(i) for i in order[n_val:]]
    n_labeled = max(1, int(round(labeled_fraction * len(train_order))))
    labeled_ids = set(train_order[:n_labeled])
    labeled = [s for s in samples if s.id in labeled_ids]
    val = [s for s in samples if s.id in val_ids]
    unlabeled = [s for s in samples if s.id not in labeled_ids and s.id not in val_ids]
    return labeled, unlabeled, val
