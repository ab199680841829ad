"""Segmentation metrics and representation diagnostics.

Per-class Dice and average surface distance score the segmentation output;
alignment (feature stability under augmentation pairs), divergence (worst
pairwise inner product of class mean features), and the nearest-center
classifier error diagnose the learned representation. Alignment and the NN
error weight every class equally, so tail classes count as much as the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DIHEDRAL_INVERSE, apply_dihedral
from .model import SegmentationNetwork, forward_single
from .numerics import RngStream


class EmptyMaskError(ValueError):
    """Surface distance requested for a class with an empty mask."""


class MissingClassError(ValueError):
    """A metric needs pixels of a class that the sample set lacks."""


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated evaluation numbers for one checkpoint and split."""

    per_class_dice: tuple
    per_class_asd: tuple       # NaN where a mask was missing
    mean_dice: float
    mean_asd: float
    asd_missing: int           # (sample, class) pairs skipped for empty masks
    alignment: float
    divergence: float
    nn_error: float
    nn_error_pixel_weighted: float
    iteration: int

    def __post_init__(self):
        # NaN fields mean "not computed" and skip range validation
        for v in self.per_class_dice:
            if not 0.0 <= v <= 1.0:
                raise ValueError("Dice outside [0, 1]")
        if np.isfinite(self.divergence) and not -1.0 <= self.divergence <= 1.0:
            raise ValueError("divergence outside [-1, 1]")
        if np.isfinite(self.nn_error) and not 0.0 <= self.nn_error <= 1.0:
            raise ValueError("nn_error outside [0, 1]")


def dice_score(pred_labels, gt_labels, class_id: int) -> float:
    """2|P.G| / (|P|+|G|); 1.0 when both masks are empty."""
    pred = np.asarray(pred_labels) == class_id
    gt = np.asarray(gt_labels) == class_id
    if pred.shape != gt.shape:
        raise ValueError("label map shapes differ")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.sum(pred & gt)) / denom


def _boundary_coords(mask) -> np.ndarray:
    """Coordinates of mask pixels with a 4-neighbor outside the mask
    (image borders count as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    boundary = mask & ~interior
    return np.argwhere(boundary)


def average_surface_distance(pred_labels, gt_labels, class_id: int) -> float:
    """Symmetric mean boundary-to-nearest-boundary distance, in pixels.

    Brute-force over all boundary pixel pairs (fine at toy image sizes).
    Raises EmptyMaskError when either mask has no pixels of the class.
    """
    pred = np.asarray(pred_labels) == class_id
    gt = np.asarray(gt_labels) == class_id
    if not pred.any() or not gt.any():
        raise EmptyMaskError(f"class {class_id} mask is empty")
    bp = _boundary_coords(pred).astype(float)
    bg = _boundary_coords(gt).astype(float)
    d2 = np.sum((bp[:, None, :] - bg[None, :, :]) ** 2, axis=2)
    d = np.sqrt(d2)
    forward = d.min(axis=1)   # pred boundary -> nearest gt boundary
    backward = d.min(axis=0)  # gt boundary -> nearest pred boundary
    return float((forward.sum() + backward.sum()) / (forward.size + backward.size))


def segmentation_scores(pred_list, gt_list, num_classes: int):
    """Aggregate per-class Dice (mean over samples) and ASD over a split.

    ASD skips (sample, class) pairs with an empty mask and counts them.
    Returns (per_class_dice, per_class_asd, missing_count).
    """
    dice_acc = np.zeros(num_classes)
    asd_sums = np.zeros(num_classes)
    asd_counts = np.zeros(num_classes, dtype=int)
    missing = 0
    for pred, gt in zip(pred_list, gt_list):
        for c in range(1, num_classes + 1):
            dice_acc[c - 1] += dice_score(pred, gt, c)
            try:
                asd_sums[c - 1] += average_surface_distance(pred, gt, c)
                asd_counts[c - 1] += 1
            except EmptyMaskError:
                missing += 1
    n = len(pred_list)
    per_dice = tuple(dice_acc / max(n, 1))
    per_asd = tuple(
        asd_sums[i] / asd_counts[i] if asd_counts[i] else float("nan")
        for i in range(num_classes)
    )
    return per_dice, per_asd, missing


def alignment_metric(
    net: SegmentationNetwork,
    samples,
    num_classes: int,
    rng: RngStream,
    num_pairs: int = 4,
    pixels_per_class: int = 256,
    noise_sigma: float = 0.02,
) -> float:
    """RMS dense-feature distance between augmentation pairs, equal class
    weight.

    For every sample and pair, two independently augmented views are pushed
    through the network; both feature maps are realigned through the inverse
    geometric transform so that position (r, c) refers to the same source
    pixel, and squared distances are accumulated per source-label class on a
    pixel subsample.

    Raises MissingClassError when a class never appears in the sample set.
    """
    sq_sums = np.zeros(num_classes)
    counts = np.zeros(num_classes, dtype=int)
    for s in samples:
        for pair in range(num_pairs):
            stream = rng.substream("align", s.id, pair)
            maps = []
            for side in (0, 1):
                gen = stream.substream(side).generator()
                idx = int(gen.integers(0, 8))
                img = apply_dihedral(s.image, idx).copy()
                if noise_sigma > 0:
                    img = img + noise_sigma * gen.standard_normal(img.shape)
                _, heads, _ = forward_single(net, img)
                realigned = apply_dihedral(heads["dense_reps"], DIHEDRAL_INVERSE[idx])
                maps.append(realigned)
            diff2 = np.sum((maps[0] - maps[1]) ** 2, axis=0)  # H x W
            for c in range(1, num_classes + 1):
                pix = np.argwhere(s.labels == c)
                if pix.size == 0:
                    continue
                if pix.shape[0] > pixels_per_class:
                    gen = stream.substream("pixels", c).generator()
                    keep = gen.choice(pix.shape[0], size=pixels_per_class, replace=False)
                    pix = pix[keep]
                vals = diff2[pix[:, 0], pix[:, 1]]
                sq_sums[c - 1] += float(vals.sum())
                counts[c - 1] += vals.size
    if np.any(counts == 0):
        absent = [c + 1 for c in np.flatnonzero(counts == 0)]
        raise MissingClassError(f"no pixels of classes {absent} in the sample set")
    return float(np.sqrt(np.mean(sq_sums / counts)))


def divergence_metric(class_means) -> float:
    """Maximum pairwise inner product between distinct class mean features."""
    m = np.asarray(class_means, dtype=float)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ValueError("need at least two class means")
    g = m @ m.T
    return float(np.max(g[~np.eye(m.shape[0], dtype=bool)]))


def nn_classifier_error(
    features, labels, centers, assignment, pixel_weighted: bool = False
) -> float:
    """Error of the nearest-assigned-center classifier.

    Each feature goes to the class whose assigned center is nearest in
    Euclidean distance (ties to the smallest class id). Equal class weight
    by default; pixel_weighted=True returns the plain error rate instead.

    Raises MissingClassError if some class has no evaluation pixels.
    """
    phi = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    K = centers.K
    target = np.stack([assignment.center_for_class(c, centers) for c in range(1, K + 1)])
    d2 = (
        np.sum(phi ** 2, axis=1)[:, None]
        - 2.0 * phi @ target.T
        + np.sum(target ** 2, axis=1)[None, :]
    )
    pred = np.argmin(d2, axis=1) + 1  # argmin takes the first (smallest id) on ties
    if pixel_weighted:
        return float(np.mean(pred != labels))
    errs = np.zeros(K)
    for c in range(1, K + 1):
        mask = labels == c
        if not mask.any():
            raise MissingClassError(f"class {c} missing from evaluation features")
        errs[c - 1] = float(np.mean(pred[mask] != c))
    return float(np.mean(errs))
