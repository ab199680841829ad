"""Training objectives with exact hand-derived gradients.

Every loss returns a LossValue: the scalar plus a gradient for each named
differentiable input. Teacher-side quantities (teacher distributions,
pseudo-labels, negative keys, class centers) are constants by contract —
the teacher is updated by EMA, not by descent. Gradients are derived by
hand and validated against the central finite-difference oracle in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    RngStream,
    as_float_array,
    stable_log_softmax,
)


class BatchTooSmallError(ValueError):
    """Contrastive batch with fewer than two anchors."""


@dataclass(frozen=True)
class LossValue:
    """Scalar loss plus exact partials for every differentiable input."""

    value: float
    grads: dict

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("loss value is not finite")
        for name, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                raise ValueError(f"gradient {name!r} has non-finite entries")


@dataclass(frozen=True)
class SimilarityDistribution:
    """Softmax distribution over mined views at a given temperature."""

    log_probs: np.ndarray
    tau: float

    def __post_init__(self):
        total = float(np.sum(np.exp(self.log_probs)))
        if abs(total - 1.0) > 1e-9:
            raise ValueError("log_probs do not normalize to 1")

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


def relational_distribution(w, views, tau: float) -> SimilarityDistribution:
    """Softmax over cosine similarities between one embedding and N views.

    Args:
        w: query embedding, d-vector.
        views: N x d matrix of mined-view embeddings.
        tau: temperature > 0.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    w = as_float_array(w, "w")
    views = as_float_array(views, "views")
    wn = float(np.linalg.norm(w))
    vn = np.linalg.norm(views, axis=1)
    from .numerics import ZERO_NORM_EPS, ZeroVectorError

    if wn < ZERO_NORM_EPS or np.any(vn < ZERO_NORM_EPS):
        raise ZeroVectorError("zero-length embedding in similarity distribution")
    sims = np.clip(views @ w / (vn * wn), -1.0, 1.0)
    return SimilarityDistribution(log_probs=stable_log_softmax(sims / tau), tau=tau)


def instance_discrimination_loss(
    u_s: SimilarityDistribution, u_t: SimilarityDistribution
) -> LossValue:
    """KL(student || teacher) over the mined-view distributions.

    The gradient is reported with respect to the student's pre-softmax
    scores ("student_logits"); the teacher side is constant.
    """
    lp = u_s.log_probs
    lq = u_t.log_probs
    if lp.shape != lq.shape:
        raise ValueError("distributions have different sizes")
    p = np.exp(lp)
    kl = float(np.sum(p * (lp - lq)))
    kl = max(kl, 0.0)
    grad_logits = p * ((lp - lq) - kl)
    return LossValue(value=kl, grads={"student_logits": grad_logits})


@dataclass(frozen=True)
class ClassQueryKeys:
    """Per-class query/key material for the class-contrast loss."""

    class_id: int
    queries: np.ndarray        # m x d, differentiable
    query_indices: np.ndarray  # m pixel positions into the source batch
    neg_keys: np.ndarray       # p x d, constant
    neg_indices: np.ndarray
    pos_key: np.ndarray        # d, renormalized mean of the full class set
    full_indices: np.ndarray   # all pixel positions of this class
    full_mean_norm: float      # norm of the pre-normalization mean


@dataclass(frozen=True)
class QueryKeySets:
    """Classes present in a batch with their query/key sets."""

    classes: dict  # class id -> ClassQueryKeys


def select_query_key_sets(
    dense_reps, labels, queries_per_class: int, rng: RngStream
) -> QueryKeySets:
    """Partition per-pixel features into per-class queries and negative keys.

    Queries of class c are its pixels, subsampled uniformly to the cap; the
    negative keys are every pixel of any other class; the positive key is the
    renormalized mean of the full class-c pixel set. Classes absent from the
    batch are simply omitted.
    """
    reps = as_float_array(dense_reps, "dense_reps")
    labels = np.asarray(labels)
    if reps.ndim != 2 or labels.shape != (reps.shape[0],):
        raise ValueError("dense_reps must be n x d with aligned labels")
    classes = {}
    for c in np.unique(labels):
        c = int(c)
        full_idx = np.flatnonzero(labels == c)
        neg_idx = np.flatnonzero(labels != c)
        mean = reps[full_idx].mean(axis=0)
        mean_norm = float(np.linalg.norm(mean))
        if mean_norm < 1e-12:
            continue  # degenerate class mean: cannot form a positive key
        pos_key = mean / mean_norm
        if full_idx.size > queries_per_class:
            gen = rng.substream("queries", c).generator()
            pick = gen.choice(full_idx.size, size=queries_per_class, replace=False)
            q_idx = np.sort(full_idx[pick])
        else:
            q_idx = full_idx
        classes[c] = ClassQueryKeys(
            class_id=c,
            queries=reps[q_idx],
            query_indices=q_idx,
            neg_keys=reps[neg_idx],
            neg_indices=neg_idx,
            pos_key=pos_key,
            full_indices=full_idx,
            full_mean_norm=mean_norm,
        )
    return QueryKeySets(classes=classes)


def class_contrast_loss(sets: QueryKeySets, tau: float) -> LossValue:
    """Pull each query toward its class's positive key, away from other
    classes' pixels.

    Per class c and query q:
        -log exp(q.r+/tau) / (exp(q.r+/tau) + sum_neg exp(q.r-/tau))
    summed over classes and queries. Gradients cover the queries and the
    positive keys; negative keys are constant. A class with no negatives
    contributes 0 (the denominator reduces to the positive term).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    total = 0.0
    grads = {}
    for c, entry in sorted(sets.classes.items()):
        q = entry.queries
        if q.shape[0] == 0:
            continue
        pos_scores = q @ entry.pos_key / tau                    # (m,)
        if entry.neg_keys.shape[0]:
            neg_scores = q @ entry.neg_keys.T / tau             # (m, p)
            all_scores = np.concatenate([pos_scores[:, None], neg_scores], axis=1)
        else:
            all_scores = pos_scores[:, None]
        log_probs = stable_log_softmax(all_scores, axis=1)
        total += float(-np.sum(log_probs[:, 0]))
        probs = np.exp(log_probs)
        # d/dq: (p+ - 1) r+ + sum_k p_k r-_k, all over tau
        grad_q = (probs[:, 0] - 1.0)[:, None] * entry.pos_key[None, :]
        if entry.neg_keys.shape[0]:
            grad_q = grad_q + probs[:, 1:] @ entry.neg_keys
        grads[f"class{c}_queries"] = grad_q / tau
        grads[f"class{c}_pos_key"] = (probs[:, 0] - 1.0) @ q / tau
    return LossValue(value=total, grads=grads)


def renormalized_mean_backward(pos_key, mean_norm: float, count: int, grad_pos_key):
    """Chain a positive-key gradient back to each member of the full set.

    The positive key is r = m/||m|| with m the plain mean of `count` vectors;
    the per-member gradient is (I - r r^T) g / (count * ||m||), identical for
    every member.
    """
    r = as_float_array(pos_key, "pos_key")
    g = as_float_array(grad_pos_key, "grad_pos_key")
    tangent = g - float(np.dot(g, r)) * r
    return tangent / (count * mean_norm)


@dataclass(frozen=True)
class CenterContrastBatch:
    """Labeled pixel features with their allocated class centers."""

    pixel_ids: np.ndarray   # n, unique ids driving positive sampling
    features: np.ndarray    # n x d, unit rows, differentiable
    labels: np.ndarray      # n, class ids in 1..K
    anchor_centers: np.ndarray  # n x d, assigned center per anchor, constant
    lambda_a: float = 0.2
    tau: float = 0.1
    positives_per_anchor: int = 3

    def __post_init__(self):
        n = self.features.shape[0]
        if self.pixel_ids.shape != (n,) or self.labels.shape != (n,):
            raise ValueError("pixel_ids/labels misaligned with features")
        if self.anchor_centers.shape != self.features.shape:
            raise ValueError("anchor_centers misaligned with features")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def _sample_positives(batch: CenterContrastBatch, rng: RngStream):
    """Positive index sets per anchor, keyed by anchor pixel id.

    Candidates are same-label anchors ordered by pixel id, so the drawn set
    is independent of batch ordering. The anchor itself is skipped by index
    arithmetic rather than by materializing the candidate list per anchor.
    """
    n = batch.features.shape[0]
    order = np.argsort(batch.pixel_ids, kind="stable")
    groups = {}                      # label -> member indices in pixel-id order
    pos_in_group = np.empty(n, dtype=int)
    for j in order:
        members = groups.setdefault(int(batch.labels[j]), [])
        pos_in_group[j] = len(members)
        members.append(int(j))
    groups = {c: np.asarray(m, dtype=int) for c, m in groups.items()}
    positives = []
    for i in range(n):
        group = groups[int(batch.labels[i])]
        m = group.size - 1
        if m <= 0:
            positives.append(np.empty(0, dtype=int))
            continue
        take = min(batch.positives_per_anchor, m)
        gen = rng.substream("positives", int(batch.pixel_ids[i])).generator()
        pick = gen.choice(m, size=take, replace=False)
        idx = np.where(pick < pos_in_group[i], pick, pick + 1)
        positives.append(np.sort(group[idx]))
    return positives


def center_contrast_loss(batch: CenterContrastBatch, rng: RngStream) -> LossValue:
    """Supervised contrast against sampled positives plus the assigned center.

    Per anchor i with features phi and center nu_i:
        -(1/n) [ sum_pos log softmax-score(phi_i, phi_pos)
                 + lambda_a log softmax-score(phi_i, nu_i) ]
    where each softmax denominator runs over every other batch feature
    (anchors excluded from their own denominator; centers never enter it).
    Anchors with no same-label positive keep only the center term.
    Gradients cover all features; centers are constant.
    """
    n = batch.features.shape[0]
    if n < 2:
        raise BatchTooSmallError("need at least two anchors")
    phi = batch.features
    tau = batch.tau
    lam = batch.lambda_a
    positives = _sample_positives(batch, rng)

    scores = phi @ phi.T / tau
    np.fill_diagonal(scores, -np.inf)
    row_max = np.max(scores, axis=1, keepdims=True)
    expd = np.exp(scores - row_max)
    row_sum = np.sum(expd, axis=1, keepdims=True)
    lse = (np.log(row_sum) + row_max)[:, 0]          # log-denominator per anchor
    sigma = expd / row_sum                           # softmax over j != i
    center_scores = np.sum(phi * batch.anchor_centers, axis=1) / tau

    pos_counts = np.array([p.size for p in positives], dtype=float)
    value = 0.0
    M = np.zeros((n, n))
    for i, pos in enumerate(positives):
        if pos.size:
            value += float(np.sum(scores[i, pos]) - pos.size * lse[i])
            M[i, pos] = 1.0
    value += float(lam * np.sum(center_scores - lse))
    value *= -1.0 / n

    # grad = (-1/(n tau)) [ (M + M^T - R - R^T) Phi + lambda * centers ]
    R = (pos_counts + lam)[:, None] * sigma
    grad = (M + M.T - R - R.T) @ phi + lam * batch.anchor_centers
    grad *= -1.0 / (n * tau)
    return LossValue(value=value, grads={"features": grad})


def dice_ce_loss(pred_probs, labels) -> LossValue:
    """Equal mix of soft multi-class Dice and pixel cross-entropy.

    Args:
        pred_probs: K x H x W softmax probabilities.
        labels: H x W ground-truth class ids in 1..K.

    The Dice term averages (1 - soft Dice) over the classes present in the
    labels, smoothing 1e-5. The gradient is reported with respect to the
    pre-softmax logits ("logits"), computed through the softmax Jacobian.
    """
    probs = as_float_array(pred_probs, "pred_probs")
    labels = np.asarray(labels)
    K, H, W = probs.shape
    if labels.shape != (H, W):
        raise ValueError("labels shape does not match probabilities")
    eps = 1e-5
    npx = H * W
    onehot = np.zeros_like(probs)
    for c in range(1, K + 1):
        onehot[c - 1] = labels == c

    present = [c for c in range(1, K + 1) if np.any(labels == c)]
    dice_loss = 0.0
    dprobs = np.zeros_like(probs)
    for c in present:
        p = probs[c - 1]
        g = onehot[c - 1]
        inter = float(np.sum(p * g))
        union = float(np.sum(p) + np.sum(g))
        dice = (2.0 * inter + eps) / (union + eps)
        dice_loss += 1.0 - dice
        # d dice / d p = (2 g (union+eps) - (2 inter + eps)) / (union+eps)^2
        ddice = (2.0 * g * (union + eps) - (2.0 * inter + eps)) / (union + eps) ** 2
        dprobs[c - 1] -= ddice / len(present)
    dice_loss /= len(present)

    gt_probs = np.sum(probs * onehot, axis=0)
    ce = float(-np.mean(np.log(np.maximum(gt_probs, 1e-300))))
    dprobs_ce = -onehot / np.maximum(gt_probs, 1e-300)[None, :, :] / npx

    value = 0.5 * dice_loss + 0.5 * ce
    dloss_dp = 0.5 * dprobs + 0.5 * dprobs_ce
    # chain through per-pixel softmax: dz_k = p_k (dp_k - sum_c dp_c p_c)
    inner = np.sum(dloss_dp * probs, axis=0, keepdims=True)
    grad_logits = probs * (dloss_dp - inner)
    return LossValue(value=value, grads={"logits": grad_logits})


def pseudo_label_ce_loss(
    student_probs, teacher_probs, confidence_threshold: float
) -> LossValue:
    """Cross-entropy against confident teacher argmax labels.

    Pixels whose teacher max-probability falls below the threshold are
    masked out; if none qualify the loss is 0 with zero gradients. The
    gradient is with respect to the student's pre-softmax logits.
    """
    sp = as_float_array(student_probs, "student_probs")
    tp = as_float_array(teacher_probs, "teacher_probs")
    if sp.shape != tp.shape:
        raise ValueError("student/teacher shapes differ")
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError("confidence_threshold must lie in [0, 1]")
    K = sp.shape[0]
    conf = np.max(tp, axis=0)
    hard = np.argmax(tp, axis=0)  # 0-based class index
    mask = conf >= confidence_threshold
    count = int(np.sum(mask))
    if count == 0:
        return LossValue(value=0.0, grads={"student_logits": np.zeros_like(sp)})
    onehot = np.zeros_like(sp)
    for k in range(K):
        onehot[k] = hard == k
    picked = np.sum(sp * onehot, axis=0)
    ce_map = -np.log(np.maximum(picked, 1e-300))
    value = float(np.sum(ce_map[mask]) / count)
    grad = (sp - onehot) * mask[None, :, :] / count
    return LossValue(value=value, grads={"student_logits": grad})
