"""Finite-difference verification harness for every hand-derived gradient.

Each check builds a random small instance of one loss family, evaluates the
closed-form gradient, and compares it against the central finite-difference
oracle. The harness is shared by the `gradcheck` CLI subcommand and the
acceptance tests.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import centers as centers_mod
from . import losses as losses_mod
from .numerics import (
    RngStream,
    finite_diff_gradient,
    gradient_max_rel_error,
    normalize_rows,
    stable_log_softmax,
    stable_softmax,
)

FD_STEP = 1e-6


def _unit_rows(gen, n, d):
    return normalize_rows(gen.standard_normal((n, d)))


def check_uniformity(stream: RngStream) -> float:
    gen = stream.generator()
    K = int(gen.integers(2, 7))
    d = int(gen.integers(3, 11))
    tau = float(gen.uniform(0.3, 2.0))
    psi = _unit_rows(gen, K, d)
    _, hand = centers_mod.uniformity_loss_and_grad(psi, tau)
    oracle = finite_diff_gradient(
        lambda x: centers_mod.uniformity_loss_and_grad(x.reshape(K, d), tau)[0],
        psi,
        h=FD_STEP,
    )
    return gradient_max_rel_error(hand, oracle)


def check_instance_discrimination(stream: RngStream) -> float:
    gen = stream.generator()
    n = int(gen.integers(3, 9))
    z = gen.standard_normal(n)
    u_t = losses_mod.SimilarityDistribution(
        log_probs=stable_log_softmax(gen.standard_normal(n)), tau=1.0
    )

    def f(zv):
        u_s = losses_mod.SimilarityDistribution(
            log_probs=stable_log_softmax(zv), tau=1.0
        )
        return losses_mod.instance_discrimination_loss(u_s, u_t).value

    u_s = losses_mod.SimilarityDistribution(log_probs=stable_log_softmax(z), tau=1.0)
    hand = losses_mod.instance_discrimination_loss(u_s, u_t).grads["student_logits"]
    return gradient_max_rel_error(hand, finite_diff_gradient(f, z, h=FD_STEP))


def _random_query_key_sets(gen, stream):
    n = int(gen.integers(8, 17))
    d = int(gen.integers(4, 9))
    reps = _unit_rows(gen, n, d)
    labels = gen.integers(1, 4, size=n)
    labels[0], labels[1] = 1, 2  # at least two classes
    return losses_mod.select_query_key_sets(
        reps, labels, queries_per_class=5, rng=stream.substream("sets")
    )


def check_class_contrast(stream: RngStream) -> float:
    gen = stream.generator()
    tau = float(gen.uniform(0.1, 1.0))
    sets = _random_query_key_sets(gen, stream)
    lv = losses_mod.class_contrast_loss(sets, tau)
    worst = 0.0
    for c, entry in sets.classes.items():

        def f_q(q, c=c, entry=entry):
            mod = dataclasses.replace(entry, queries=q.reshape(entry.queries.shape))
            patched = losses_mod.QueryKeySets(classes={**sets.classes, c: mod})
            return losses_mod.class_contrast_loss(patched, tau).value

        def f_p(pk, c=c, entry=entry):
            mod = dataclasses.replace(entry, pos_key=pk)
            patched = losses_mod.QueryKeySets(classes={**sets.classes, c: mod})
            return losses_mod.class_contrast_loss(patched, tau).value

        worst = max(
            worst,
            gradient_max_rel_error(
                lv.grads[f"class{c}_queries"],
                finite_diff_gradient(f_q, entry.queries, h=FD_STEP),
            ),
            gradient_max_rel_error(
                lv.grads[f"class{c}_pos_key"],
                finite_diff_gradient(f_p, entry.pos_key, h=FD_STEP),
            ),
        )
    return worst


def check_center_contrast(stream: RngStream) -> float:
    gen = stream.generator()
    n = int(gen.integers(6, 13))
    d = int(gen.integers(4, 9))
    K = 3
    feats = _unit_rows(gen, n, d)
    labels = gen.integers(1, K + 1, size=n)
    labels[0], labels[1] = 1, 1  # guarantee one positive pair
    cents = _unit_rows(gen, K, d)
    batch = losses_mod.CenterContrastBatch(
        pixel_ids=np.arange(n, dtype=np.int64) * 7 + 3,
        features=feats,
        labels=labels,
        anchor_centers=cents[labels - 1],
        lambda_a=float(gen.uniform(0.05, 0.5)),
        tau=float(gen.uniform(0.1, 1.0)),
        positives_per_anchor=int(gen.integers(1, 4)),
    )
    pos_stream = stream.substream("positives")
    lv = losses_mod.center_contrast_loss(batch, pos_stream)

    def f(x):
        b2 = dataclasses.replace(batch, features=x.reshape(n, d))
        return losses_mod.center_contrast_loss(b2, pos_stream).value

    oracle = finite_diff_gradient(f, feats, h=FD_STEP)
    return gradient_max_rel_error(lv.grads["features"], oracle)


def check_dice_ce(stream: RngStream) -> float:
    gen = stream.generator()
    K = int(gen.integers(2, 5))
    H = W = int(gen.choice([4, 6]))
    logits = gen.standard_normal((K, H, W))
    labels = gen.integers(1, K + 1, size=(H, W))

    def f(z):
        return losses_mod.dice_ce_loss(stable_softmax(z, axis=0), labels).value

    lv = losses_mod.dice_ce_loss(stable_softmax(logits, axis=0), labels)
    return gradient_max_rel_error(
        lv.grads["logits"], finite_diff_gradient(f, logits, h=FD_STEP)
    )


def check_pseudo_label_ce(stream: RngStream) -> float:
    gen = stream.generator()
    K = int(gen.integers(2, 5))
    H = W = int(gen.choice([4, 6]))
    logits = gen.standard_normal((K, H, W))
    # sharpened teacher so part of the map clears the threshold
    teacher = stable_softmax(3.0 * gen.standard_normal((K, H, W)), axis=0)
    thr = 0.6

    def f(z):
        return losses_mod.pseudo_label_ce_loss(
            stable_softmax(z, axis=0), teacher, thr
        ).value

    lv = losses_mod.pseudo_label_ce_loss(stable_softmax(logits, axis=0), teacher, thr)
    return gradient_max_rel_error(
        lv.grads["student_logits"], finite_diff_gradient(f, logits, h=FD_STEP)
    )


CHECKS = {
    "uniformity": check_uniformity,
    "instance_discrimination": check_instance_discrimination,
    "class_contrast": check_class_contrast,
    "center_contrast": check_center_contrast,
    "dice_ce": check_dice_ce,
    "pseudo_label_ce": check_pseudo_label_ce,
}


def run_gradcheck(seed: int = 0, trials: int = 100) -> dict:
    """Worst relative error per loss family over `trials` random instances."""
    root = RngStream(seed)
    results = {}
    for name, fn in CHECKS.items():
        worst = 0.0
        for t in range(trials):
            worst = max(worst, fn(root.substream(name, t)))
        results[name] = worst
    return results
