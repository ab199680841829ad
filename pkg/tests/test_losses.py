"""Loss values against hand-computed cases and the finite-difference oracle."""

import dataclasses

import numpy as np
import pytest

from adacontrast.losses import (
    BatchTooSmallError,
    CenterContrastBatch,
    LossValue,
    QueryKeySets,
    center_contrast_loss,
    class_contrast_loss,
    dice_ce_loss,
    instance_discrimination_loss,
    pseudo_label_ce_loss,
    relational_distribution,
    renormalized_mean_backward,
    select_query_key_sets,
)
from adacontrast.numerics import (
    RngStream,
    ZeroVectorError,
    finite_diff_gradient,
    gradient_max_rel_error,
    normalize_rows,
    stable_log_softmax,
    stable_softmax,
)

FD_TOL = 1e-6


def unit_rows(gen, n, d):
    return normalize_rows(gen.standard_normal((n, d)))


class TestRelationalDistribution:
    def test_identical_views_give_uniform(self):
        u = np.array([1.0, 0.0])
        views = np.tile(u, (5, 1))
        dist = relational_distribution(u, views, tau=0.3)
        np.testing.assert_allclose(dist.log_probs, -np.log(5.0))

    def test_two_view_example(self):
        w = np.array([1.0, 0.0])
        views = np.array([[1.0, 0.0], [0.0, 1.0]])  # sims 1 and 0
        dist = relational_distribution(w, views, tau=1.0)
        np.testing.assert_allclose(
            dist.probs, [np.e / (np.e + 1.0), 1.0 / (np.e + 1.0)], atol=1e-12
        )

    def test_scale_invariance_of_cosine(self):
        gen = RngStream(0).substream("rel").generator()
        w = gen.standard_normal(6)
        views = gen.standard_normal((4, 6))
        a = relational_distribution(w, views, tau=0.5)
        b = relational_distribution(5.0 * w, views, tau=0.5)
        np.testing.assert_allclose(a.log_probs, b.log_probs, atol=1e-12)

    def test_zero_embedding_rejected(self):
        with pytest.raises(ZeroVectorError):
            relational_distribution(np.zeros(3), np.eye(3), tau=1.0)
        with pytest.raises(ValueError):
            relational_distribution(np.ones(3), np.eye(3), tau=0.0)


class TestInstanceDiscrimination:
    def make(self, scores, tau=1.0):
        return dataclasses.replace(
            relational_distribution(np.array([1.0, 0.0]), np.eye(2), tau),
            log_probs=stable_log_softmax(np.asarray(scores)),
        )

    def test_identical_distributions_zero(self):
        d = self.make([0.3, -0.7])
        out = instance_discrimination_loss(d, d)
        assert out.value == 0.0

    def test_hand_computed_value(self):
        # p_s=(0.8, 0.2) vs p_t=(0.5, 0.5): 0.8 ln 1.6 + 0.2 ln 0.4
        ps = self.make(np.log([0.8, 0.2]))
        pt = self.make(np.log([0.5, 0.5]))
        expect = 0.8 * np.log(1.6) + 0.2 * np.log(0.4)
        assert instance_discrimination_loss(ps, pt).value == pytest.approx(
            expect, abs=1e-9
        )

    def test_gradient_matches_finite_differences(self):
        gen = RngStream(1).substream("kl-fd").generator()
        z_s = gen.standard_normal(6)
        z_t = gen.standard_normal(6)
        pt = self.make(z_t)

        def f(z):
            return instance_discrimination_loss(self.make(z), pt).value

        hand = instance_discrimination_loss(self.make(z_s), pt).grads[
            "student_logits"
        ]
        oracle = finite_diff_gradient(f, z_s)
        assert gradient_max_rel_error(hand, oracle) < FD_TOL

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            instance_discrimination_loss(self.make([0.0, 1.0]), self.make([0.0, 1.0, 2.0]))


class TestQueryKeySelection:
    def test_two_class_partition_counts(self):
        gen = RngStream(2).substream("qk").generator()
        reps = unit_rows(gen, 8, 4)
        labels = np.array([1, 1, 1, 1, 2, 2, 2, 2])
        sets = select_query_key_sets(reps, labels, queries_per_class=8, rng=RngStream(0))
        for c in (1, 2):
            assert sets.classes[c].queries.shape[0] == 4
            assert sets.classes[c].neg_keys.shape[0] == 4

    def test_single_class_has_no_negatives(self):
        gen = RngStream(3).substream("qk1").generator()
        reps = unit_rows(gen, 5, 4)
        sets = select_query_key_sets(reps, np.ones(5, dtype=int), 8, RngStream(0))
        assert list(sets.classes) == [1]
        assert sets.classes[1].neg_keys.shape[0] == 0

    def test_identical_features_mean_key_is_the_feature(self):
        u = np.array([0.6, 0.8])
        reps = np.tile(u, (4, 1))
        sets = select_query_key_sets(reps, np.ones(4, dtype=int), 8, RngStream(0))
        np.testing.assert_allclose(sets.classes[1].pos_key, u, atol=1e-12)

    def test_subsampling_honors_cap_and_is_deterministic(self):
        gen = RngStream(4).substream("qkcap").generator()
        reps = unit_rows(gen, 30, 4)
        labels = np.ones(30, dtype=int)
        a = select_query_key_sets(reps, labels, 7, RngStream(11))
        b = select_query_key_sets(reps, labels, 7, RngStream(11))
        assert a.classes[1].queries.shape[0] == 7
        np.testing.assert_array_equal(
            a.classes[1].query_indices, b.classes[1].query_indices
        )
        # positive key still uses every class pixel, not just the subsample
        np.testing.assert_allclose(
            a.classes[1].pos_key * a.classes[1].full_mean_norm,
            reps.mean(axis=0),
            atol=1e-12,
        )

    def test_cancelling_features_drop_the_class(self):
        reps = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
        labels = np.array([1, 1, 2])
        sets = select_query_key_sets(reps, labels, 4, RngStream(0))
        assert 1 not in sets.classes and 2 in sets.classes


class TestClassContrast:
    def test_no_negatives_is_zero(self):
        q = np.array([[1.0, 0.0]])
        sets = QueryKeySets(
            classes={
                1: dataclasses.replace(
                    select_query_key_sets(q, np.array([1]), 4, RngStream(0)).classes[1]
                )
            }
        )
        assert class_contrast_loss(sets, tau=1.0).value == 0.0

    def test_hand_computed_single_pair(self):
        # q.r+ = 1, q.r- = -1, tau = 1: -log(e / (e + e^-1))
        reps = np.array([[1.0, 0.0], [-1.0, 0.0]])
        labels = np.array([1, 2])
        sets = select_query_key_sets(reps, labels, 4, RngStream(0))
        out = class_contrast_loss(sets, tau=1.0)
        expect = 2.0 * -np.log(np.e / (np.e + np.exp(-1.0)))  # both classes
        assert out.value == pytest.approx(expect, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        gen = RngStream(5).substream("cc-fd").generator()
        n, d = 12, 5
        reps = unit_rows(gen, n, d)
        labels = np.array([1] * 4 + [2] * 4 + [3] * 4)
        sets = select_query_key_sets(reps, labels, 3, RngStream(9))
        tau = 0.6
        out = class_contrast_loss(sets, tau)

        def f(flat):
            m = flat.reshape(n, d)
            patched = {}
            for c, e in sets.classes.items():
                mean = m[e.full_indices].mean(axis=0)
                mn = float(np.linalg.norm(mean))
                patched[c] = dataclasses.replace(
                    e,
                    queries=m[e.query_indices],
                    pos_key=mean / mn,
                    full_mean_norm=mn,
                )  # negative keys stay frozen: teacher-side constants
            return class_contrast_loss(QueryKeySets(classes=patched), tau).value

        hand = np.zeros((n, d))
        for c, e in sets.classes.items():
            hand[e.query_indices] += out.grads[f"class{c}_queries"]
            member = renormalized_mean_backward(
                e.pos_key, e.full_mean_norm, e.full_indices.size,
                out.grads[f"class{c}_pos_key"],
            )
            hand[e.full_indices] += member
        oracle = finite_diff_gradient(f, reps)
        assert gradient_max_rel_error(hand, oracle) < FD_TOL

    def test_tau_positive_required(self):
        with pytest.raises(ValueError):
            class_contrast_loss(QueryKeySets(classes={}), tau=0.0)


class TestCenterContrast:
    def make_batch(self, gen, n=12, d=5, K=3, lam=0.2, tau=0.5):
        feats = unit_rows(gen, n, d)
        labels = gen.integers(1, K + 1, size=n)
        labels[:2] = 1  # guarantee at least one positive pair
        centers = unit_rows(gen, K, d)
        return CenterContrastBatch(
            pixel_ids=np.arange(n) * 13 + 5,
            features=feats,
            labels=labels,
            anchor_centers=centers[labels - 1],
            lambda_a=lam,
            tau=tau,
        )

    def test_two_anchors_at_their_center_is_zero(self):
        nu = np.array([0.0, 1.0])
        batch = CenterContrastBatch(
            pixel_ids=np.array([3, 8]),
            features=np.stack([nu, nu]),
            labels=np.array([1, 1]),
            anchor_centers=np.stack([nu, nu]),
            lambda_a=0.2,
            tau=1.0,
        )
        out = center_contrast_loss(batch, RngStream(0))
        assert out.value == pytest.approx(0.0, abs=1e-12)

    def test_zero_lambda_ignores_centers(self):
        gen = RngStream(6).substream("ctr0").generator()
        batch = self.make_batch(gen, lam=0.0)
        moved = dataclasses.replace(
            batch, anchor_centers=np.roll(batch.anchor_centers, 1, axis=0)
        )
        rng = RngStream(4)
        assert center_contrast_loss(batch, rng).value == center_contrast_loss(
            moved, rng
        ).value

    def test_gradient_matches_finite_differences(self):
        gen = RngStream(7).substream("ctr-fd").generator()
        n, d = 32, 6
        feats = unit_rows(gen, n, d)
        labels = np.repeat([1, 2, 3, 4], 8)
        centers = unit_rows(gen, 4, d)
        batch = CenterContrastBatch(
            pixel_ids=np.arange(n) * 7 + 3,
            features=feats,
            labels=labels,
            anchor_centers=centers[labels - 1],
            lambda_a=0.2,
            tau=0.5,
        )
        rng = RngStream(21)  # substreams are pure: probes redraw identical positives
        hand = center_contrast_loss(batch, rng).grads["features"]

        def f(flat):
            b = dataclasses.replace(batch, features=flat.reshape(n, d))
            return center_contrast_loss(b, rng).value

        oracle = finite_diff_gradient(f, feats)
        assert gradient_max_rel_error(hand, oracle) < FD_TOL

    def test_batch_order_invariance(self):
        gen = RngStream(8).substream("ctr-perm").generator()
        batch = self.make_batch(gen, n=10)
        perm = gen.permutation(10)
        shuffled = CenterContrastBatch(
            pixel_ids=batch.pixel_ids[perm],
            features=batch.features[perm],
            labels=batch.labels[perm],
            anchor_centers=batch.anchor_centers[perm],
            lambda_a=batch.lambda_a,
            tau=batch.tau,
        )
        rng = RngStream(33)
        a = center_contrast_loss(batch, rng)
        b = center_contrast_loss(shuffled, rng)
        assert a.value == pytest.approx(b.value, abs=1e-12)
        np.testing.assert_allclose(
            a.grads["features"][perm], b.grads["features"], atol=1e-12
        )

    def test_single_anchor_rejected(self):
        batch = CenterContrastBatch(
            pixel_ids=np.array([0]),
            features=np.array([[1.0, 0.0]]),
            labels=np.array([1]),
            anchor_centers=np.array([[1.0, 0.0]]),
        )
        with pytest.raises(BatchTooSmallError):
            center_contrast_loss(batch, RngStream(0))


class TestRenormalizedMeanBackward:
    def test_chain_matches_finite_differences(self):
        gen = RngStream(9).substream("rmb").generator()
        members = unit_rows(gen, 6, 4)
        g_out = gen.standard_normal(4)

        def f(flat):
            m = flat.reshape(6, 4).mean(axis=0)
            return float(g_out @ (m / np.linalg.norm(m)))

        mean = members.mean(axis=0)
        mn = float(np.linalg.norm(mean))
        per_member = renormalized_mean_backward(mean / mn, mn, 6, g_out)
        oracle = finite_diff_gradient(f, members)
        hand = np.tile(per_member, (6, 1))
        assert gradient_max_rel_error(hand, oracle) < FD_TOL


class TestDiceCe:
    def test_perfect_prediction_near_zero(self):
        labels = np.array([[1, 2], [2, 1]])
        probs = np.zeros((2, 2, 2))
        for c in (1, 2):
            probs[c - 1] = labels == c
        out = dice_ce_loss(probs, labels)
        assert out.value <= 1e-4

    def test_hand_computed_binary_case(self):
        # two pixels, both class 1, probs 0.5 everywhere
        labels = np.ones((1, 2), dtype=int)
        probs = np.full((2, 1, 2), 0.5)
        out = dice_ce_loss(probs, labels)
        # class-1 soft dice = 2*1/(1+2) = 2/3 -> dice loss 1/3; ce = ln 2
        assert out.value == pytest.approx(0.5 / 3.0 + 0.5 * np.log(2.0), abs=1e-4)

    def test_gradient_matches_finite_differences(self):
        gen = RngStream(10).substream("dice-fd").generator()
        K, H, W = 3, 4, 4
        z = gen.standard_normal((K, H, W))
        labels = gen.integers(1, K + 1, size=(H, W))

        def f(logits):
            return dice_ce_loss(stable_softmax(logits, axis=0), labels).value

        hand = dice_ce_loss(stable_softmax(z, axis=0), labels).grads["logits"]
        oracle = finite_diff_gradient(f, z)
        assert gradient_max_rel_error(hand, oracle) < FD_TOL

    def test_absent_classes_skip_the_dice_average(self):
        labels = np.ones((2, 2), dtype=int)  # class 2 absent
        probs = np.full((2, 2, 2), 0.5)
        out = dice_ce_loss(probs, labels)
        assert out.value == pytest.approx(0.5 / 3.0 + 0.5 * np.log(2.0), abs=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_ce_loss(np.full((2, 2, 2), 0.5), np.ones((3, 3), dtype=int))


class TestPseudoLabelCe:
    def test_unconfident_teacher_masks_everything(self):
        sp = np.full((2, 2, 2), 0.5)
        tp = np.full((2, 2, 2), 0.5)
        out = pseudo_label_ce_loss(sp, tp, confidence_threshold=0.9)
        assert out.value == 0.0
        np.testing.assert_array_equal(out.grads["student_logits"], np.zeros_like(sp))

    def test_student_matching_teacher_argmax_is_optimal(self):
        tp = np.zeros((2, 2, 2))
        tp[0, :, 0] = 1.0
        tp[1, :, 1] = 1.0
        out = pseudo_label_ce_loss(tp.copy(), tp, confidence_threshold=0.75)
        assert out.value <= 1e-6

    def test_zero_threshold_is_plain_ce(self):
        gen = RngStream(11).substream("pce").generator()
        sp = stable_softmax(gen.standard_normal((3, 2, 2)), axis=0)
        tp = stable_softmax(gen.standard_normal((3, 2, 2)), axis=0)
        hard = np.argmax(tp, axis=0)
        picked = np.take_along_axis(sp, hard[None], axis=0)[0]
        expect = float(-np.mean(np.log(picked)))
        out = pseudo_label_ce_loss(sp, tp, confidence_threshold=0.0)
        assert out.value == pytest.approx(expect, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        gen = RngStream(12).substream("pce-fd").generator()
        K, H, W = 3, 3, 3
        z = gen.standard_normal((K, H, W))
        tp = stable_softmax(3.0 * gen.standard_normal((K, H, W)), axis=0)

        def f(logits):
            return pseudo_label_ce_loss(
                stable_softmax(logits, axis=0), tp, confidence_threshold=0.6
            ).value

        hand = pseudo_label_ce_loss(
            stable_softmax(z, axis=0), tp, confidence_threshold=0.6
        ).grads["student_logits"]
        oracle = finite_diff_gradient(f, z)
        assert gradient_max_rel_error(hand, oracle) < FD_TOL

    def test_threshold_validated(self):
        sp = np.full((2, 1, 1), 0.5)
        with pytest.raises(ValueError):
            pseudo_label_ce_loss(sp, sp, confidence_threshold=1.5)


class TestLossValue:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            LossValue(value=float("nan"), grads={})
        with pytest.raises(ValueError):
            LossValue(value=0.0, grads={"g": np.array([np.inf])})
