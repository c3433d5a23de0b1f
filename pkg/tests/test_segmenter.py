"""Scoring head, losses, Dice, and the assembled model.

The construction oracle rebuilds segment() with plain numpy in the same
evaluation order, so probabilities and similarity maps must match bitwise.
The ablation tests check pipeline-graph equality: a flag must produce the
same bytes as the hand-wired variant pipeline, not merely similar scores.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from protoseg import fspa, numerics as nx, ran
from protoseg import segmenter as sg
from protoseg.errors import (
    ConfigError,
    NoBackgroundError,
    ProbabilityFloorWarning,
    ShapeMismatchError,
)


def _segment_oracle(fq, pf, pb, temperature):
    d, h, w = fq.shape
    n = h * w
    nb = pb.shape[0]
    floor = nx.NORM_FLOOR * nx.NORM_FLOOR
    cols = fq.reshape(d, n).T
    qn = np.sqrt(np.clip((cols * cols).sum(axis=1), floor, None))
    fdots = (cols * pf[None, :]).sum(axis=1)
    pfn = np.sqrt(np.clip((pf * pf).sum(), floor, None))
    s_f = np.clip(fdots / (qn * pfn), -1.0, 1.0)
    bdots = (pb.reshape(nb, 1, d) * cols.reshape(1, n, d)).sum(axis=2)
    bn = np.sqrt(np.clip((pb * pb).sum(axis=1, keepdims=True), floor, None))
    s_all = np.clip(bdots / (bn * qn[None, :]), -1.0, 1.0)
    choice = np.argmax(s_all, axis=0)
    onehot = np.zeros((nb, n))
    onehot[choice, np.arange(n)] = 1.0
    s_b = (s_all * onehot).sum(axis=0)
    logits = np.concatenate([s_b[None], s_f[None]], axis=0) * temperature
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    probs = (e / e.sum(axis=0, keepdims=True)).reshape(2, h, w)
    return probs, s_f.reshape(h, w), s_all.reshape(nb, h, w), choice


def _cross_entropy_oracle(probs, mask):
    total = 0.0
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            p0 = max(probs[0, i, j], sg.PROB_FLOOR)
            p1 = max(probs[1, i, j], sg.PROB_FLOOR)
            total += (1.0 - mask[i, j]) * math.log(p0) + mask[i, j] * math.log(p1)
    return -total / mask.size


def _episode(seed=0, size=32):
    """Random images with quadrant masks; foreground and background both
    survive grid pooling in either role."""
    rng = np.random.default_rng(seed)
    support = rng.uniform(0, 1, (size, size))
    query = rng.uniform(0, 1, (size, size))
    smask = np.zeros((size, size), dtype=np.uint8)
    smask[: size // 2, : size // 2] = 1
    qmask = np.zeros((size, size), dtype=np.uint8)
    qmask[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 1
    return sg.Episode(support, smask, query, qmask, class_id=1,
                      support_id=0, query_id=1)


class TestSegment:
    def test_matches_construction_oracle_bitwise(self):
        rng = np.random.default_rng(70)
        for _ in range(15):
            d = int(rng.integers(2, 6))
            h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            nb = int(rng.integers(1, 4))
            fq = rng.normal(size=(d, h, w))
            pf = rng.normal(size=d)
            pb = rng.normal(size=(nb, d))
            bundle = sg.segment(nx.Tensor(fq), nx.Tensor(pf), nx.Tensor(pb), 20.0)
            probs, s_f, s_all, choice = _segment_oracle(fq, pf, pb, 20.0)
            np.testing.assert_array_equal(bundle.probabilities.data, probs)
            np.testing.assert_array_equal(bundle.fg_similarity, s_f)
            np.testing.assert_array_equal(bundle.bg_similarity, s_all)
            np.testing.assert_array_equal(bundle.bg_choice, choice)
            np.testing.assert_array_equal(
                bundle.mask, (probs[1] > probs[0]).astype(np.uint8))

    def test_probabilities_sum_to_one_per_pixel(self):
        rng = np.random.default_rng(71)
        fq = rng.normal(size=(4, 3, 5))
        bundle = sg.segment(nx.Tensor(fq), nx.Tensor(rng.normal(size=4)),
                            nx.Tensor(rng.normal(size=(3, 4))), 20.0)
        np.testing.assert_allclose(bundle.probabilities.data.sum(axis=0), 1.0,
                                   atol=1e-9)

    def test_upsampled_probabilities_still_sum_to_one(self):
        rng = np.random.default_rng(72)
        fq = rng.normal(size=(4, 3, 3))
        bundle = sg.segment(nx.Tensor(fq), nx.Tensor(rng.normal(size=4)),
                            nx.Tensor(rng.normal(size=(2, 4))), 20.0,
                            image_hw=(12, 12))
        assert bundle.probabilities.shape == (2, 12, 12)
        assert bundle.feature_probabilities.shape == (2, 3, 3)
        np.testing.assert_allclose(bundle.probabilities.data.sum(axis=0), 1.0,
                                   atol=1e-9)

    def test_zero_temperature_gives_even_odds(self):
        rng = np.random.default_rng(73)
        bundle = sg.segment(nx.Tensor(rng.normal(size=(3, 2, 2))),
                            nx.Tensor(rng.normal(size=3)),
                            nx.Tensor(rng.normal(size=(2, 3))), 0.0)
        np.testing.assert_array_equal(bundle.probabilities.data, 0.5)
        np.testing.assert_array_equal(bundle.mask, 0)

    def test_mean_aggregate_pools_all_background_rows(self):
        rng = np.random.default_rng(74)
        fq = rng.normal(size=(3, 2, 2))
        pf = rng.normal(size=3)
        pb = rng.normal(size=(3, 3))
        bundle = sg.segment(nx.Tensor(fq), nx.Tensor(pf), nx.Tensor(pb), 20.0,
                            bg_aggregate="mean")
        assert bundle.bg_choice is None
        maxed = sg.segment(nx.Tensor(fq), nx.Tensor(pf), nx.Tensor(pb), 20.0)
        assert not np.array_equal(bundle.probabilities.data,
                                  maxed.probabilities.data)

    def test_frozen_choice_overrides_the_argmax(self):
        rng = np.random.default_rng(75)
        fq = rng.normal(size=(3, 2, 2))
        pf = rng.normal(size=3)
        pb = rng.normal(size=(2, 3))
        free = sg.segment(nx.Tensor(fq), nx.Tensor(pf), nx.Tensor(pb), 20.0)
        forced = 1 - free.bg_choice
        pinned = sg.segment(nx.Tensor(fq), nx.Tensor(pf), nx.Tensor(pb), 20.0,
                            bg_choice=forced)
        np.testing.assert_array_equal(pinned.bg_choice, forced)
        assert not np.array_equal(pinned.probabilities.data,
                                  free.probabilities.data)

    def test_unknown_aggregate_rejected(self):
        with pytest.raises(ConfigError):
            sg.segment(nx.Tensor(np.ones((2, 1, 1))), nx.Tensor(np.ones(2)),
                       nx.Tensor(np.ones((1, 2))), 20.0, bg_aggregate="median")

    def test_empty_background_rejected(self):
        with pytest.raises(NoBackgroundError):
            sg.segment(nx.Tensor(np.ones((2, 1, 1))), nx.Tensor(np.ones(2)),
                       nx.Tensor(np.ones((0, 2))), 20.0)

    def test_prototype_shape_mismatches_rejected(self):
        with pytest.raises(ShapeMismatchError):
            sg.segment(nx.Tensor(np.ones((2, 1, 1))), nx.Tensor(np.ones(3)),
                       nx.Tensor(np.ones((1, 2))), 20.0)
        with pytest.raises(ShapeMismatchError):
            sg.segment(nx.Tensor(np.ones((2, 1, 1))), nx.Tensor(np.ones(2)),
                       nx.Tensor(np.ones(2)), 20.0)


class TestSegLoss:
    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(76)
        for _ in range(30):
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            raw = rng.uniform(0.01, 1.0, (2, h, w))
            probs = raw / raw.sum(axis=0, keepdims=True)
            mask = (rng.uniform(0, 1, (h, w)) > 0.5).astype(np.float64)
            got = sg.seg_loss(nx.Tensor(probs), mask).item()
            want = _cross_entropy_oracle(probs, mask)
            assert got == pytest.approx(want, rel=1e-12)

    def test_even_odds_cost_is_log_two(self):
        probs = np.full((2, 2, 2), 0.5)
        mask = np.array([[0, 1], [1, 0]], dtype=np.float64)
        assert sg.seg_loss(nx.Tensor(probs), mask).item() == np.log(2.0)

    def test_zero_probability_warns_and_stays_finite(self):
        probs = np.zeros((2, 1, 2))
        probs[0] = 1.0
        with pytest.warns(ProbabilityFloorWarning):
            loss = sg.seg_loss(nx.Tensor(probs), np.ones((1, 2)))
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(-np.log(sg.PROB_FLOOR), rel=1e-12)

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ValueError):
            sg.seg_loss(nx.Tensor(np.full((2, 1, 1), 0.5)),
                        np.array([[0.5]]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            sg.seg_loss(nx.Tensor(np.full((2, 2, 2), 0.5)), np.zeros((3, 3)))


class TestDiceContract:
    def test_perfect_overlap_scores_100(self):
        m = (np.random.default_rng(77).uniform(0, 1, (9, 9)) > 0.5).astype(np.uint8)
        assert sg.dice(m, m) == 100.0

    def test_disjoint_masks_score_0(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert sg.dice(a, b) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(78)
        a = (rng.uniform(0, 1, (8, 8)) > 0.5).astype(np.uint8)
        b = (rng.uniform(0, 1, (8, 8)) > 0.5).astype(np.uint8)
        assert sg.dice(a, b) == sg.dice(b, a)

    def test_half_overlap_scores_50(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, :4] = 1          # |A| = 4
        b[:2, 0] = 1          # |B| = 4 after the next line
        b[:2, 1] = 1          # overlap = |{(0,0),(0,1)}| = 2
        assert int(a.sum()) == 4 and int(b.sum()) == 4
        assert int((a & b).sum()) == 2
        assert sg.dice(a, b) == 50.0

    def test_empty_versus_empty_scores_100(self):
        assert sg.dice(np.zeros((3, 3)), np.zeros((3, 3))) == 100.0

    def test_empty_versus_full_scores_0(self):
        assert sg.dice(np.zeros((3, 3)), np.ones((3, 3))) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            sg.dice(np.zeros((3, 3)), np.zeros((3, 4)))


class TestModel:
    def _model(self, **kw):
        kw.setdefault("feature_dim", 8)
        kw.setdefault("num_clusters", 3)
        return sg.Model(**kw)

    def test_predict_stays_off_the_tape(self):
        bundle = self._model().predict(_episode())
        assert not bundle.probabilities.requires_grad
        assert bundle.mask.dtype == np.uint8
        assert set(np.unique(bundle.mask)) <= {0, 1}

    def test_plan_reuse_reproduces_the_loss(self):
        model = self._model()
        episode = _episode(1)
        loss, plan, parts = model.total_loss(episode)
        again, _, _ = model.total_loss(episode, plan)
        assert again.item() == loss.item()
        assert loss.item() == pytest.approx(parts["seg"] + parts["reg"], rel=1e-15)

    def test_reg_loss_swaps_the_roles(self):
        """When support and query coincide, both loss directions build the
        same graph and must agree bitwise."""
        model = self._model()
        ep = _episode(2)
        sym = sg.Episode(ep.support_image, ep.support_mask,
                         ep.support_image, ep.support_mask)
        l_seg, _ = model.seg_loss(sym)
        l_reg, _ = model.reg_loss(sym)
        assert l_seg.item() == l_reg.item()

    def test_reg_loss_needs_the_query_mask(self):
        model = self._model()
        ep = _episode(3)
        bare = sg.Episode(ep.support_image, ep.support_mask, ep.query_image)
        with pytest.raises(ValueError):
            model.reg_loss(bare)

    def test_gradients_reach_every_parameter(self):
        model = self._model(feature_dim=4)
        loss, _, _ = model.total_loss(_episode(4))
        grads = nx.backward(loss, model.params)
        assert set(grads) == set(model.params.names())
        assert "bcma.bank" in grads
        for g in grads.values():
            assert np.isfinite(g).all()

    def test_precomputed_features_match_the_encoder_path(self):
        model = self._model()
        ep = _episode(5)
        with nx.no_grad():
            fs = model.encoder.encode(ep.support_image)
            fq = model.encoder.encode(ep.query_image)
            direct, _ = model.forward(ep.support_image, ep.support_mask,
                                      ep.query_image)
            fed, _ = model.forward(None, ep.support_mask, ep.query_image,
                                   support_features=fs.data,
                                   query_features=fq.data)
        np.testing.assert_array_equal(direct.probabilities.data,
                                      fed.probabilities.data)


class TestAblationWiring:
    """Each flag must reproduce the hand-wired variant pipeline exactly."""

    def _hand_forward(self, model, episode, use_ran, use_fspa, use_bcma):
        f_s = model.encoder.encode(episode.support_image)
        f_q = model.encoder.encode(episode.query_image)
        f_hat = ran.fuse(f_s, f_q) if use_ran else f_s
        feat_hw = (f_hat.shape[1], f_hat.shape[2])
        frac = fspa.downsample_mask(episode.support_mask, feat_hw)
        if use_fspa:
            res = fspa.cluster_prototypes(f_hat, frac, model.num_clusters,
                                          model.cluster_seed,
                                          max_iters=model.kmeans_max_iters)
            sims = fspa.similarity_maps(f_hat, res.prototypes)
            f_bar = fspa.fuse_channelwise(sims, res.prototypes, feat_hw)
            p_f = fspa.foreground_prototype(f_bar, frac)
        else:
            p_f = fspa.foreground_prototype(f_hat, frac)
        if use_bcma:
            p_b = model.bcma.background_prototypes(f_hat, frac)
        else:
            p_b = model.bcma.raw_background(f_hat, frac)
        return sg.segment(f_q, p_f, p_b, model.temperature,
                          image_hw=episode.query_image.shape,
                          bg_aggregate=model.bg_aggregate)

    @pytest.mark.parametrize("flags", [
        dict(use_ran=True, use_fspa=True, use_bcma=True),
        dict(use_ran=False, use_fspa=True, use_bcma=True),
        dict(use_ran=True, use_fspa=False, use_bcma=True),
        dict(use_ran=True, use_fspa=True, use_bcma=False),
        dict(use_ran=False, use_fspa=False, use_bcma=False),
    ])
    def test_flags_reproduce_hand_built_variants(self, flags):
        episode = _episode(6)
        model = sg.Model(feature_dim=8, num_clusters=3, **flags)
        with nx.no_grad():
            got, _ = model.forward(episode.support_image, episode.support_mask,
                                   episode.query_image)
            want = self._hand_forward(model, episode, **flags)
        np.testing.assert_array_equal(got.probabilities.data,
                                      want.probabilities.data)
        np.testing.assert_array_equal(got.mask, want.mask)

    def test_disabling_a_stage_changes_the_pipeline(self):
        episode = _episode(7)
        with nx.no_grad():
            full = sg.Model(feature_dim=8, num_clusters=3).predict(episode)
            for flag in ("use_ran", "use_fspa", "use_bcma"):
                variant = sg.Model(feature_dim=8, num_clusters=3,
                                   **{flag: False}).predict(episode)
                assert not np.array_equal(variant.probabilities.data,
                                          full.probabilities.data), flag
