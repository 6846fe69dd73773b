import math

import numpy as np
import pytest

from scaleloc.anchors import generate_anchors
from scaleloc.featpyr import LayerSpec, PyramidConfig, SyntheticProvider, build_pyramid
from scaleloc.geometry import BBox
from scaleloc.proposal import (
    LayerBatch,
    LayerWeightConfig,
    ProposalModel,
    ProposalTrainConfig,
    cls_loss,
    layer_weights,
    multitask_loss,
    proposal_loss_and_grad,
    score_proposals,
    smooth_l1,
    smooth_l1_grad,
    top_k,
    total_objective,
    train_proposal_model,
)
from scaleloc.scenegen import GenConfig, sample_dataset


TINY_PYR = PyramidConfig(layers=(LayerSpec(3, 8, 2), LayerSpec(4, 16, 3), LayerSpec(5, 32, 2)))


def scalar_alpha(h, cfg=LayerWeightConfig()):
    """Direct scalar evaluation of the stated closed form."""
    alpha_hat = [
        1.0 / (1.0 + math.exp(-(h - hb) / g))
        for hb, g in zip(cfg.mean_heights, cfg.scale_factors)
    ]
    exps = [math.exp(a) for a in alpha_hat]
    total = sum(exps)
    return alpha_hat, [e / total for e in exps]


class TestLayerWeights:
    def test_sum_to_one(self):
        for h in (1.0, 10.0, 48.0, 96.0, 156.0, 400.0):
            assert abs(layer_weights(h).sum() - 1.0) < 1e-12

    def test_frozen_values_at_96(self):
        # Confirmed by direct scalar evaluation of the closed form.
        got = layer_weights(96.0)
        np.testing.assert_allclose(
            got,
            [0.50622994190682391, 0.30706477562767182, 0.18670528246550441],
            atol=1e-12,
        )

    def test_matches_scalar_oracle_at_mean_heights(self):
        for h in (48.0, 96.0, 156.0):
            _, expect = scalar_alpha(h)
            np.testing.assert_allclose(layer_weights(h), expect, atol=1e-9)

    def test_sigmoid_is_half_at_own_mean_height(self):
        cfg = LayerWeightConfig()
        for m, h in enumerate(cfg.mean_heights):
            alpha_hat, _ = scalar_alpha(h, cfg)
            assert alpha_hat[m] == pytest.approx(0.5, abs=1e-15)

    def test_each_component_monotone_in_height(self):
        # Strict within the float64-resolvable band, non-strict beyond
        # (the sigmoids saturate to exactly 1.0 far above each mean).
        cfg = LayerWeightConfig()
        hbar = np.array(cfg.mean_heights)
        gam = np.array(cfg.scale_factors)

        hs = np.linspace(5, 400, 200)
        alpha_hat = 1.0 / (1.0 + np.exp(-(hs[:, None] - hbar) / gam))
        assert np.all(np.diff(alpha_hat, axis=0) >= 0)

        hs = np.linspace(5, 120, 100)
        alpha_hat = 1.0 / (1.0 + np.exp(-(hs[:, None] - hbar) / gam))
        assert np.all(np.diff(alpha_hat, axis=0) > 0)

    def test_vectorized_heights(self):
        hs = np.array([48.0, 96.0, 156.0])
        out = layer_weights(hs)
        assert out.shape == (3, 3)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LayerWeightConfig(mean_heights=(48.0, 96.0))
        with pytest.raises(ValueError):
            LayerWeightConfig(balance=0.5)


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(np.zeros(4)) == 0.0

    def test_knee_continuity(self):
        v = np.array([1.0, 0.0, 0.0, 0.0])
        quadratic = 0.5 * np.linalg.norm(v) ** 2
        linear = np.linalg.norm(v) - 0.5
        assert quadratic == 0.5
        assert linear == 0.5
        assert smooth_l1(v) == 0.5

    def test_linear_branch(self):
        assert smooth_l1(np.array([2.0, 0, 0, 0])) == pytest.approx(1.5)

    def test_gradient_both_branches(self):
        rng = np.random.default_rng(0)
        for scale in (0.3, 5.0):
            v = scale * rng.uniform(-1, 1, size=4)
            v /= max(np.linalg.norm(v) / scale, 1e-9)
            g = smooth_l1_grad(v)
            fd = np.zeros(4)
            for i in range(4):
                e = np.zeros(4)
                e[i] = 1e-6
                fd[i] = (smooth_l1(v + e) - smooth_l1(v - e)) / 2e-6
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


class TestClsLoss:
    def test_perfect_classifier(self):
        labels = np.array([1, 1, 0, 0, 0])
        p = np.where(labels == 1, 1.0 - 1e-7, 1e-7)
        assert cls_loss(labels, p) <= 1e-6

    def test_single_positive_half_confidence(self):
        assert cls_loss([1], [0.5], gamma=3.0) == pytest.approx(0.25 * math.log(2.0), abs=1e-15)

    def test_matches_naive_summation_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, size=n)
            if labels.sum() == 0:
                labels[0] = 1
            p = rng.uniform(0.01, 0.99, size=n)
            gamma = float(rng.uniform(1, 5))
            pos = [(-math.log(pi)) for li, pi in zip(labels, p) if li == 1]
            neg = [(-math.log(1 - pi)) for li, pi in zip(labels, p) if li == 0]
            expect = 0.0
            if pos:
                expect += (1 / (1 + gamma)) * sum(pos) / len(pos)
            if neg:
                expect += (gamma / (1 + gamma)) * sum(neg) / len(neg)
            assert cls_loss(labels, p, gamma) == pytest.approx(expect, abs=1e-9)

    def test_empty_populations(self):
        assert cls_loss([1, 1], [0.9, 0.8]) > 0
        assert cls_loss([0, 0], [0.1, 0.2]) > 0
        assert cls_loss([], []) == 0.0


class TestMultitaskLoss:
    anchor = BBox(10, 10, 10, 20)
    gt = BBox(12, 11, 11, 22)

    def test_negative_ignores_regression(self):
        a = multitask_loss(0, self.anchor, None, 0.3, np.zeros(4))
        b = multitask_loss(0, self.anchor, None, 0.3, np.array([100.0, -50.0, 3.0, 9.0]))
        assert a == b

    def test_exact_regression_prediction(self):
        from scaleloc.geometry import encode_regression

        vec = encode_regression(self.anchor, self.gt, "raw")
        loss = multitask_loss(1, self.anchor, self.gt, 0.5, vec, mode="raw")
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    @pytest.mark.parametrize("mode", ["raw", "normalized"])
    def test_offset_gradient_matches_finite_differences(self, mode):
        from scaleloc.geometry import encode_regression

        lam = 10.0
        pred = np.array([0.4, -0.2, 0.1, 0.3])
        target = encode_regression(self.anchor, self.gt, mode)
        analytic = -lam * smooth_l1_grad(target - pred)
        fd = np.zeros(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = 1e-4
            hi = multitask_loss(1, self.anchor, self.gt, 0.5, pred + e, lam, mode)
            lo = multitask_loss(1, self.anchor, self.gt, 0.5, pred - e, lam, mode)
            fd[i] = (hi - lo) / 2e-4
        np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-9)


class TestTotalObjective:
    def test_empty_is_zero(self):
        assert total_objective({}) == 0.0

    def test_single_layer_uses_softmax_alpha(self):
        cfg = LayerWeightConfig()
        anchor = BBox(0, 0, 10, 20)
        examples = [(1, anchor, anchor, 20.0, 0.7, np.zeros(4))]
        got = total_objective({3: examples}, cfg)
        alpha = layer_weights(20.0, cfg)[0]
        assert alpha < 1.0
        expect = alpha * multitask_loss(1, anchor, anchor, 0.7, np.zeros(4), cfg.tradeoff)
        assert got == pytest.approx(expect, abs=1e-12)

    def test_double_sum_over_layers(self):
        cfg = LayerWeightConfig()
        anchor = BBox(0, 0, 10, 20)
        batches = {
            3: [(0, anchor, None, 48.0, 0.2, np.zeros(4))],
            4: [(0, anchor, None, 96.0, 0.1, np.zeros(4))],
        }
        got = total_objective(batches, cfg)
        expect = layer_weights(48.0, cfg)[0] * multitask_loss(0, anchor, None, 0.2, np.zeros(4)) + (
            layer_weights(96.0, cfg)[1] * multitask_loss(0, anchor, None, 0.1, np.zeros(4))
        )
        assert got == pytest.approx(expect, abs=1e-12)


def make_batches(model, rng, n_per_layer=2):
    batches = []
    for layer_id in model.layer_ids:
        d = model.feature_dims[layer_id]
        feats = rng.uniform(-1, 1, size=(n_per_layer, d))
        labels = np.array([1, 0][:n_per_layer])
        _, offsets, _ = model.forward(layer_id, feats)
        # Targets chosen so residual norms stay away from the smooth-L1 knee.
        vecs = offsets + np.array([0.1, -0.1, 0.05, 0.08])
        vecs[labels == 0] = 0.0
        heights = rng.uniform(20, 150, size=n_per_layer)
        batches.append(
            LayerBatch(
                layer_id=layer_id,
                features=feats,
                labels=labels,
                target_vecs=vecs,
                target_heights=heights,
            )
        )
    return batches


class TestLossGradient:
    @pytest.mark.parametrize("hidden", [0, 6])
    def test_parameter_gradient_matches_finite_differences(self, hidden):
        rng = np.random.default_rng(5)
        model = ProposalModel.init(TINY_PYR, hidden_dim=hidden, seed=5)
        cfg = LayerWeightConfig()
        batches = make_batches(model, rng)
        _, grads = proposal_loss_and_grad(model, batches, cfg)

        worst = 0.0
        step = 1e-4
        for name, param in model.params.items():
            flat = param.reshape(-1)
            picks = rng.choice(flat.size, size=min(10, flat.size), replace=False)
            for idx in picks:
                orig = flat[idx]
                flat[idx] = orig + step
                hi, _ = proposal_loss_and_grad(model, batches, cfg)
                flat[idx] = orig - step
                lo, _ = proposal_loss_and_grad(model, batches, cfg)
                flat[idx] = orig
                fd = (hi - lo) / (2 * step)
                a = grads[name].reshape(-1)[idx]
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                worst = max(worst, rel)
        assert worst < 1e-5


class TestScoring:
    def setup_scene(self):
        cfg = GenConfig(scenes=1, extent=(160, 120), objects_min=2, objects_max=2)
        scene = sample_dataset(cfg, seed=2)[0]
        from scaleloc.scenegen import rasterize

        pyramid = build_pyramid(rasterize(scene), TINY_PYR)
        anchors = generate_anchors(TINY_PYR, scene.extent)
        model = ProposalModel.init(TINY_PYR, seed=3)
        return model, pyramid, anchors

    def test_top_k_zero(self):
        model, pyramid, anchors = self.setup_scene()
        scored = score_proposals(model, pyramid, anchors)
        assert top_k(scored, 0) == []

    def test_top_k_sorted_descending(self):
        model, pyramid, anchors = self.setup_scene()
        scored = score_proposals(model, pyramid, anchors)
        picked = top_k(scored, 50)
        scores = [s.score for s in picked]
        assert scores == sorted(scores, reverse=True)

    def test_top_k_matches_full_sort_oracle(self):
        model, pyramid, anchors = self.setup_scene()
        scored = score_proposals(model, pyramid, anchors)
        picked = top_k(scored, 300)
        oracle = sorted(scored, key=lambda s: -s.score)[:300]
        assert [s.score for s in picked] == [s.score for s in oracle]

    def test_top_k_beyond_available_returns_all(self):
        model, pyramid, anchors = self.setup_scene()
        scored = score_proposals(model, pyramid, anchors)
        assert len(top_k(scored, 10**6)) == len(scored)

    def test_boxes_clipped_and_layer_tagged(self):
        model, pyramid, anchors = self.setup_scene()
        for s in score_proposals(model, pyramid, anchors):
            assert s.layer_id in (3, 4, 5)
            assert s.box.x >= 0 and s.box.y >= 0
            assert s.box.x2 <= 160 and s.box.y2 <= 120
            assert 0.0 <= s.score <= 1.0


class TestTraining:
    def small_dataset(self, n=6):
        cfg = GenConfig(scenes=n, extent=(160, 120), objects_min=1, objects_max=3)
        return sample_dataset(cfg, seed=11)

    def train_cfg(self, **kw):
        defaults = dict(pyramid=TINY_PYR, steps=25, seed=7, neg_pool=128, pos_count=8)
        defaults.update(kw)
        return ProposalTrainConfig(**defaults)

    def test_fixed_seed_reproducible(self):
        data = self.small_dataset()
        a = train_proposal_model(data, self.train_cfg())
        b = train_proposal_model(data, self.train_cfg())
        assert set(a.params) == set(b.params)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_objective_decreases_over_training(self):
        data = self.small_dataset(10)
        log = []
        train_proposal_model(data, self.train_cfg(steps=200), log=log)
        losses = np.array([l for _, l in log])
        first = losses[: len(losses) // 4].mean()
        last = losses[-len(losses) // 4 :].mean()
        assert last < first

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_proposal_model([], self.train_cfg())

    def test_checkpoint_arrays_round_trip(self):
        data = self.small_dataset()
        model = train_proposal_model(data, self.train_cfg())
        back = ProposalModel.from_arrays(model.to_arrays())
        assert back.layer_ids == model.layer_ids
        assert back.hidden_dim == model.hidden_dim
        assert back.regression_mode == model.regression_mode
        for name in model.params:
            np.testing.assert_array_equal(back.params[name], model.params[name])
