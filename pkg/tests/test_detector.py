import itertools
import math

import numpy as np
import pytest

from curridet import detector as det
from curridet.detector import (
    DetectorConfig,
    ModelParams,
    OptState,
    OptimizerConfig,
    Prediction,
    backward,
    backward_batch,
    decode,
    detection_loss,
    forward,
    forward_raw,
    init_params,
    load_params,
    loss_grad_at_raw,
    optimizer_step,
    params_from_text,
    params_to_text,
    pooled_features,
    predict,
    save_params,
)
from curridet.geometry import BBox
from curridet.metrics import LabelSet

SMALL = DetectorConfig(image_size=8, pool_grid=2, hidden=4, queries=3, num_classes=2)


def random_instance(seed, cfg=SMALL):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, scale=0.5)
    image = rng.random((cfg.image_size, cfg.image_size, 3))
    n_tgt = int(rng.integers(0, cfg.queries + 1))
    boxes, classes = [], []
    for _ in range(n_tgt):
        x0, y0 = rng.uniform(0.05, 0.5, 2)
        w, h = rng.uniform(0.1, 0.4, 2)
        boxes.append(BBox(x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0)))
        classes.append(int(rng.integers(cfg.num_classes)))
    return params, image, LabelSet(boxes, classes)


def total_loss(params, image, targets):
    out, _, _ = forward_raw(params, image)
    loss, _ = loss_grad_at_raw(out[0], targets, params.config)
    return loss


def param_gradient(params, image, targets):
    out, _, _ = forward_raw(params, image)
    _, out_grad = loss_grad_at_raw(out[0], targets, params.config)
    return backward(params, image, out_grad)


class TestConfigAndShapes:
    def test_dims(self):
        cfg = DetectorConfig(image_size=32, pool_grid=4, hidden=32, queries=8, num_classes=2)
        assert cfg.feature_dim == 48
        assert cfg.out_per_query == 7
        assert cfg.out_dim == 56
        assert cfg.n_params == 48 * 32 + 32 + 32 * 56 + 56

    def test_pool_must_divide(self):
        with pytest.raises(ValueError):
            DetectorConfig(image_size=30, pool_grid=4)

    def test_pooled_features_centering(self):
        img = np.full((8, 8, 3), 0.5)
        feats = pooled_features(img, SMALL)
        assert feats.shape == (1, 12)
        np.testing.assert_allclose(feats, 0.0, atol=1e-15)

    def test_pooled_features_manual_mean(self):
        rng = np.random.default_rng(0)
        img = rng.random((8, 8, 3))
        feats = pooled_features(img, SMALL)[0].reshape(2, 2, 3)
        manual = img[:4, :4].mean(axis=(0, 1)) - 0.5
        np.testing.assert_allclose(feats[0, 0], manual, atol=1e-12)

    def test_forward_decode_invariants(self):
        params, image, _ = random_instance(1)
        preds = forward(params, image)
        assert len(preds) == SMALL.queries
        for p in preds:
            assert p.probs.sum() == pytest.approx(1.0)
            assert np.all(p.probs > 0)
            assert np.all((p.box > 0) & (p.box < 1))

    def test_image_size_mismatch(self):
        with pytest.raises(ValueError):
            pooled_features(np.zeros((16, 16, 3)), SMALL)


class TestDetectionLoss:
    def test_empty_targets_uniform_probs(self):
        params = init_params(SMALL)  # zero weights, uniform outputs
        loss = total_loss(params, np.zeros((8, 8, 3)), LabelSet())
        assert loss == pytest.approx(SMALL.noobj_weight * math.log(3), abs=1e-12)

    def test_confident_exact_prediction_near_zero(self):
        cfg = SMALL
        probs_hit = np.array([1.0 - 2e-12, 1e-12, 1e-12])
        probs_off = np.array([1e-12, 1e-12, 1.0 - 2e-12])
        tgt = BBox(0.25, 0.25, 0.75, 0.75)
        preds = [
            Prediction(probs_hit, np.array([0.5, 0.5, 0.5, 0.5])),
            Prediction(probs_off, np.array([0.5, 0.5, 0.1, 0.1])),
            Prediction(probs_off, np.array([0.2, 0.2, 0.1, 0.1])),
        ]
        loss, _ = detection_loss(preds, LabelSet([tgt], [0]), cfg.reg_weight, cfg.noobj_weight)
        assert loss < 1e-9

    def test_matching_picks_cheapest_injection(self):
        cfg = SMALL
        rng = np.random.default_rng(3)
        raw = rng.normal(0, 1, (cfg.queries, cfg.out_per_query))
        probs, boxes = decode(raw, cfg)
        preds = [Prediction(probs[i], boxes[i]) for i in range(cfg.queries)]
        targets = LabelSet(
            [BBox(0.1, 0.1, 0.4, 0.4), BBox(0.5, 0.5, 0.9, 0.9)], [0, 1]
        )
        loss, _ = detection_loss(preds, targets, cfg.reg_weight, cfg.noobj_weight)
        # recompute the loss for every injective assignment by hand
        corners = det._center_to_corner(boxes)
        tgt = np.array([[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]])
        cls = [0, 1]
        best = None
        for perm in itertools.permutations(range(cfg.queries), 2):
            v = 0.0
            for k, i in enumerate(perm):
                v += -math.log(probs[i, cls[k]])
                v += cfg.reg_weight * np.abs(corners[i] - tgt[k]).sum()
            for i in range(cfg.queries):
                if i not in perm:
                    v += cfg.noobj_weight * -math.log(probs[i, -1])
            v /= cfg.queries
            best = v if best is None else min(best, v)
        assert loss == pytest.approx(best, abs=1e-10)

    def test_too_many_targets(self):
        params, image, _ = random_instance(0)
        boxes = [BBox(0.1, 0.1, 0.2, 0.2)] * (SMALL.queries + 1)
        with pytest.raises(ValueError):
            total_loss(params, image, LabelSet(boxes, [0] * len(boxes)))

    @pytest.mark.parametrize("seed", range(25))
    def test_gradient_matches_finite_differences(self, seed):
        params, image, targets = random_instance(seed)
        grad = param_gradient(params, image, targets)
        rng = np.random.default_rng(seed + 1000)
        # probe a random subset of coordinates with central differences
        idx = rng.choice(params.vector.size, size=40, replace=False)
        eps = 1e-5
        worst = 0.0
        for i in idx:
            vp = params.vector.copy()
            vp[i] += eps
            vm = params.vector.copy()
            vm[i] -= eps
            lp = total_loss(ModelParams(vp, params.config), image, targets)
            lm = total_loss(ModelParams(vm, params.config), image, targets)
            fd = (lp - lm) / (2 * eps)
            denom = max(abs(fd), abs(grad[i]), 1e-6)
            worst = max(worst, abs(fd - grad[i]) / denom)
        assert worst <= 1e-4

    def test_backward_batch_sums_singles(self):
        p1, img1, t1 = random_instance(10)
        _, img2, t2 = random_instance(11)
        out, _, _ = forward_raw(p1, np.stack([img1, img2]))
        _, g1 = loss_grad_at_raw(out[0], t1, p1.config)
        _, g2 = loss_grad_at_raw(out[1], t2, p1.config)
        combined = backward_batch(p1, np.stack([img1, img2]), np.stack([g1, g2]))
        singles = backward(p1, img1, g1) + backward(p1, img2, g2)
        np.testing.assert_allclose(combined, singles, atol=1e-12)


class TestOptimizer:
    def test_first_step_closed_form(self):
        cfg = OptimizerConfig(lr=0.01, weight_decay=0.1)
        params = ModelParams(np.array([1.0, -2.0, 0.5] + [0.0] * (SMALL.n_params - 3)), SMALL)
        grad = np.zeros(SMALL.n_params)
        grad[:3] = [0.3, -0.4, 0.0]
        new, state = optimizer_step(params, grad, OptState.zeros(SMALL.n_params), cfg)
        # with zero state, m_hat = grad and v_hat = grad^2 exactly
        expected = params.vector - cfg.lr * (
            grad / (np.abs(grad) + cfg.eps) + cfg.weight_decay * params.vector
        )
        np.testing.assert_allclose(new.vector, expected, atol=1e-12)
        assert state.step == 1

    def test_weight_decay_decoupled_from_moments(self):
        cfg = OptimizerConfig(lr=0.01, weight_decay=0.5)
        params = ModelParams(np.ones(SMALL.n_params), SMALL)
        new, _ = optimizer_step(params, np.zeros(SMALL.n_params), OptState.zeros(SMALL.n_params), cfg)
        np.testing.assert_allclose(new.vector, 1.0 - 0.01 * 0.5, atol=1e-12)

    def test_nonfinite_gradient_rejected(self):
        params = init_params(SMALL)
        grad = np.zeros(SMALL.n_params)
        grad[0] = np.nan
        with pytest.raises(ValueError):
            optimizer_step(params, grad, OptState.zeros(SMALL.n_params), OptimizerConfig())

    def test_descends_fixed_objective(self):
        params, image, targets = random_instance(2)
        state = OptState.zeros(params.config.n_params)
        cfg = OptimizerConfig(lr=5e-3)
        start = total_loss(params, image, targets)
        for _ in range(50):
            grad = param_gradient(params, image, targets)
            params, state = optimizer_step(params, grad, state, cfg)
        assert total_loss(params, image, targets) < start * 0.8

    def test_lr_override(self):
        params = ModelParams(np.ones(SMALL.n_params), SMALL)
        grad = np.ones(SMALL.n_params)
        a, _ = optimizer_step(params, grad, OptState.zeros(SMALL.n_params), OptimizerConfig(lr=0.1), lr=0.0)
        np.testing.assert_allclose(a.vector, params.vector, atol=1e-15)


class TestPredict:
    def test_zero_params_uniform_confidence(self):
        params = init_params(SMALL)
        dets = predict(params, np.zeros((8, 8, 3)))
        assert len(dets) == SMALL.queries
        for d in dets:
            assert d.score == pytest.approx(1 / 3)
            assert d.class_id == 0
            assert (d.box.xmin, d.box.ymin, d.box.xmax, d.box.ymax) == pytest.approx(
                (0.25, 0.25, 0.75, 0.75)
            )

    def test_floor_filters(self):
        params = init_params(SMALL)
        assert predict(params, np.zeros((8, 8, 3)), floor=0.4) == []

    def test_bad_floor(self):
        with pytest.raises(ValueError):
            predict(init_params(SMALL), np.zeros((8, 8, 3)), floor=1.0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params, _, _ = random_instance(5)
        path = tmp_path / "ckpt.txt"
        save_params(path, params)
        back = load_params(path)
        assert back.config == params.config
        assert np.array_equal(back.vector, params.vector)

    def test_text_round_trip(self):
        params, _, _ = random_instance(6)
        back = params_from_text(params_to_text(params))
        assert np.array_equal(back.vector, params.vector)

    def test_bad_magic_rejected(self):
        params, _, _ = random_instance(7)
        text = params_to_text(params).replace("v1", "v9", 1)
        with pytest.raises(ValueError):
            params_from_text(text)

    def test_truncated_rejected(self):
        params, _, _ = random_instance(8)
        lines = params_to_text(params).splitlines()
        with pytest.raises(ValueError):
            params_from_text("\n".join(lines[:-5]))
