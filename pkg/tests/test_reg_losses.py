"""Tests for the confidence, surface-field, correspondence and feature losses."""

import math

import numpy as np
import pytest
import torch

from nerfreg.config import RegTrainConfig
from nerfreg.errors import InvalidArgumentError, NonFiniteLossError
from nerfreg.geometry import RigidTransform
from nerfreg.reg_losses import (LossParts, LossWeights, RobustLossParams, SupervisionBundle, compute_losses,
                                confidence_loss, correspondence_loss, feature_loss, robust_rho,
                                surface_field_loss, total_loss)
from nerfreg.reg_transformer import CorrespondencePrediction

IDENTITY = RigidTransform.identity()


def t64(values):
    return torch.tensor(values, dtype=torch.float64)


def prediction(src_points, src_pred, src_conf, tgt_points, tgt_pred, tgt_conf, src_features=None,
               tgt_features=None):
    return CorrespondencePrediction(t64(src_points), t64(src_pred), t64(src_conf), t64(tgt_points),
                                    t64(tgt_pred), t64(tgt_conf),
                                    None if src_features is None else t64(src_features),
                                    None if tgt_features is None else t64(tgt_features))


def constant_field(value):
    return lambda points: torch.full((points.shape[0],), value, dtype=points.dtype)


def one_point_prediction(conf=0.5):
    return prediction([[0.0, 0.0, 0.0]], [[0.5, 0.0, 0.0]], [conf], [[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], [conf])


class TestConfidenceLoss:
    def test_half_confidence_against_one(self):
        sup = SupervisionBundle(t64([1.0]), t64([1.0]), IDENTITY)
        loss = confidence_loss(one_point_prediction(0.5), sup)
        assert float(loss) == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    def test_exact_binary_targets(self):
        pred = prediction([[0.0] * 3] * 2, [[0.0] * 3] * 2, [1.0, 0.0], [[0.0] * 3], [[0.0] * 3], [1.0])
        sup = SupervisionBundle(t64([1.0, 0.0]), t64([1.0]), IDENTITY)
        assert float(confidence_loss(pred, sup)) == pytest.approx(0.0, abs=1e-6)

    def test_soft_target_minimum(self):
        sup = SupervisionBundle(t64([0.3]), t64([0.3]), IDENTITY)
        scan = np.linspace(0.05, 0.95, 91)
        losses = [float(confidence_loss(one_point_prediction(c), sup)) for c in scan]
        assert scan[int(np.argmin(losses))] == pytest.approx(0.3, abs=0.011)

    def test_supervision_is_clamped(self):
        sup = SupervisionBundle(t64([1.7]), t64([-0.2]), IDENTITY)
        assert float(sup.src_surface[0]) == 1.0 and float(sup.tgt_surface[0]) == 0.0

    def test_shape_mismatch(self):
        sup = SupervisionBundle(t64([1.0, 1.0]), t64([1.0]), IDENTITY)
        with pytest.raises(InvalidArgumentError):
            confidence_loss(one_point_prediction(), sup)


class TestSurfaceFieldLoss:
    def test_hand_built_pair(self):
        sup = SupervisionBundle(t64([0.8]), t64([0.2]), IDENTITY, constant_field(0.6), constant_field(0.6))
        assert float(surface_field_loss(one_point_prediction(), sup)) == pytest.approx(0.3, abs=1e-12)

    def test_constant_fields(self):
        sup = SupervisionBundle(t64([0.3]), t64([0.3]), IDENTITY, constant_field(0.3), constant_field(0.3))
        pred = prediction([[0.1, 0.2, 0.3]], [[-0.4, 0.9, 0.0]], [0.5], [[0.0] * 3], [[0.7, -0.7, 0.2]], [0.5])
        assert float(surface_field_loss(pred, sup)) == pytest.approx(0.0, abs=1e-12)

    def test_identical_fields_at_gt_points(self):
        field = lambda points: torch.exp(-torch.sum(points ** 2, dim=-1))
        gt = RigidTransform(np.eye(3), np.array([0.2, -0.1, 0.05]))
        src = t64([[0.1, 0.2, 0.3], [-0.3, 0.0, 0.4]])
        shifted = lambda points: field(points - torch.as_tensor(gt.translation))
        pred = CorrespondencePrediction(src, src + t64(gt.translation), t64([0.5, 0.5]), src + t64(gt.translation),
                                        src, t64([0.5, 0.5]))
        sup = SupervisionBundle(field(src), shifted(src + t64(gt.translation)), gt, field, shifted)
        assert float(surface_field_loss(pred, sup)) == pytest.approx(0.0, abs=1e-12)

    def test_needs_evaluators(self):
        with pytest.raises(InvalidArgumentError):
            surface_field_loss(one_point_prediction(), SupervisionBundle(t64([1.0]), t64([1.0]), IDENTITY))


class TestRobustRho:
    def test_zero(self):
        for eta in (0.0, 0.5, 1.0, 2.0, 4.0):
            assert float(robust_rho(0.0, RobustLossParams(eta, 0.3))) == 0.0

    def test_quadratic_limit(self):
        assert float(robust_rho(0.5, RobustLossParams(2.0, 0.5))) == pytest.approx(0.5)

    def test_pseudo_huber(self):
        assert float(robust_rho(0.5, RobustLossParams(1.0, 0.5))) == pytest.approx(math.sqrt(2.0) - 1.0, abs=1e-12)

    def test_log_limit(self):
        assert float(robust_rho(1.0, RobustLossParams(0.0, 1.0))) == pytest.approx(math.log(1.5), abs=1e-12)

    @pytest.mark.parametrize("eta", [0.0, 0.5, 1.0, 2.0, 3.0])
    def test_monotone(self, eta):
        values = robust_rho(torch.linspace(0.0, 5.0, 200, dtype=torch.float64), RobustLossParams(eta, 0.5))
        assert torch.all(values[1:] >= values[:-1])

    def test_scale_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            RobustLossParams(1.0, 0.0)


class TestCorrespondenceLoss:
    def test_zero_at_ground_truth(self, rng):
        R, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        R *= np.sign(np.linalg.det(R))
        gt = RigidTransform(R, rng.normal(size=3))
        src = rng.normal(size=(6, 3))
        tgt = rng.normal(size=(4, 3))
        pred = prediction(src, gt.apply(src), [0.5] * 6, tgt, gt.inverse().apply(tgt), [0.5] * 4)
        sup = SupervisionBundle(t64([1.0] * 6), t64([1.0] * 4), gt)
        assert float(correspondence_loss(pred, sup)) == pytest.approx(0.0, abs=1e-9)

    def test_zero_weights(self, rng):
        pred = prediction(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), [0.5] * 5,
                          rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), [0.5] * 3)
        sup = SupervisionBundle(t64([0.0] * 5), t64([0.0] * 3), IDENTITY)
        assert float(correspondence_loss(pred, sup)) == 0.0

    def test_single_point(self):
        sup = SupervisionBundle(t64([1.0]), t64([1.0]), IDENTITY)
        loss = correspondence_loss(one_point_prediction(), sup, RobustLossParams(1.0, 0.5))
        assert float(loss) == pytest.approx(math.sqrt(2.0) - 1.0, abs=1e-9)

    def test_no_gradient_through_weights(self):
        weights = t64([0.7]).requires_grad_(True)
        sup = SupervisionBundle(weights, t64([1.0]), IDENTITY)
        pred = one_point_prediction()
        pred.src_pred.requires_grad_(True)
        correspondence_loss(pred, sup).backward()
        assert pred.src_pred.grad is not None
        assert weights.grad is None or float(weights.grad.abs().sum()) == 0.0


class TestFeatureLoss:
    def test_one_positive_one_negative(self):
        result = feature_loss(t64([[2.0, 0.0, 0.0, 0.0]]), t64([[2.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]),
                              t64([[0.0, 0.0, 0.0]]), t64([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), IDENTITY,
                              r_pos=0.1, r_neg=0.5, temperature=1.0)
        assert float(result.loss) == pytest.approx(math.log(1.0 + math.exp(-2.0)), abs=1e-12)
        assert result.n_positive == 2
        assert not result.no_overlap

    @pytest.mark.parametrize("temperature", [1.0, 0.5, 0.25])
    def test_logits_divided_by_width_and_temperature(self, temperature):
        # d = 4, so s+ = 4 / (sqrt(4) * temperature) and s- = 0
        result = feature_loss(t64([[2.0, 0.0, 0.0, 0.0]]), t64([[2.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]),
                              t64([[0.0, 0.0, 0.0]]), t64([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), IDENTITY,
                              r_pos=0.1, r_neg=0.5, temperature=temperature)
        s_pos = 4.0 / (2.0 * temperature)
        assert float(result.loss) == pytest.approx(math.log1p(math.exp(-s_pos)), abs=1e-12)

    def test_orthogonal_features_sharp_temperature(self):
        points = t64(np.eye(3))
        features = t64(np.eye(3)) * 4.0
        result = feature_loss(features, features, points, points, IDENTITY, 0.1, 0.5, temperature=0.01)
        assert float(result.loss) < 1e-6

    def test_no_overlap(self):
        result = feature_loss(t64([[1.0, 0.0]]), t64([[1.0, 0.0]]), t64([[0.0, 0.0, 0.0]]),
                              t64([[0.9, 0.9, 0.9]]), IDENTITY, 0.1, 0.2)
        assert result.no_overlap and result.n_positive == 0
        assert float(result.loss) == 0.0

    def test_radius_order(self):
        with pytest.raises(InvalidArgumentError):
            feature_loss(t64([[1.0]]), t64([[1.0]]), t64([[0.0] * 3]), t64([[0.0] * 3]), IDENTITY, 0.5, 0.1)


class TestGradients:
    def test_confidence(self):
        sup = SupervisionBundle(t64([0.9, 0.2]), t64([0.4]), IDENTITY)

        def loss(src_conf, tgt_conf):
            pred = CorrespondencePrediction(t64([[0.0] * 3] * 2), t64([[0.0] * 3] * 2), src_conf,
                                            t64([[0.0] * 3]), t64([[0.0] * 3]), tgt_conf)
            return confidence_loss(pred, sup)

        inputs = (t64([0.3, 0.6]).requires_grad_(True), t64([0.7]).requires_grad_(True))
        assert torch.autograd.gradcheck(loss, inputs, rtol=1e-4, atol=1e-8)

    def test_surface_field(self):
        field = lambda points: torch.exp(-torch.sum(points ** 2, dim=-1))
        sup = SupervisionBundle(t64([0.5, 0.1]), t64([0.9]), IDENTITY, field, field)

        def loss(src_pred, tgt_pred):
            pred = CorrespondencePrediction(t64([[0.0] * 3] * 2), src_pred, t64([0.5, 0.5]), t64([[0.0] * 3]),
                                            tgt_pred, t64([0.5]))
            return surface_field_loss(pred, sup)

        inputs = (t64([[0.1, 0.2, 0.3], [0.4, -0.2, 0.1]]).requires_grad_(True),
                  t64([[0.3, 0.3, -0.3]]).requires_grad_(True))
        assert torch.autograd.gradcheck(loss, inputs, rtol=1e-4, atol=1e-8)

    def test_correspondence(self, rng):
        src = t64(rng.normal(size=(4, 3)))
        tgt = t64(rng.normal(size=(3, 3)))
        sup = SupervisionBundle(t64([1.0, 0.5, 0.8, 0.2]), t64([0.3, 1.0, 0.6]), IDENTITY)

        def loss(src_pred, tgt_pred):
            pred = CorrespondencePrediction(src, src_pred, t64([0.5] * 4), tgt, tgt_pred, t64([0.5] * 3))
            return correspondence_loss(pred, sup)

        inputs = (t64(rng.normal(size=(4, 3))).requires_grad_(True), t64(rng.normal(size=(3, 3))).requires_grad_(True))
        assert torch.autograd.gradcheck(loss, inputs, rtol=1e-4, atol=1e-8)

    def test_feature(self, rng):
        points = t64(rng.normal(size=(5, 3)))

        def loss(f_src, f_tgt):
            return feature_loss(f_src, f_tgt, points, points, IDENTITY, 0.1, 0.2, temperature=0.5).loss

        inputs = (t64(rng.normal(size=(5, 4))).requires_grad_(True), t64(rng.normal(size=(5, 4))).requires_grad_(True))
        assert torch.autograd.gradcheck(loss, inputs, rtol=1e-4, atol=1e-8)


class TestTotalLoss:
    def test_default_weights(self):
        parts = LossParts(*(t64(1.0) for _ in range(4)))
        assert float(total_loss(parts)) == pytest.approx(3.1)

    def test_all_zero(self):
        assert float(total_loss(LossParts(*(t64(0.0) for _ in range(4))))) == 0.0

    def test_linearity(self):
        parts = LossParts(t64(5.0), t64(5.0), t64(2.0), t64(5.0))
        weights = LossWeights(surface_field=0.0, correspondence=0.1, feature=0.0, confidence=0.0)
        assert float(total_loss(parts, weights)) == pytest.approx(0.2)

    def test_non_finite_names_term(self):
        parts = LossParts(t64(1.0), t64(float("nan")), t64(1.0), t64(1.0))
        with pytest.raises(NonFiniteLossError, match="surface_field") as info:
            total_loss(parts, step=17)
        assert info.value.step == 17
        assert math.isnan(info.value.parts["surface_field"])

    def test_negative_weights_rejected(self):
        with pytest.raises(InvalidArgumentError):
            LossWeights(correspondence=-0.1)


def test_compute_losses_combines_terms(rng):
    src = t64(rng.uniform(-0.5, 0.5, size=(6, 3)))
    tgt = src.clone()
    pred = CorrespondencePrediction(src, src + 0.01, t64([0.6] * 6), tgt, tgt - 0.01, t64([0.4] * 6),
                                    t64(rng.normal(size=(6, 8))), t64(rng.normal(size=(6, 8))))
    field = constant_field(0.5)
    sup = SupervisionBundle(t64([0.5] * 6), t64([0.5] * 6), IDENTITY, field, field)
    total, parts, feature = compute_losses(pred, sup, RegTrainConfig(), voxel_size=2.0 / 64)
    assert feature.n_positive == 12
    expected = parts.confidence + parts.surface_field + 0.1 * parts.correspondence + parts.feature
    assert float(total) == pytest.approx(float(expected))
    assert all(value >= 0.0 for value in parts.as_dict().values())
