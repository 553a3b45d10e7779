import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from structseg.errors import ShapeError
from structseg.objectives import (LossConfig, combined_loss, dice_loss,
                                  focal_loss, volume_miou)

from conftest import central_difference, rel_err


class TestFocal:
    def test_half_prob_positive_gamma2(self):
        probs = torch.full((4, 4), 0.5, dtype=torch.float64)
        target = torch.ones(4, 4, dtype=torch.float64)
        expected = 0.25 * math.log(2.0)
        assert focal_loss(probs, target, gamma=2.0).item() == pytest.approx(expected, abs=1e-9)

    def test_gamma_zero_is_bce(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            probs = torch.rand(8, 8, generator=g, dtype=torch.float64) * 0.98 + 0.01
            target = (torch.rand(8, 8, generator=g) > 0.5).to(torch.float64)
            bce = torch.nn.functional.binary_cross_entropy(probs, target)
            assert focal_loss(probs, target, gamma=0.0).item() == pytest.approx(
                bce.item(), abs=1e-9)

    def test_perfect_prediction_limit(self):
        probs = torch.full((4, 4), 1.0 - 1e-9, dtype=torch.float64)
        target = torch.ones(4, 4, dtype=torch.float64)
        assert focal_loss(probs, target, gamma=2.0).item() < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            focal_loss(torch.rand(3, 3), torch.ones(4, 4))

    @given(st.integers(min_value=0, max_value=9999))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        probs = torch.rand(5, 5, generator=g)
        target = (torch.rand(5, 5, generator=g) > 0.5).float()
        assert focal_loss(probs, target, gamma=2.0).item() >= 0.0


class TestDice:
    def test_identical_masks(self):
        m = torch.zeros(10, 10, dtype=torch.float64)
        m[:4, :4] = 1.0
        assert dice_loss(m, m, smooth=1.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_masks(self):
        p = torch.zeros(20, 20, dtype=torch.float64)
        y = torch.zeros(20, 20, dtype=torch.float64)
        p.view(-1)[:100] = 1.0
        y.view(-1)[100:200] = 1.0
        expected = 1.0 - 1.0 / 201.0
        assert dice_loss(p, y, smooth=1.0).item() == pytest.approx(expected, abs=1e-9)

    def test_half_overlap(self):
        # p covers exactly half of y, equal areas A -> loss 0.5 + O(smooth/A)
        a = 2000
        p = torch.zeros(100, 100, dtype=torch.float64)
        y = torch.zeros(100, 100, dtype=torch.float64)
        y.view(-1)[:a] = 1.0
        p.view(-1)[a // 2:a // 2 + a] = 1.0
        loss = dice_loss(p, y, smooth=1.0).item()
        assert loss == pytest.approx(0.5, abs=2.0 / a)

    @given(st.integers(min_value=0, max_value=9999))
    @settings(max_examples=50, deadline=None)
    def test_bounded(self, seed):
        g = torch.Generator().manual_seed(seed)
        p = torch.rand(6, 6, generator=g)
        y = (torch.rand(6, 6, generator=g) > 0.5).float()
        loss = dice_loss(p, y, smooth=0.5).item()
        assert 0.0 <= loss <= 1.0


class TestCombined:
    def test_focal_only(self):
        logits = torch.randn(5, 5, dtype=torch.float64)
        target = (torch.rand(5, 5) > 0.5).double()
        cfg = LossConfig(w_focal=1.0, w_dice=0.0)
        expected = focal_loss(torch.sigmoid(logits), target, cfg.gamma)
        assert combined_loss(logits, target, cfg).item() == pytest.approx(expected.item())

    def test_perfect_prediction_near_zero(self):
        target = torch.zeros(8, 8, dtype=torch.float64)
        target[2:5, 2:5] = 1.0
        logits = torch.where(target > 0, 30.0, -30.0).double()
        assert combined_loss(logits, target, LossConfig()).item() < 0.05

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        logits = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
        target = (torch.rand(4, 4) > 0.5).double()
        cfg = LossConfig()

        def loss():
            return combined_loss(logits, target, cfg)

        loss().backward()
        for idx in range(16):
            num = central_difference(loss, logits.data, idx)
            assert rel_err(logits.grad.view(-1)[idx].item(), num) < 1e-6

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            LossConfig(w_focal=0.0, w_dice=0.0)
        with pytest.raises(ValueError):
            LossConfig(gamma=-1.0)


class TestVolumeMiou:
    def test_perfect_agreement(self):
        gt = np.random.default_rng(0).integers(0, 4, size=(4, 8, 8))
        _, miou = volume_miou(gt, gt, num_classes=3)
        assert miou == 1.0

    def test_missed_class(self):
        gt = np.zeros((2, 4, 4), dtype=int)
        gt[0, 0, 0] = 1
        pred = np.zeros_like(gt)
        ious, _ = volume_miou(pred, gt, num_classes=1)
        assert ious[0] == 0.0

    def test_hand_counted_overlap(self):
        gt = np.zeros((1, 4, 4), dtype=int)
        pred = np.zeros_like(gt)
        gt[0].flat[:8] = 1
        pred[0].flat[4:12] = 1
        ious, miou = volume_miou(pred, gt, num_classes=1)
        assert ious[0] == pytest.approx(4.0 / 12.0)
        assert miou == pytest.approx(1.0 / 3.0)

    def test_absent_class_convention(self):
        gt = np.zeros((1, 2, 2), dtype=int)
        pred = np.zeros_like(gt)
        ious, miou = volume_miou(pred, gt, num_classes=2)
        assert list(ious) == [1.0, 1.0]
        assert miou == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a = rng.integers(0, 3, size=(3, 5, 5))
        b = rng.integers(0, 3, size=(3, 5, 5))
        assert volume_miou(a, b, 2)[1] == volume_miou(b, a, 2)[1]

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(4)
        a = rng.integers(0, 4, size=(2, 6, 6))
        b = rng.integers(0, 4, size=(2, 6, 6))
        perm = np.array([0, 3, 1, 2])  # background fixed
        ious, miou = volume_miou(a, b, 3)
        ious_p, miou_p = volume_miou(perm[a], perm[b], 3)
        assert miou_p == pytest.approx(miou)
        assert sorted(ious_p) == pytest.approx(sorted(ious))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            volume_miou(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 1)
