"""Loss kernels against brute-force element-loop oracles.

The oracles below are deliberately dumb Python loops over tensor entries and
never share code with the vectorized implementations they check.
"""

import math

import pytest
import torch

from segkd.errors import ConfigError, DomainError, NumericsError, ShapeError
from segkd.losses import (
    DICE_SMOOTH,
    combined_loss,
    dice_loss,
    dice_metric,
    mse_loss,
    perceptual_loss,
)


def loop_mse(teacher, student):
    total, n = 0.0, 0
    for b in range(teacher.shape[0]):
        for c in range(teacher.shape[1]):
            for h in range(teacher.shape[2]):
                for w in range(teacher.shape[3]):
                    total += (float(teacher[b, c, h, w]) - float(student[b, c, h, w])) ** 2
                    n += 1
    return total / n


def loop_perceptual(teacher_feats, student_feats):
    total = 0.0
    for t, s in zip(teacher_feats, student_feats):
        batch, channels, height, width = t.shape
        layer = 0.0
        for b in range(batch):
            acc = 0.0
            for c in range(channels):
                for h in range(height):
                    for w in range(width):
                        acc += (float(t[b, c, h, w]) - float(s[b, c, h, w])) ** 2
            layer += acc / (channels * height * width)
        total += layer / batch
    return total


def loop_dice_loss(pred, truth, smooth=DICE_SMOOTH):
    inter = sump = sumg = 0.0
    for b in range(pred.shape[0]):
        for h in range(pred.shape[2]):
            for w in range(pred.shape[3]):
                p = float(pred[b, 0, h, w])
                g = float(truth[b, 0, h, w])
                inter += p * g
                sump += p
                sumg += g
    return 1.0 - (2.0 * inter + smooth) / (sump + sumg + smooth)


def loop_dice_metric(pred, truth, threshold=0.5):
    scores = []
    for b in range(pred.shape[0]):
        p_set = set()
        g_set = set()
        for h in range(pred.shape[2]):
            for w in range(pred.shape[3]):
                if float(pred[b, 0, h, w]) > threshold:
                    p_set.add((h, w))
                if float(truth[b, 0, h, w]) == 1.0:
                    g_set.add((h, w))
        if not p_set and not g_set:
            scores.append(1.0)
        else:
            scores.append(2 * len(p_set & g_set) / (len(p_set) + len(g_set)))
    return sum(scores) / len(scores)


class TestMseLoss:
    def test_identity_is_zero(self):
        t = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        assert mse_loss(t, t.clone()).item() == 0.0

    def test_hand_computed_single_element(self):
        t = torch.tensor([[[[2.0]]]], dtype=torch.float64)
        s = torch.tensor([[[[0.0]]]], dtype=torch.float64)
        assert mse_loss(t, s).item() == pytest.approx(4.0, abs=0)

    def test_matches_loop_oracle(self):
        gen = torch.Generator().manual_seed(42)
        t = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)
        s = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)
        assert mse_loss(t, s).item() == pytest.approx(loop_mse(t, s), abs=1e-12)

    def test_symmetry(self):
        gen = torch.Generator().manual_seed(7)
        for _ in range(5):
            a = torch.randn(1, 2, 3, 5, generator=gen, dtype=torch.float64)
            b = torch.randn(1, 2, 3, 5, generator=gen, dtype=torch.float64)
            assert mse_loss(a, b).item() == pytest.approx(mse_loss(b, a).item(), abs=0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))

    def test_non_finite(self):
        t = torch.zeros(1, 1, 2, 2)
        bad = t.clone()
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericsError):
            mse_loss(t, bad)
        bad[0, 0, 0, 0] = float("inf")
        with pytest.raises(NumericsError):
            mse_loss(bad, t)

    def test_rejects_non_4d(self):
        with pytest.raises(ShapeError):
            mse_loss(torch.zeros(3, 3), torch.zeros(3, 3))


class TestPerceptualLoss:
    def test_identity_lists_zero(self):
        gen = torch.Generator().manual_seed(0)
        feats = [torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64) for _ in range(3)]
        assert perceptual_loss(feats, [f.clone() for f in feats]).item() == 0.0

    def test_hand_computed_single_cell(self):
        t = [torch.tensor([[[[3.0]]]], dtype=torch.float64)]
        s = [torch.tensor([[[[1.0]]]], dtype=torch.float64)]
        assert perceptual_loss(t, s).item() == pytest.approx(4.0, abs=0)

    def test_matches_loop_oracle_two_layers(self):
        gen = torch.Generator().manual_seed(13)
        t = [
            torch.randn(1, 2, 2, 2, generator=gen, dtype=torch.float64),
            torch.randn(1, 3, 1, 1, generator=gen, dtype=torch.float64),
        ]
        s = [
            torch.randn(1, 2, 2, 2, generator=gen, dtype=torch.float64),
            torch.randn(1, 3, 1, 1, generator=gen, dtype=torch.float64),
        ]
        assert perceptual_loss(t, s).item() == pytest.approx(loop_perceptual(t, s), abs=1e-12)

    def test_batch_size_independence(self):
        # duplicating every sample must not change the loss
        gen = torch.Generator().manual_seed(3)
        t = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        s = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        single = perceptual_loss([t], [s]).item()
        doubled = perceptual_loss([torch.cat([t, t])], [torch.cat([s, s])]).item()
        assert doubled == pytest.approx(single, rel=1e-12)

    def test_empty_list_is_config_error(self):
        with pytest.raises(ConfigError):
            perceptual_loss([], [])

    def test_per_layer_shape_mismatch(self):
        t = [torch.zeros(1, 2, 2, 2)]
        s = [torch.zeros(1, 2, 2, 3)]
        with pytest.raises(ShapeError):
            perceptual_loss(t, s)

    def test_length_mismatch(self):
        one = torch.zeros(1, 1, 1, 1)
        with pytest.raises(ShapeError):
            perceptual_loss([one, one], [one])
        # one side empty falls under the empty-list contract
        with pytest.raises(ConfigError):
            perceptual_loss([one], [])


class TestCombinedLoss:
    @staticmethod
    def _rand_inputs(seed=21):
        gen = torch.Generator().manual_seed(seed)
        t = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        s = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        tf = [torch.randn(2, 2, 3, 3, generator=gen, dtype=torch.float64) for _ in range(2)]
        sf = [torch.randn(2, 2, 3, 3, generator=gen, dtype=torch.float64) for _ in range(2)]
        return t, s, tf, sf

    def test_zero_case(self):
        t = torch.randn(1, 2, 2, 2, dtype=torch.float64)
        result = combined_loss(t, t.clone(), [t], [t.clone()])
        assert result.item() == 0.0
        assert result.component_items() == {"mse": 0.0, "perceptual": 0.0}

    def test_additivity_of_hand_cases(self):
        t = torch.tensor([[[[2.0]]]], dtype=torch.float64)
        s = torch.tensor([[[[0.0]]]], dtype=torch.float64)
        tf = [torch.tensor([[[[3.0]]]], dtype=torch.float64)]
        sf = [torch.tensor([[[[1.0]]]], dtype=torch.float64)]
        assert combined_loss(t, s, tf, sf).item() == pytest.approx(8.0, abs=0)

    def test_equals_sum_of_sub_losses(self):
        t, s, tf, sf = self._rand_inputs()
        total = combined_loss(t, s, tf, sf)
        expected = mse_loss(t, s).item() + perceptual_loss(tf, sf).item()
        assert total.item() == pytest.approx(expected, abs=1e-12)

    def test_components_sum_to_total(self):
        t, s, tf, sf = self._rand_inputs(5)
        for weights in ((1.0, 1.0), (0.3, 2.0)):
            result = combined_loss(t, s, tf, sf, mse_weight=weights[0],
                                   perceptual_weight=weights[1])
            comp_sum = sum(result.component_items().values())
            assert result.item() == pytest.approx(comp_sum, rel=1e-12)

    def test_propagates_sub_loss_errors(self):
        t, s, tf, sf = self._rand_inputs(9)
        with pytest.raises(ShapeError):
            combined_loss(t, s[:, :, :, :2], tf, sf)
        with pytest.raises(ConfigError):
            combined_loss(t, s, [], [])


class TestDiceLoss:
    def test_perfect_overlap_near_zero(self):
        ones = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        assert dice_loss(ones, ones.clone()).item() <= 1e-7

    def test_disjoint_near_one(self):
        pred = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        truth = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        expected = 1.0 - DICE_SMOOTH / (16.0 + DICE_SMOOTH)
        assert dice_loss(pred, truth).item() == pytest.approx(expected, abs=1e-12)

    def test_matches_pixel_loop_oracle(self):
        gen = torch.Generator().manual_seed(99)
        pred = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64)
        truth = (torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) > 0.5).double()
        assert dice_loss(pred, truth).item() == pytest.approx(
            loop_dice_loss(pred, truth), abs=1e-12
        )

    def test_range_invariant(self):
        gen = torch.Generator().manual_seed(4)
        for _ in range(10):
            pred = torch.rand(2, 1, 5, 5, generator=gen, dtype=torch.float64)
            truth = (torch.rand(2, 1, 5, 5, generator=gen) > 0.6).double()
            value = dice_loss(pred, truth).item()
            assert 0.0 <= value <= 1.0

    def test_binary_self_dice_within_smooth_bound(self):
        gen = torch.Generator().manual_seed(11)
        g = (torch.rand(1, 1, 6, 6, generator=gen) > 0.4).double()
        assert g.sum() > 0
        assert dice_loss(g, g).item() <= DICE_SMOOTH

    def test_pred_out_of_range(self):
        truth = torch.zeros(1, 1, 2, 2)
        with pytest.raises(DomainError):
            dice_loss(torch.full((1, 1, 2, 2), 1.5), truth)
        with pytest.raises(DomainError):
            dice_loss(torch.full((1, 1, 2, 2), -0.1), truth)

    def test_truth_must_be_binary(self):
        pred = torch.zeros(1, 1, 2, 2)
        with pytest.raises(DomainError):
            dice_loss(pred, torch.full((1, 1, 2, 2), 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


class TestDiceMetric:
    def test_identical_binary_masks(self):
        gen = torch.Generator().manual_seed(17)
        m = (torch.rand(3, 1, 6, 6, generator=gen) > 0.5).float()
        assert dice_metric(m, m.clone()) == pytest.approx(1.0, abs=0)

    def test_hand_counted_half_cover(self):
        truth = torch.zeros(1, 1, 4, 4)
        truth[0, 0, :2, :] = 1.0  # |G| = 8
        pred = torch.zeros(1, 1, 4, 4)
        pred[0, 0, 0, :] = 1.0  # |P| = 4, all inside G
        assert dice_metric(pred, truth) == pytest.approx(2 * 4 / (4 + 8), abs=1e-12)

    def test_hundred_random_pairs_match_counting_oracle(self):
        gen = torch.Generator().manual_seed(123)
        for _ in range(100):
            pred = torch.rand(1, 1, 16, 16, generator=gen)
            truth = (torch.rand(1, 1, 16, 16, generator=gen) > 0.5).float()
            got = dice_metric(pred, truth)
            want = loop_dice_metric(pred, truth)
            assert got == pytest.approx(want, abs=1e-9)

    def test_empty_vs_empty_is_one(self):
        z = torch.zeros(1, 1, 4, 4)
        assert dice_metric(z, z.clone()) == 1.0

    def test_batch_averages_per_image(self):
        pred = torch.zeros(2, 1, 2, 2)
        truth = torch.zeros(2, 1, 2, 2)
        pred[0], truth[0] = 1.0, 1.0  # image 0: dice 1
        truth[1, 0, 0, 0] = 1.0  # image 1: empty pred vs 1 px -> dice 0
        assert dice_metric(pred, truth) == pytest.approx(0.5, abs=1e-12)

    def test_spatial_permutation_invariance(self):
        gen = torch.Generator().manual_seed(31)
        pred = torch.rand(1, 1, 8, 8, generator=gen)
        truth = (torch.rand(1, 1, 8, 8, generator=gen) > 0.5).float()
        base = dice_metric(pred, truth)
        for seed in range(5):
            perm = torch.randperm(64, generator=torch.Generator().manual_seed(seed))
            p2 = pred.reshape(1, 1, -1)[:, :, perm].reshape(1, 1, 8, 8)
            t2 = truth.reshape(1, 1, -1)[:, :, perm].reshape(1, 1, 8, 8)
            assert dice_metric(p2, t2) == pytest.approx(base, abs=1e-12)

    def test_threshold_is_strictly_greater(self):
        pred = torch.full((1, 1, 2, 2), 0.5)
        truth = torch.ones(1, 1, 2, 2)
        # 0.5 > 0.5 is false -> empty prediction
        assert dice_metric(pred, truth, threshold=0.5) == 0.0
        assert dice_metric(pred, truth, threshold=0.4) == 1.0


def test_loss_value_total_stays_differentiable():
    t = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    s = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    out = mse_loss(t, s)
    out.total.backward()
    assert s.grad is not None
    assert torch.isfinite(s.grad).all()
