import math

import numpy as np
import pytest

from arnet import tensor as T
from arnet.network import (BOUNDARY_WEIGHT, ARNet, ModelConfig, PredictionSet, bce_loss, dice_loss,
                           iou_loss, total_loss)
from arnet.priors import boundary_gt
from arnet.tensor import ShapeError, Tensor

G4 = np.array([1.0, 1, 0, 0]).reshape(1, 1, 2, 2)


@pytest.fixture(scope="module")
def net():
    return ARNet(seed=0)


def _fixed_preds(p_logits, b_prob):
    return PredictionSet(*(Tensor(np.asarray(p, dtype=float)) for p in p_logits), B_full=Tensor(b_prob))


class TestForward:
    def test_desk_shapes(self, net):
        with T.no_grad():
            out = net(Tensor(np.zeros((1, 3, 64, 64))))
        assert [p.shape for p in out.masks] == [(1, 1, 64, 64)] * 3
        assert out.B_full.shape == (1, 1, 64, 64)
        assert out.B.shape == out.R.shape == (1, 1, 16, 16)

    def test_non_square(self, net):
        with T.no_grad():
            out = net(Tensor(np.zeros((2, 3, 64, 96))))
        assert out.P1.shape == (2, 1, 64, 96)

    def test_divisibility(self, net):
        with pytest.raises(ShapeError):
            net(Tensor(np.zeros((1, 3, 60, 64))))

    def test_deterministic(self):
        x = Tensor(np.random.default_rng(3).random((1, 3, 64, 64)))
        outs = []
        for _ in range(2):
            m = ARNet(seed=4)
            m.eval()
            with T.no_grad():
                outs.append(m(x).P1.data)
        assert np.array_equal(*outs)

    def test_seed_changes_init(self):
        a, b = ARNet(seed=0).export_state(), ARNet(seed=1).export_state()
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    @pytest.mark.parametrize("flag", ["no_fap", "no_hga", "no_re", "no_be", "no_mse", "no_ciim",
                                      "se_instead_of_fap"])
    def test_ablations_forward(self, flag):
        m = ARNet(ModelConfig(**{flag: True}), seed=0)
        with T.no_grad():
            out = m(Tensor(np.random.default_rng(0).random((1, 3, 64, 64))))
        assert out.P1.shape == (1, 1, 64, 64)
        assert (out.B_full is None) == (flag == "no_be")
        assert (out.R is None) == (flag == "no_re")

    def test_hga_mode_flag(self):
        m = ARNet(ModelConfig(hga_mode="dot_attention"))
        assert all(c.hga.mode == "dot_attention" for c in m.ciim)

    def test_checkpoint_namespace(self, net):
        keys = net.export_state()
        prefixes = {k.split(".")[0] for k in keys}
        assert prefixes == {"backbone", "re", "be", "ciim1", "ciim2", "ciim3", "mse1", "mse2", "mse3",
                            "head1", "head2", "head3"}

    def test_state_roundtrip(self, net):
        other = ARNet(seed=9)
        other.import_state(net.export_state())
        a, b = net.export_state(), other.export_state()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestLoss:
    def test_four_pixel_hand_sum(self):
        p = [np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 1.0), np.array([2.0, -1, 0.5, -3]).reshape(1, 1, 2, 2)]
        b = np.array([0.9, 0.2, 0.6, 0.1]).reshape(1, 1, 2, 2)
        gb = np.array([1.0, 0, 1, 1]).reshape(1, 1, 2, 2)
        parts = total_loss(_fixed_preds(p, b), G4, gb)

        def sig(z):
            return 1 / (1 + math.exp(-z))
        g = G4.ravel()
        hand = 0.0
        for logits in p:
            s = [sig(z) for z in logits.ravel()]
            hand += -sum(gi * math.log(si) + (1 - gi) * math.log(1 - si) for si, gi in zip(s, g)) / 4
            inter = sum(si * gi for si, gi in zip(s, g))
            hand += 1 - (inter + 1) / (sum(s) + sum(g) - inter + 1)
        bb, gg = b.ravel(), gb.ravel()
        dice = 1 - (2 * sum(bb * gg) + 1) / (sum(bb) + sum(gg) + 1)
        hand += 3 * dice
        assert parts.total.item() == pytest.approx(hand, abs=1e-12)
        assert parts.dice == pytest.approx(dice, abs=1e-12)
        assert parts.total.item() == pytest.approx(parts.bce + parts.iou + BOUNDARY_WEIGHT * parts.dice, abs=1e-12)

    def test_lambda_is_three(self):
        b = np.array([0.9, 0.2, 0.6, 0.1]).reshape(1, 1, 2, 2)
        gb = np.array([1.0, 0, 1, 1]).reshape(1, 1, 2, 2)
        p = [np.zeros((1, 1, 2, 2))] * 3
        full = total_loss(_fixed_preds(p, b), G4, gb).total.item()
        no_b = total_loss(PredictionSet(*(Tensor(x) for x in p), B_full=None), G4).total.item()
        d = dice_loss(Tensor(b), gb).item()
        assert BOUNDARY_WEIGHT == 3.0
        assert full - no_b == pytest.approx(3 * d, abs=1e-12)

    def test_uniform_half(self):
        z = Tensor(np.zeros((1, 1, 2, 2)))
        assert bce_loss(z, G4).item() == pytest.approx(math.log(2), abs=1e-15)
        assert iou_loss(z, G4).item() == pytest.approx(1 - 2 / 4, abs=1e-15)

    def test_perfect_prediction(self):
        g = np.zeros((1, 1, 8, 8))
        g[..., 2:6, 2:6] = 1
        gb = boundary_gt(g)
        logits = np.where(g > 0, 20.0, -20.0)
        parts = total_loss(_fixed_preds([logits] * 3, gb), g, gb)
        assert parts.total.item() < 1e-3

    def test_term_counts(self):
        parts = total_loss(_fixed_preds([np.zeros((1, 1, 2, 2))] * 3, np.full((1, 1, 2, 2), 0.5)), G4)
        assert (parts.n_mask_terms, parts.n_boundary_terms) == (3, 1)

    def test_batch_mean_of_per_sample_terms(self):
        g = np.concatenate([G4, 1 - G4])
        p = np.concatenate([np.full((1, 1, 2, 2), 0.3), np.full((1, 1, 2, 2), -1.2)])
        both = iou_loss(Tensor(p), g).item()
        each = [iou_loss(Tensor(p[i:i + 1]), g[i:i + 1]).item() for i in range(2)]
        assert both == pytest.approx(sum(each) / 2, abs=1e-15)

    def test_boundary_computed_when_missing(self):
        g = np.zeros((1, 1, 6, 6))
        g[..., 1:4, 1:4] = 1
        b = np.full((1, 1, 6, 6), 0.4)
        a = total_loss(_fixed_preds([np.zeros_like(g)] * 3, b), g).total.item()
        c = total_loss(_fixed_preds([np.zeros_like(g)] * 3, b), g, boundary_gt(g)).total.item()
        assert a == c
