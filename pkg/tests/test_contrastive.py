"""Contrastive loss: frozen hand values, config validation, gradients
at the margin clamp, and term counting."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmrn.contrastive import LossConfig, pair_loss, stage_distance, term_count, total_loss
from dmrn.tensor import Tensor, using_dtype


def as_distance(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestPairLoss:

    def test_different_class_inside_margin(self):
        # y=1, D=0.4, margin 1: 0.5 * (1 - 0.4)^2 = 0.18
        loss = pair_loss(as_distance([0.4]), np.array([1.0]), margin=1.0)
        assert loss.data[0] == pytest.approx(0.18)

    def test_same_class(self):
        # y=0, D=0.5: 0.5 * 0.25 = 0.125
        loss = pair_loss(as_distance([0.5]), np.array([0.0]), margin=1.0)
        assert loss.data[0] == pytest.approx(0.125)

    def test_different_class_beyond_margin_is_zero(self):
        loss = pair_loss(as_distance([1.2]), np.array([1.0]), margin=1.0)
        assert loss.data[0] == pytest.approx(0.0)

    def test_same_class_identical_pair_is_zero(self):
        loss = pair_loss(as_distance([0.0]), np.array([0.0]), margin=1.0)
        assert loss.data[0] == pytest.approx(0.0)

    def test_mixed_batch(self):
        d = as_distance([0.4, 0.5, 1.2, 0.0])
        y = np.array([1.0, 0.0, 1.0, 0.0])
        loss = pair_loss(d, y, margin=1.0)
        assert np.allclose(loss.data, [0.18, 0.125, 0.0, 0.0])

    def test_gradient_beyond_margin_is_zero(self):
        d = as_distance([1.5])
        pair_loss(d, np.array([1.0]), margin=1.0).sum().backward()
        assert d.grad[0] == pytest.approx(0.0)

    def test_gradient_inside_margin_pushes_apart(self):
        # d/dD of 0.5*(m - D)^2 = -(m - D) = -0.6 at D=0.4.
        d = as_distance([0.4])
        pair_loss(d, np.array([1.0]), margin=1.0).sum().backward()
        assert d.grad[0] == pytest.approx(-0.6)

    def test_gradient_same_class_pulls_together(self):
        # d/dD of 0.5*D^2 = D.
        d = as_distance([0.7])
        pair_loss(d, np.array([0.0]), margin=1.0).sum().backward()
        assert d.grad[0] == pytest.approx(0.7)

    def test_bad_labels_rejected(self):
        with pytest.raises(ValueError):
            pair_loss(as_distance([0.5]), np.array([2.0]))

    def test_nonpositive_margin_rejected(self):
        with pytest.raises(ValueError):
            pair_loss(as_distance([0.5]), np.array([1.0]), margin=0.0)

    @settings(max_examples=60, deadline=None)
    @given(d=st.floats(0.0, 5.0), y=st.sampled_from([0.0, 1.0]),
           margin=st.floats(0.1, 3.0))
    def test_loss_is_nonnegative_and_clamped(self, d, y, margin):
        value = pair_loss(as_distance([d]), np.array([y]), margin=margin).data[0]
        assert value >= 0.0
        if y == 1.0 and d >= margin:
            assert value == pytest.approx(0.0)
        if y == 0.0:
            assert value == pytest.approx(0.5 * d * d, rel=1e-6)


class TestLossConfig:

    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.margin == 1.0
        assert cfg.stages_used == (1, 2, 3, 4)
        assert cfg.weights() == (1.0, 1.0, 1.0, 1.0)

    def test_single_stage_ablation(self):
        cfg = LossConfig(stages_used=(4,))
        assert cfg.stages_used == (4,)
        assert cfg.weights() == (1.0,)

    def test_invalid_stage_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(stages_used=(0, 1))
        with pytest.raises(ValueError):
            LossConfig(stages_used=(1, 5))

    def test_empty_stages_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(stages_used=())

    def test_duplicate_or_unsorted_stages_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(stages_used=(1, 1, 2))
        with pytest.raises(ValueError):
            LossConfig(stages_used=(2, 1))

    def test_weight_length_must_match(self):
        with pytest.raises(ValueError):
            LossConfig(stages_used=(1, 2), stage_weights=(1.0,))

    def test_round_trip_dict(self):
        cfg = LossConfig(margin=0.5, stages_used=(2, 4), stage_weights=(1.0, 2.0))
        assert LossConfig.from_dict(cfg.to_dict()) == cfg


class TestTotalLoss:

    def make_embeddings(self, seed, n=3, dims=(2, 3, 4, 5)):
        rng = np.random.default_rng(seed)
        return [Tensor(rng.standard_normal((n, d)), requires_grad=True) for d in dims]

    def test_sums_over_stages_and_pairs(self):
        with using_dtype(np.float64):
            e1 = self.make_embeddings(0)
            e2 = self.make_embeddings(1)
            labels = np.array([0.0, 1.0, 1.0])
            total = total_loss(e1, e2, labels, LossConfig())
            expected = 0.0
            for a, b in zip(e1, e2):
                d = np.linalg.norm(a.data - b.data, axis=1)
                expected += sum(
                    0.5 * d[i] ** 2 if labels[i] == 0 else 0.5 * max(0.0, 1.0 - d[i]) ** 2
                    for i in range(3))
            assert total.item() == pytest.approx(expected)

    def test_single_stage_uses_only_final_stage(self):
        with using_dtype(np.float64):
            e1 = self.make_embeddings(2)
            e2 = self.make_embeddings(3)
            labels = np.array([0.0, 1.0, 0.0])
            total = total_loss(e1, e2, labels, LossConfig(stages_used=(4,)))
            d = np.linalg.norm(e1[3].data - e2[3].data, axis=1)
            expected = sum(
                0.5 * d[i] ** 2 if labels[i] == 0 else 0.5 * max(0.0, 1.0 - d[i]) ** 2
                for i in range(3))
            assert total.item() == pytest.approx(expected)

    def test_stage_weights_scale_contributions(self):
        with using_dtype(np.float64):
            e1 = self.make_embeddings(4)
            e2 = self.make_embeddings(5)
            labels = np.array([0.0, 0.0, 1.0])
            base4 = total_loss(e1, e2, labels, LossConfig(stages_used=(4,))).item()
            base2 = total_loss(e1, e2, labels, LossConfig(stages_used=(2,))).item()
            combined = total_loss(e1, e2, labels,
                                  LossConfig(stages_used=(2, 4), stage_weights=(3.0, 1.0))).item()
            assert combined == pytest.approx(3.0 * base2 + base4)

    def test_missing_stage_embedding_rejected(self):
        e = self.make_embeddings(6)
        labels = np.zeros(3)
        with pytest.raises(ValueError):
            total_loss(e[:2], e[:2], labels, LossConfig())
        broken = list(e)
        broken[3] = None
        with pytest.raises(ValueError):
            total_loss(broken, e, labels, LossConfig())

    def test_gradients_flow_to_both_branches(self):
        with using_dtype(np.float64):
            e1 = self.make_embeddings(7)
            e2 = self.make_embeddings(8)
            labels = np.array([0.0, 1.0, 0.0])
            total = total_loss(e1, e2, labels, LossConfig())
            total.backward()
            for t in e1 + e2:
                assert t.grad is not None
                assert np.any(t.grad != 0)


def test_stage_distance_is_rowwise_l2():
    a = Tensor(np.array([[3.0, 0.0], [0.0, 0.0]]))
    b = Tensor(np.array([[0.0, 4.0], [0.0, 0.0]]))
    assert np.allclose(stage_distance(a, b).data, [5.0, 0.0])


class TestTermCount:

    def test_full_multiscale(self):
        assert term_count(LossConfig(), 10) == 40

    def test_single_stage(self):
        assert term_count(LossConfig(stages_used=(4,)), 10) == 10

    def test_zero_pairs(self):
        assert term_count(LossConfig(), 0) == 0

    def test_negative_pairs_rejected(self):
        with pytest.raises(ValueError):
            term_count(LossConfig(), -1)
