"""Backbone, pooling units and the assembled model: shapes, init
determinism, weight sharing, and the composed-network gradient check
on a tiny configuration."""

from __future__ import annotations

import numpy as np
import pytest

from dmrn.backbone import Backbone, BackboneConfig, ResidualBlock
from dmrn.contrastive import LossConfig, total_loss
from dmrn.gradcheck import check_gradients
from dmrn.model import DmrnModel
from dmrn.rpu import ResidualPoolingUnit, embedding_dim
from dmrn.tensor import ShapeError, Tensor, using_dtype

TINY = BackboneConfig(input_size=32, stage_channels=(2, 2, 4, 4), blocks_per_stage=1)


class TestBackboneConfig:

    def test_default_stage_sizes(self):
        assert BackboneConfig().stage_sizes() == (16, 8, 4, 2)

    def test_stage_sizes_at_224(self):
        cfg = BackboneConfig(input_size=224)
        assert cfg.stage_sizes() == (56, 28, 14, 7)

    def test_indivisible_input_size_rejected_at_construction(self):
        with pytest.raises(ValueError):
            BackboneConfig(input_size=50)
        with pytest.raises(ValueError):
            BackboneConfig(input_size=0)

    def test_wrong_stage_count_rejected(self):
        with pytest.raises(ValueError):
            BackboneConfig(stage_channels=(8, 16, 32))

    def test_round_trip_dict(self):
        cfg = BackboneConfig(input_size=96, stage_channels=(4, 8, 16, 32), blocks_per_stage=1)
        assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


class TestBackbone:

    def test_stage_shapes_default_64(self):
        cfg = BackboneConfig(input_size=64, stage_channels=(4, 8, 16, 32), blocks_per_stage=1)
        net = Backbone(cfg, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 64, 64)).astype(np.float32))
        feats = net.forward_stages(x, training=True)
        assert [f.shape for f in feats] == [
            (2, 4, 16, 16), (2, 8, 8, 8), (2, 16, 4, 4), (2, 32, 2, 2)]

    def test_wrong_spatial_size_raises(self):
        net = Backbone(TINY, np.random.default_rng(0))
        x = Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32))
        with pytest.raises(ShapeError):
            net.forward_stages(x, training=False)

    def test_wrong_channel_count_raises(self):
        net = Backbone(TINY, np.random.default_rng(0))
        x = Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
        with pytest.raises(ShapeError):
            net.forward_stages(x, training=False)

    def test_projection_only_on_shape_change(self):
        rng = np.random.default_rng(0)
        changing = ResidualBlock(4, 8, stride=2, rng=rng)
        keeping = ResidualBlock(8, 8, stride=1, rng=rng)
        assert changing.projection is not None
        assert keeping.projection is None

    def test_he_init_statistics(self):
        # 3x3 conv from 16 channels: fan_in 144, std sqrt(2/144) ~ 0.1179.
        cfg = BackboneConfig(input_size=64, stage_channels=(16, 32, 64, 128))
        net = Backbone(cfg, np.random.default_rng(0))
        w = net.stages[3][0].conv1.weight.data  # 64 -> 128, fan_in 576
        expected_std = np.sqrt(2.0 / 576.0)
        assert abs(w.std() - expected_std) / expected_std < 0.05
        assert abs(w.mean()) < 0.01


class TestResidualPoolingUnit:

    def test_embedding_dims(self):
        assert embedding_dim(128) == 32
        assert embedding_dim(16) == 4
        assert embedding_dim(2) == 1
        assert embedding_dim(3) == 1  # floor, but never below 1

    def test_output_shape(self):
        unit = ResidualPoolingUnit(8, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).standard_normal((3, 8, 5, 5)).astype(np.float32))
        out = unit(x)
        assert out.shape == (3, 2)

    def test_channel_mismatch_raises(self):
        unit = ResidualPoolingUnit(8, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            unit(Tensor(np.zeros((1, 4, 5, 5), dtype=np.float32)))

    def test_no_activation_after_fc(self):
        # Embeddings must be able to go negative; relu after the fc
        # would forbid that.
        unit = ResidualPoolingUnit(4, np.random.default_rng(5))
        x = Tensor(np.random.default_rng(6).standard_normal((16, 4, 3, 3)).astype(np.float32))
        out = unit(x).data
        assert (out < 0).any()


class TestDmrnModel:

    def test_stage_embedding_shapes(self):
        model = DmrnModel(TINY, seed=0)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 32, 32)).astype(np.float32))
        stages = model.stage_embeddings(x, training=True)
        assert [s.shape for s in stages] == [(2, 1), (2, 1), (2, 1), (2, 1)]

    def test_default_embedding_dim_is_32(self):
        assert DmrnModel(BackboneConfig()).embedding_dim == 32

    def test_init_deterministic_for_seed(self):
        a = dict(DmrnModel(TINY, seed=7).named_state())
        b = dict(DmrnModel(TINY, seed=7).named_state())
        c = dict(DmrnModel(TINY, seed=8).named_state())
        assert a.keys() == b.keys() == c.keys()
        for name in a:
            assert np.array_equal(a[name], b[name]), name
        assert any(not np.array_equal(a[n], c[n]) for n in a)

    def test_embed_accepts_single_slice_and_batch(self):
        model = DmrnModel(TINY, seed=0)
        one = np.random.default_rng(0).standard_normal((32, 32)).astype(np.float32)
        single = model.embed(one)
        batch = model.embed(np.stack([one, one]))
        assert single.shape == (model.embedding_dim,)
        assert batch.shape == (2, model.embedding_dim)
        # Identical inputs in one batch are bit-identical; across batch
        # shapes BLAS may pick different kernels, so only close.
        assert np.array_equal(batch[0], batch[1])
        assert np.allclose(batch[0], single, atol=1e-5)

    def test_weight_sharing_is_structural(self):
        # Both branches run through the same object: same input through
        # either branch call gives bit-identical embeddings.
        model = DmrnModel(TINY, seed=1)
        x = np.random.default_rng(2).standard_normal((3, 1, 32, 32)).astype(np.float32)
        first = model.embed(x)
        second = model.embed(x)
        assert np.array_equal(first, second)

    def test_both_branches_feed_shared_gradients(self):
        model = DmrnModel(TINY, seed=3)
        rng = np.random.default_rng(4)
        x1 = Tensor(rng.standard_normal((2, 1, 32, 32)).astype(np.float32))
        x2 = Tensor(rng.standard_normal((2, 1, 32, 32)).astype(np.float32))
        labels = np.array([0.0, 1.0])
        model.zero_grads()
        e1 = model.stage_embeddings(x1, training=True)
        e2 = model.stage_embeddings(x2, training=True)
        total_loss(e1, e2, labels, LossConfig()).backward()
        grads = {name: t.grad.copy() for name, t in model.trainable()}
        assert all(np.all(np.isfinite(g)) for g in grads.values())
        # The stem weight sits on both branch paths, so it must collect
        # gradient signal.
        assert np.any(grads["backbone.stem.conv1.weight"] != 0)

    def test_state_names_are_stable_and_complete(self):
        model = DmrnModel(TINY, seed=0)
        names = [n for n, _ in model.named_state()]
        assert len(names) == len(set(names))
        trainable = {n for n, _ in model.trainable()}
        assert trainable <= set(names)
        assert any(n.endswith("running_mean") for n in names)
        assert "rpu4.fc.weight" in trainable

    def test_load_state_round_trip_and_mismatch(self):
        model = DmrnModel(TINY, seed=0)
        other = DmrnModel(TINY, seed=9)
        state = {n: a.copy() for n, a in model.named_state()}
        other.load_state(state)
        for (_, mine), (_, theirs) in zip(model.named_state(), other.named_state()):
            assert np.array_equal(mine, theirs)
        bad = dict(state)
        bad.popitem()
        with pytest.raises(ValueError):
            other.load_state(bad)


def test_composed_network_gradcheck_tiny():
    # End-to-end: twin branches, all four stages, contrastive loss.
    # Composed nets accumulate FD noise, so the bar is 1e-3.
    with using_dtype(np.float64):
        model = DmrnModel(TINY, seed=11)
        rng = np.random.default_rng(12)
        x1 = Tensor(rng.standard_normal((2, 1, 32, 32)))
        x2 = Tensor(rng.standard_normal((2, 1, 32, 32)))
        labels = np.array([0.0, 1.0])

        def loss():
            e1 = model.stage_embeddings(x1, training=True)
            e2 = model.stage_embeddings(x2, training=True)
            return total_loss(e1, e2, labels, LossConfig())

        params = dict(model.trainable())
        # Spot-check a representative subset; the full sweep is the
        # acceptance test's job.
        subset = {k: params[k] for k in [
            "backbone.stem.conv1.weight",
            "backbone.stage2.block0.conv1.weight",
            "backbone.stage4.block0.proj.weight",
            "backbone.stage4.block0.bn2.gamma",
            "rpu1.fc.weight",
            "rpu4.conv2.bias",
            "rpu4.fc.bias",
        ]}
        errors = check_gradients(loss, subset)
        for name, err in errors.items():
            assert err < 1e-3, f"{name}: {err:.3e}"
