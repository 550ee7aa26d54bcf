"""Tests for picknet.model (architecture, forward/backward contracts, cost model)."""

from itertools import permutations

import numpy as np
import pytest
from scipy.signal import correlate2d

from conftest import randomize_bn, tiny_config
from picknet.dsp import FeaturePatch
from picknet.error_handler import InvalidConfigError, InvalidInputError, InvalidStateError
from picknet.evaluation import affine_fit
from picknet.layers import BN_EPS, MacCounter
from picknet.model import (PATCH_HEIGHT, ChannelPosteriors, LayerSpec, ModelConfig, PickNet, default_config,
                           mac_count, param_shapes, picknet_backward, picknet_forward)


def _patches(M, seed=0, dim=8):
    return np.random.default_rng(seed).standard_normal((M, PATCH_HEIGHT, dim))


def _reference_ops(params):
    """tiny_config の各演算を素朴に書いたもの（eval モード）"""
    def conv(h, i):
        k, b = params[f"layers.{i}.kernel"], params[f"layers.{i}.bias"]
        return np.stack([sum(correlate2d(h[c], k[o, c], mode="same") for c in range(h.shape[0])) + b[o]
                         for o in range(k.shape[0])])

    def bn(h, i):
        g, bt = params[f"layers.{i}.gamma"], params[f"layers.{i}.beta"]
        rm, rv = params[f"layers.{i}.running_mean"], params[f"layers.{i}.running_var"]
        return ((h - rm[:, None, None]) / np.sqrt(rv[:, None, None] + BN_EPS)) * g[:, None, None] + bt[:, None, None]

    def pool(h):
        C, H, W = h.shape
        return h[:, :H // 2 * 2, :W // 2 * 2].reshape(C, H // 2, 2, W // 2, 2).max(axis=(2, 4))

    return conv, bn, pool


def _reference_posteriors(model, xs):
    conv, bn, pool = _reference_ops(model.params)
    n_shared = model.config.layers[4].n_shared
    stage1 = [conv(pool(np.maximum(bn(conv(x[None], 0), 1), 0)), 4) for x in xs]
    if n_shared:
        mean = np.mean([y[-n_shared:] for y in stage1], axis=0)
        stage1 = [np.concatenate([y[:-n_shared], mean]) for y in stage1]
    logits = []
    for y in stage1:
        h = pool(np.maximum(bn(y, 5), 0)).reshape(-1)
        h = np.maximum(_dense(model.params, 9, h), 0)
        logits.append(_dense(model.params, 11, h)[0])
    z = np.array(logits)
    e = np.exp(z - z.max())
    return e / e.sum()


def _dense(params, i, h):
    return params[f"layers.{i}.weight"] @ h + params[f"layers.{i}.bias"]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class TestModelConfig:
    def test_default_shapes(self):
        cfg = default_config("logmel")
        shapes = param_shapes(cfg)
        assert cfg.input_shape == (41, 80)
        assert shapes["layers.0.kernel"] == (16, 1, 3, 3)
        assert shapes["layers.15.weight"] == (1, 64)
        assert cfg.layers[4].n_shared == 4

    def test_amplitude_input(self):
        assert default_config("amplitude").input_shape == (41, 257)

    def test_final_layer_must_be_scalar(self):
        with pytest.raises(ValueError):
            ModelConfig(layers=[LayerSpec(kind="flatten"), LayerSpec(kind="dense", out_units=2)])

    def test_fractional_shared_count(self):
        with pytest.raises(ValueError):
            LayerSpec(kind="conv3x3", out_channels=8, cross_channel=True, xc_fraction=0.3)

    @pytest.mark.parametrize("fraction", [0.0, 0.1])
    def test_cross_channel_needs_shared_kernel(self, fraction):
        with pytest.raises(ValueError):
            LayerSpec(kind="conv3x3", out_channels=8, cross_channel=True, xc_fraction=fraction)

    def test_default_config_rejects_empty_sharing(self):
        with pytest.raises(ValueError):
            default_config(xc_fraction=0.0)
        assert not default_config(cross_channel=False, xc_fraction=0.0).has_cross_channel

    def test_cross_channel_only_on_conv(self):
        with pytest.raises(ValueError):
            LayerSpec(kind="dense", out_units=4, cross_channel=True)

    def test_dense_before_flatten(self):
        with pytest.raises(ValueError):
            ModelConfig(layers=[LayerSpec(kind="dense", out_units=1)])

    def test_param_set_mismatch(self):
        cfg = tiny_config()
        params = PickNet(cfg).params
        params.pop("layers.0.bias")
        with pytest.raises(InvalidConfigError):
            PickNet(cfg, params)

    def test_input_shape_mismatch(self, tiny_model):
        with pytest.raises(InvalidConfigError):
            tiny_model.forward(np.zeros((2, PATCH_HEIGHT, 9)))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


class TestForward:
    def test_matches_reference_implementation(self, tiny_model):
        xs = _patches(3, seed=1)
        p, _ = tiny_model.forward(xs)
        np.testing.assert_allclose(p[0], _reference_posteriors(tiny_model, xs), rtol=1e-9, atol=1e-12)

    def test_post_bn_single_channel(self):
        model = PickNet(tiny_config(pool_point="post_bn"), seed=4)
        p, _ = model.forward(_patches(1))
        assert p.shape == (1, 1) and p[0, 0] == pytest.approx(1.0)

    @pytest.mark.parametrize("M", [1, 2, 3, 5])
    def test_identical_patches_give_uniform(self, tiny_model, M):
        x = np.repeat(_patches(1, seed=2), M, axis=0)
        p, _ = tiny_model.forward(x)
        np.testing.assert_allclose(p[0], np.full(M, 1.0 / M), atol=1e-12)

    @pytest.mark.parametrize("M", [2, 3, 4, 5, 6])
    def test_permutation_equivariant(self, tiny_model, M):
        x = _patches(M, seed=10 + M)
        perm = np.random.default_rng(M).permutation(M)
        p, _ = tiny_model.forward(x)
        p_perm, _ = tiny_model.forward(x[perm])
        np.testing.assert_allclose(p_perm[0], p[0][perm], rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("k", range(100))
    def test_permutation_equivariant_float32(self, k):
        # 10 個に 1 個は既定アーキテクチャ、残りは小さな構成
        config = default_config() if k % 10 == 0 else tiny_config(pool_point=("pre_bn", "post_bn")[k % 2])
        model = PickNet(config, dtype=np.float32, seed=k)
        randomize_bn(model, seed=k)
        M = 2 + k % 5
        x = np.random.default_rng(1000 + k).standard_normal((M,) + config.input_shape).astype(np.float32)
        p, _ = model.forward(x)
        if M <= 4:
            perms = [np.array(q) for q in permutations(range(M))]
        else:
            rng = np.random.default_rng(k)
            perms = [rng.permutation(M) for _ in range(10)]
        for perm in perms:
            p_perm, _ = model.forward(x[perm])
            assert np.max(np.abs(p_perm[0] - p[0][perm])) <= 1e-5

    def test_posteriors_on_simplex(self, tiny_model):
        p, _ = tiny_model.forward(np.random.default_rng(3).standard_normal((4, 3, PATCH_HEIGHT, 8)) * 10)
        assert p.shape == (4, 3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        assert np.all(p >= 0)

    def test_batch_rows_independent_in_eval(self, tiny_model):
        x = np.random.default_rng(4).standard_normal((3, 2, PATCH_HEIGHT, 8))
        p, _ = tiny_model.forward(x)
        p1, _ = tiny_model.forward(x[1])
        np.testing.assert_allclose(p[1], p1[0], rtol=1e-12)

    def test_no_sharing_ratio_independent_of_other_channels(self):
        model = PickNet(tiny_config(xc_fraction=0.0), seed=5)
        x = _patches(3, seed=7)
        p2, _ = model.forward(x[:2])
        p3, _ = model.forward(x)
        assert p2[0, 0] / p2[0, 1] == pytest.approx(p3[0, 0] / p3[0, 1], rel=1e-10)

    def test_feature_patches_accepted(self, tiny_model):
        xs = _patches(2, seed=8)
        ck = tiny_model.to_checkpoint()
        post, _ = picknet_forward([FeaturePatch(x, 17) for x in xs], ck)
        assert post.frame == 17
        assert post.n_channels == 2
        expected = PickNet.from_checkpoint(ck).forward(xs)[0][0]
        np.testing.assert_allclose(post.p, expected)

    def test_float32_close_to_float64(self, tiny_model):
        x = _patches(3, seed=9)
        p64, _ = tiny_model.forward(x)
        p32, _ = PickNet(tiny_model.config, tiny_model.params, dtype=np.float32).forward(x)
        np.testing.assert_allclose(p32, p64, atol=1e-4)

    def test_empty_channel_axis(self, tiny_model):
        with pytest.raises(InvalidInputError):
            tiny_model.forward(np.zeros((1, 0, PATCH_HEIGHT, 8)))


class TestChannelPosteriors:
    def test_argmax(self):
        assert ChannelPosteriors(np.array([0.2, 0.5, 0.3])).argmax() == 1

    def test_rejects_off_simplex(self):
        with pytest.raises(InvalidInputError):
            ChannelPosteriors(np.array([0.6, 0.6]))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self, tiny_model):
        _, cache = tiny_model.forward(np.random.default_rng(0).standard_normal((2, 3, PATCH_HEIGHT, 8)), mode="train")
        grads = picknet_backward(tiny_model, cache, np.zeros((2, 3)))
        assert set(grads) == set(tiny_model.trainable_names())
        assert all(np.all(g == 0) for g in grads.values())

    def test_gradient_shapes(self, tiny_model):
        _, cache = tiny_model.forward(_patches(2)[None], mode="train")
        grads = tiny_model.backward(cache, np.array([[1.0, -1.0]]))
        for name, g in grads.items():
            assert g.shape == tiny_model.params[name].shape
        assert not any(name.endswith("running_mean") for name in grads)

    def test_stale_cache(self, tiny_model):
        _, cache = tiny_model.forward(_patches(2)[None], mode="train")
        tiny_model.bump_version()
        with pytest.raises(InvalidStateError):
            tiny_model.backward(cache, np.zeros((1, 2)))

    def test_eval_cache_rejected(self, tiny_model):
        _, cache = tiny_model.forward(_patches(2))
        with pytest.raises(InvalidStateError):
            tiny_model.backward(cache, np.zeros((1, 2)))

    def test_missing_cache(self, tiny_model):
        with pytest.raises(InvalidStateError):
            tiny_model.backward(None, np.zeros((1, 2)))

    def test_commit_batch_stats(self, tiny_model):
        before = tiny_model.params["layers.1.running_mean"].copy()
        _, cache = tiny_model.forward(np.random.default_rng(1).standard_normal((4, 2, PATCH_HEIGHT, 8)) + 3.0,
                                      mode="train")
        assert np.array_equal(tiny_model.params["layers.1.running_mean"], before)
        tiny_model.commit_batch_stats(cache)
        assert not np.array_equal(tiny_model.params["layers.1.running_mean"], before)


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


class TestMacCount:
    @pytest.mark.parametrize("M", [1, 2, 5])
    def test_analytic_matches_counter(self, tiny_model, M):
        counter = MacCounter()
        tiny_model.forward(_patches(M), counter=counter)
        assert counter.total == mac_count(tiny_model.config, M)

    def test_default_config_matches_counter(self):
        model = PickNet(default_config(), dtype=np.float32)
        counter = MacCounter()
        model.forward(np.zeros((2, PATCH_HEIGHT, 80), dtype=np.float32), counter=counter)
        assert counter.total == mac_count(model.config, 2)

    def test_affine_in_channel_count(self):
        cfg = default_config()
        a, b, residual = affine_fit({M: mac_count(cfg, M) for M in (1, 2, 4, 8)})
        assert residual == 0
        assert a > 0 and b > 0
        # 定数項は共有マップの平均 (4 x 20 x 40 + 4 x 10 x 20)
        assert a == 4000

    def test_linear_in_frames(self):
        cfg = tiny_config()
        assert mac_count(cfg, 3, n_frames=4) == 4 * mac_count(cfg, 3)

    def test_no_sharing_is_proportional(self):
        cfg = tiny_config(xc_fraction=0.0)
        a, _, _ = affine_fit({M: mac_count(cfg, M) for M in (1, 2, 4, 8)})
        assert a == 0


def test_randomized_bn_changes_eval_output():
    model = PickNet(tiny_config(), seed=3)
    x = _patches(2, seed=11)
    p_before, _ = model.forward(x)
    randomize_bn(model)
    p_after, _ = model.forward(x)
    assert not np.allclose(p_before, p_after)
