"""Network wiring, displacement invariance, projection oracles, refinement."""

import numpy as np
import pytest

from shiftstereo import model, ops
from shiftstereo.errors import ConfigError, ShapeError
from shiftstereo.gradcheck import CheckCase, run_case
from shiftstereo.tensor import HIGH, Tape, Tensor, backward


def tiny_weights(seed=0, **overrides):
    cfg = model.ModelConfig.tiny(**overrides)
    return cfg, model.ModelWeights.initialize(cfg, seed=seed)


def random_image(rng, h, w, c=1):
    return Tensor(rng.standard_normal((1, c, h, w)).astype(np.float32))


class TestConfig:
    def test_levels(self):
        assert model.ModelConfig.tiny(max_disparity=24).levels == 8

    def test_rejects_non_multiple_of_three(self):
        with pytest.raises(ConfigError):
            model.ModelConfig.tiny(max_disparity=25)

    def test_rejects_bad_channel_list(self):
        with pytest.raises(ConfigError):
            model.ModelConfig(matching_channels=(8, 16, 32))

    def test_round_trips_through_dict(self):
        cfg = model.ModelConfig.tiny(max_disparity=48)
        assert model.ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParameterAudit:
    def test_tiny_counts_match_hand_arithmetic(self):
        # feature: down + 3 dilated + 2 branch 1x1 + fuse + bare out
        feature = (1 * 16 * 9 + 16 + 32) \
            + 3 * (16 * 16 * 9 + 16 + 32) \
            + 2 * (16 * 16 * 1 + 16 + 32) \
            + (48 * 48 * 9 + 48 + 96) \
            + (48 * 16 * 1 + 16)
        # matching: 4 strided+filter encoder pairs, 4 decoder convs, bare out
        matching = (32 * 24 * 9 + 24 + 48) + (24 * 24 * 9 + 24 + 48) \
            + (24 * 32 * 9 + 32 + 64) + (32 * 32 * 9 + 32 + 64) \
            + (32 * 48 * 9 + 48 + 96) + (48 * 48 * 9 + 48 + 96) \
            + (48 * 64 * 9 + 64 + 128) + (64 * 64 * 9 + 64 + 128) \
            + ((64 + 48) * 48 * 9 + 48 + 96) + ((48 + 32) * 32 * 9 + 32 + 64) \
            + ((32 + 24) * 24 * 9 + 24 + 48) + ((24 + 32) * 24 * 9 + 24 + 48) \
            + (24 * 1 * 9 + 1)
        # refine: head + 3 blocks of two convs + bare out
        refine = (3 * 32 * 9 + 32 + 64) + 6 * (32 * 32 * 9 + 32 + 64) \
            + (32 * 1 * 9 + 1)
        counts = model.count_parameters(model.ModelConfig.tiny())
        assert counts["feature"] == feature
        assert counts["matching"] == matching
        assert counts["refine"] == refine
        assert counts["total"] == feature + matching + refine

    def test_full_counts_match_hand_arithmetic(self):
        counts = model.count_parameters(model.ModelConfig.full())
        assert counts["feature"] == 117_472
        assert counts["matching"] == 894_865
        assert counts["refine"] == 113_569
        # same order as the published 1.16M matching-net figure
        assert 0.5e6 < counts["matching"] < 2.0e6

    def test_parameter_count_independent_of_max_disparity(self):
        c24 = model.count_parameters(model.ModelConfig.tiny(max_disparity=24))
        c48 = model.count_parameters(model.ModelConfig.tiny(max_disparity=48))
        assert c24 == c48

    def test_initialize_matches_audit(self):
        cfg, weights = tiny_weights()
        assert weights.num_parameters() == model.count_parameters(cfg)["total"]


class TestFeatureNet:
    def test_output_shape_follows_stride3_rule(self, rng):
        cfg, weights = tiny_weights()
        for h, w in ((96, 96), (97, 100), (51, 66)):
            f = model.extract_features(random_image(rng, h, w), weights, cfg)
            assert f.shape == (1, cfg.feature_channels, -(-h // 3), -(-w // 3))

    def test_deterministic(self, rng):
        cfg, weights = tiny_weights()
        img = random_image(rng, 48, 51)
        a = model.extract_features(img, weights, cfg)
        b = model.extract_features(img, weights, cfg)
        assert np.array_equal(a.data, b.data)

    def test_exactly_eight_convolutions(self, rng):
        cfg, weights = tiny_weights()
        with Tape() as tape:
            model.extract_features(random_image(rng, 48, 48), weights, cfg)
        assert tape.count_ops("conv2d") == 8

    def test_rejects_tiny_images(self, rng):
        cfg, weights = tiny_weights()
        with pytest.raises(ShapeError):
            model.extract_features(random_image(rng, 8, 40), weights, cfg)

    def test_rejects_channel_mismatch(self, rng):
        cfg, weights = tiny_weights()
        with pytest.raises(ShapeError):
            model.extract_features(random_image(rng, 48, 48, c=3), weights, cfg)


class TestShiftFeatures:
    def test_identity_at_zero(self, rng):
        f = Tensor(rng.standard_normal((1, 4, 3, 5)).astype(np.float32))
        assert np.array_equal(model.shift_features(f, 0).data, f.data)

    def test_shift_two_on_width_five(self, rng):
        f = Tensor(rng.standard_normal((1, 2, 3, 5)).astype(np.float32))
        out = model.shift_features(f, 2)
        assert not out.data[:, :, :, :2].any()
        assert np.array_equal(out.data[:, :, :, 2:], f.data[:, :, :, :3])


class TestMatchingNet:
    def test_cost_map_shape(self, rng):
        cfg, weights = tiny_weights()
        fl = model.extract_features(random_image(rng, 96, 96), weights, cfg)
        fr = model.extract_features(random_image(rng, 96, 96), weights, cfg)
        cost = model.compute_cost_map(fl, fr, weights, cfg)
        assert cost.shape == (1, 1, 32, 32)

    def test_pure_function_of_inputs(self, rng):
        # identical inputs under two different nominal disparity labels
        # (i.e. two separate calls) produce bit-identical cost maps
        cfg, weights = tiny_weights()
        fl = model.extract_features(random_image(rng, 48, 48), weights, cfg)
        fr = model.extract_features(random_image(rng, 48, 48), weights, cfg)
        a = model.compute_cost_map(fl, fr, weights, cfg)
        b = model.compute_cost_map(fl, fr, weights, cfg)
        assert np.array_equal(a.data, b.data)

    def test_rejects_sub_16_extent(self, rng):
        cfg, weights = tiny_weights()
        fl = Tensor(rng.standard_normal((1, 32, 15, 20)).astype(np.float32))
        with pytest.raises(ShapeError):
            model.compute_cost_map(fl, fl, weights, cfg)

    def test_layer_by_layer_replay_oracle(self, rng):
        """Re-execute the matching net layer list step by step with raw ops
        and compare against the packaged forward."""
        cfg, weights = tiny_weights()
        pair = Tensor(rng.standard_normal((1, 32, 16, 16)).astype(np.float32))
        expected = model._matching_body(pair, weights, cfg, training=False)

        def conv_bn_relu(x, name):
            spec = weights.specs[name]
            y = ops.conv2d(x, weights.params[name + ".w"], weights.params[name + ".b"],
                           stride=spec.stride, dilation=spec.dilation,
                           padding=spec.padding)
            y = ops.batch_norm(y, weights.params[name + ".gamma"],
                               weights.params[name + ".beta"],
                               weights.buffers[name + ".mean"],
                               weights.buffers[name + ".var"],
                               training=False, per_sample=True)
            return ops.relu(y)

        e1 = conv_bn_relu(pair, "matching.enc1")
        f1 = conv_bn_relu(e1, "matching.filt1")
        e2 = conv_bn_relu(f1, "matching.enc2")
        f2 = conv_bn_relu(e2, "matching.filt2")
        e3 = conv_bn_relu(f2, "matching.enc3")
        f3 = conv_bn_relu(e3, "matching.filt3")
        e4 = conv_bn_relu(f3, "matching.enc4")
        f4 = conv_bn_relu(e4, "matching.filt4")
        d = f4
        for i, skip in enumerate((f3, f2, f1, pair), 1):
            d = ops.bilinear_resize(d, skip.shape[2], skip.shape[3])
            d = conv_bn_relu(ops.concat_channels([d, skip]), f"matching.dec{i}")
        replay = ops.conv2d(d, weights.params["matching.out.w"],
                            weights.params["matching.out.b"], padding=1)
        assert np.array_equal(replay.data, expected.data)


class TestCostVolume:
    def _features(self, rng, cfg, weights, h=96, w=96):
        fl = model.extract_features(random_image(rng, h, w), weights, cfg)
        fr = model.extract_features(random_image(rng, h, w), weights, cfg)
        return fl, fr

    def test_slice_equality_bit_exact(self, rng):
        cfg, weights = tiny_weights()
        fl, fr = self._features(rng, cfg, weights)
        volume = model.build_cost_volume(fl, fr, weights, cfg, mode="parallel")
        for d in (0, 3, 7):
            standalone = model.compute_cost_map(
                fl, model.shift_features(fr, d), weights, cfg)
            assert np.array_equal(volume.data[:, d:d + 1], standalone.data)

    def test_sequential_parallel_bit_identical(self, rng):
        cfg, weights = tiny_weights()
        fl, fr = self._features(rng, cfg, weights)
        seq = model.build_cost_volume(fl, fr, weights, cfg, mode="sequential")
        par = model.build_cost_volume(fl, fr, weights, cfg, mode="parallel")
        assert np.array_equal(seq.data, par.data)

    def test_level_permutation_invariance(self, rng):
        # evaluate levels in shuffled order, inverse-permute, compare bits
        cfg, weights = tiny_weights()
        fl, fr = self._features(rng, cfg, weights)
        reference = model.build_cost_volume(fl, fr, weights, cfg, mode="sequential")
        perm = np.random.default_rng(5).permutation(cfg.levels)
        shuffled = np.empty_like(reference.data)
        for d in perm:
            cost = model.compute_cost_map(fl, model.shift_features(fr, int(d)),
                                          weights, cfg)
            shuffled[:, d] = cost.data[:, 0]
        assert np.array_equal(shuffled, reference.data)

    def test_volume_shape_and_level_cap(self, rng):
        cfg, weights = tiny_weights()
        fl, fr = self._features(rng, cfg, weights)
        volume = model.build_cost_volume(fl, fr, weights, cfg)
        assert volume.shape == (1, cfg.levels, 32, 32)
        wide_cfg = model.ModelConfig.tiny(max_disparity=120)
        wide_weights = model.ModelWeights.initialize(wide_cfg, seed=0)
        with pytest.raises(ShapeError):
            model.build_cost_volume(fl, fr, wide_weights, wide_cfg)


class TestProjection:
    def test_soft_argmin_uniform_costs(self):
        volume = Tensor(np.zeros((1, 4, 2, 2)))
        out = model.soft_argmin(volume)
        np.testing.assert_allclose(out.data, 1.5, rtol=1e-6)

    def test_soft_argmin_hand_case(self):
        costs = -np.log(np.array([0.7, 0.2, 0.1])).reshape(1, 3, 1, 1)
        out = model.soft_argmin(Tensor(costs, dtype=HIGH))
        np.testing.assert_allclose(out.data.reshape(()), 0.4, atol=1e-12)

    def test_soft_argmin_dominant_level(self):
        costs = np.full((1, 5, 2, 2), 10.0)
        costs[0, 3] = 0.0
        out = model.soft_argmin(Tensor(costs, dtype=HIGH))
        np.testing.assert_allclose(out.data, 3.0, atol=1e-3)

    def test_soft_argmin_range_invariant(self, rng):
        volume = Tensor(rng.standard_normal((1, 8, 5, 5)) * 30, dtype=HIGH)
        out = model.soft_argmin(volume).data
        assert np.all(out >= 0.0) and np.all(out <= 7.0)

    def test_entropy_uniform_is_log_n(self):
        volume = Tensor(np.zeros((1, 6, 3, 3)), dtype=HIGH)
        np.testing.assert_allclose(model.entropy(volume).data, np.log(6), atol=1e-12)

    def test_entropy_dominant_level_near_zero(self):
        costs = np.zeros((1, 4, 2, 2))
        costs[0, 1:] = 50.0
        out = model.entropy(Tensor(costs, dtype=HIGH))
        assert np.all(out.data < 1e-6)

    def test_entropy_hand_case(self):
        costs = -np.log(np.array([0.7, 0.2, 0.1])).reshape(1, 3, 1, 1)
        out = model.entropy(Tensor(costs, dtype=HIGH))
        np.testing.assert_allclose(out.data.reshape(()), 0.80182, atol=1e-4)

    def test_entropy_range_invariant(self, rng):
        volume = Tensor(rng.standard_normal((1, 8, 4, 4)) * 20, dtype=HIGH)
        out = model.entropy(volume).data
        assert np.all(out >= 0.0) and np.all(out <= np.log(8) + 1e-12)


class TestUpsampleOutputs:
    def test_constant_disparity_scales_by_three(self):
        disp = model.DisparityMap.dense(np.full((4, 4), 5.0, dtype=np.float32))
        ent = model.EntropyMap(np.full((4, 4), 0.3, dtype=np.float32))
        d, e = model.upsample_outputs(disp, ent, 12, 12)
        np.testing.assert_allclose(d.values, 15.0, rtol=1e-6)
        np.testing.assert_allclose(e.values, 0.3, rtol=1e-6)

    def test_entropy_stays_within_source_range(self, rng):
        ent_src = rng.random((6, 6)).astype(np.float32)
        disp = model.DisparityMap.dense(np.zeros((6, 6), dtype=np.float32))
        _, e = model.upsample_outputs(disp, model.EntropyMap(ent_src), 17, 13)
        assert e.values.min() >= ent_src.min() - 1e-6
        assert e.values.max() <= ent_src.max() + 1e-6

    def test_integer_ratio_preserves_aligned_samples(self):
        # with half-pixel centers, output pixel 3k+1 lands exactly on source k
        src = np.arange(16, dtype=np.float32).reshape(4, 4)
        disp = model.DisparityMap.dense(src)
        d, _ = model.upsample_outputs(disp, model.EntropyMap(src), 12, 12)
        for k in range(4):
            assert d.values[3 * k + 1, 3 * k + 1] == pytest.approx(3.0 * src[k, k])


class TestRefine:
    def test_zero_initialized_residual_passes_disparity_through(self, rng):
        cfg, weights = tiny_weights()
        disp = Tensor(rng.uniform(-2, 20, (1, 1, 24, 24)).astype(np.float32))
        left = random_image(rng, 24, 24)
        ent = Tensor(rng.random((1, 1, 24, 24)).astype(np.float32))
        out = model.refine(disp, left, ent, weights, cfg)
        assert np.array_equal(out.data, np.maximum(disp.data, 0.0))

    def test_output_non_negative_with_trained_tail(self, rng):
        cfg, weights = tiny_weights()
        tail = weights.params["refine.out.w"]
        tail.data = rng.standard_normal(tail.shape).astype(np.float32)
        disp = Tensor(rng.uniform(0, 20, (1, 1, 24, 24)).astype(np.float32))
        out = model.refine(disp, random_image(rng, 24, 24),
                           Tensor(rng.random((1, 1, 24, 24)).astype(np.float32)),
                           weights, cfg)
        assert np.all(out.data >= 0.0)

    def test_gradient_reaches_all_three_inputs(self, rng):
        cfg = model.ModelConfig.tiny(refine_channels=8, refine_blocks=(1, 2))
        weights = model.ModelWeights.initialize(cfg, seed=2, dtype=HIGH)
        tail = weights.params["refine.out.w"]
        tail.data = np.random.default_rng(9).standard_normal(tail.shape) * 0.3
        disp = Tensor(rng.uniform(1, 9, (1, 1, 8, 8)), requires_grad=True, dtype=HIGH)
        left = Tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True, dtype=HIGH)
        ent = Tensor(rng.random((1, 1, 8, 8)), requires_grad=True, dtype=HIGH)
        with Tape() as tape:
            out = model.refine(disp, left, ent, weights, cfg, training=True)
            loss = ops.sum_all(ops.mul(out, out))
        backward(loss, tape)
        for leaf in (disp, left, ent):
            assert leaf.grad is not None and np.any(leaf.grad != 0)

    def test_rejects_extent_mismatch(self, rng):
        cfg, weights = tiny_weights()
        with pytest.raises(ShapeError):
            model.refine(Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)),
                         random_image(rng, 9, 8),
                         Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)),
                         weights, cfg)


class TestForward:
    def test_output_shapes(self, rng):
        cfg, weights = tiny_weights()
        left = random_image(rng, 96, 93)
        right = random_image(rng, 96, 93)
        coarse, refined, ent = model.forward(left, right, weights, cfg)
        assert coarse.values.shape == (96, 93)
        assert refined.values.shape == (96, 93)
        assert ent.values.shape == (96, 93)
        assert coarse.valid.all() and refined.valid.all()

    def test_deterministic_across_calls(self, rng):
        cfg, weights = tiny_weights()
        left = random_image(rng, 48, 48)
        right = random_image(rng, 48, 48)
        a = model.forward(left, right, weights, cfg)
        b = model.forward(left, right, weights, cfg)
        assert np.array_equal(a[1].values, b[1].values)
        assert np.array_equal(a[2].values, b[2].values)

    def test_coarse_disparity_within_unit_range(self, rng):
        cfg, weights = tiny_weights()
        coarse, _, ent = model.forward(random_image(rng, 48, 60),
                                       random_image(rng, 48, 60), weights, cfg)
        assert coarse.values.min() >= 0.0
        assert coarse.values.max() <= cfg.max_disparity - 3
        assert ent.values.min() >= 0.0
        assert ent.values.max() <= np.log(cfg.levels) + 1e-6

    def test_rejects_mismatched_pair(self, rng):
        cfg, weights = tiny_weights()
        with pytest.raises(ShapeError):
            model.forward(random_image(rng, 48, 48), random_image(rng, 48, 51),
                          weights, cfg)


class TestEndToEndGradients:
    def test_total_loss_finite_differences_on_sampled_parameters(self):
        """Micro profile, high precision, sampled parameter subset, 1e-3.

        The step is 1e-6 rather than the per-op 1e-4: a deep graph full of
        rectifier kinks flips activation states under coarser perturbations,
        which biases the numeric slope without any backward defect (at this
        step the worst relative error collapses to ~1e-8).
        """
        cfg = model.ModelConfig.tiny(
            max_disparity=6, feature_channels=4,
            matching_channels=(6, 8, 10, 12), spp_pools=((8, 4), (4, 4)),
            refine_blocks=(1, 2), refine_channels=6)
        weights = model.ModelWeights.initialize(cfg, seed=3, dtype=HIGH)
        tail = weights.params["refine.out.w"]
        tail.data = np.random.default_rng(17).standard_normal(tail.shape) * 0.2
        rng = np.random.default_rng(23)
        left = Tensor(rng.standard_normal((1, 1, 48, 48)), dtype=HIGH)
        right = Tensor(rng.standard_normal((1, 1, 48, 48)), dtype=HIGH)
        gt = rng.uniform(0, 3, (48, 48))
        mask = np.ones((48, 48), bool)

        from shiftstereo.training import LossConfig, total_loss

        tracked = {name: weights.params[name] for name in (
            "feature.down.w", "feature.fuse.w", "matching.enc1.w",
            "matching.dec4.w", "matching.out.b", "refine.head.w")}

        def build():
            def loss():
                out = model.forward_tensors(left, right, weights, cfg,
                                            mode="parallel", training=True)
                return total_loss(out["coarse"], out["refined"], gt, mask,
                                  LossConfig(), max_disparity=cfg.max_disparity)
            return tracked, loss

        case = CheckCase("end_to_end", build, tolerance=1e-3, sample_elements=4)
        for result in run_case(case, step=1e-6):
            assert result.passed, (result.param, result.max_rel_err)
