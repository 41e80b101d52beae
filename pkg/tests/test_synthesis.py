"""Decoder: matching loss, gradients, the optimization loop, diversity."""

import numpy as np
import pytest

from impression import codes as C
from impression import network as N
from impression import synthesis as S
from impression import tensor as T
from impression.errors import ConfigError, IncompatibleCodesError
from oracles import (
    channel_stats_direct,
    conv2d_direct,
    finite_diff_grad_validated,
    normalized_grad_error,
)


@pytest.fixture(scope="module")
def small_net():
    spec = N.small_spec(1, 8, 2, widths=(4, 6))
    return N.NetworkCheckpoint(spec, N.init_params(spec, seed=2), norm_mean=[0.45], norm_std=[0.3])


@pytest.fixture(scope="module")
def toy_net():
    # identity 1x1 conv tapped directly; code stats == raw image stats
    layers = [N.conv(1, kernel=1, stride=1, padding=0), N.global_avgpool(), N.dense(2)]
    spec = N.NetworkSpec(1, 8, 8, 2, layers, tap_points=[0])
    params = N.init_params(spec, seed=0)
    params["layer00.weight"] = np.ones((1, 1, 1, 1), dtype=np.float32)
    params["layer00.bias"] = np.zeros(1, dtype=np.float32)
    return N.NetworkCheckpoint(spec, params, norm_mean=[0.0], norm_std=[1.0])


class TestImpressionLoss:
    def test_zero_at_minimum_with_zero_gradient(self, small_net):
        rng = np.random.default_rng(0)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        target = C.encode(small_net, img)
        batch = T.Tensor(np.repeat(img, 3, axis=0), requires_grad=True)
        with T.Tape() as tape:
            loss, per_image = S.impression_loss(small_net, batch, target)
        T.backward(loss, tape)
        assert loss.item() == 0.0
        np.testing.assert_array_equal(per_image, np.zeros(3))
        np.testing.assert_array_equal(batch.grad, np.zeros_like(batch.data))

    def test_equals_half_squared_distance_single_image(self, small_net):
        rng = np.random.default_rng(1)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        other = rng.random((1, 1, 8, 8)).astype(np.float32)
        target = C.encode(small_net, other)
        loss, per_image = S.impression_loss(small_net, img, target)
        d = C.distance(C.encode(small_net, img), target)
        assert loss.item() == pytest.approx(0.5 * d * d, rel=1e-4)
        assert per_image[0] == pytest.approx(loss.item(), rel=1e-5)

    def test_ensemble_mode_uses_batch_statistics(self, small_net):
        rng = np.random.default_rng(2)
        imgs = rng.random((4, 1, 8, 8)).astype(np.float32)
        target = C.encode_ensemble(small_net, imgs)
        loss, _ = S.impression_loss(small_net, imgs, target, S.MatchingMode.BATCH_ENSEMBLE)
        assert loss.item() == pytest.approx(0.0, abs=1e-8)

    def test_pixel_gradients_vs_finite_differences(self):
        # two-conv template, 8x8 input, MeanVar schema, float64
        layers = [N.conv(3, 3, 1, 1), N.relu(), N.conv(4, 3, 1, 1), N.relu()]
        layers += [N.global_avgpool(), N.dense(2)]
        spec = N.NetworkSpec(1, 8, 8, 2, layers, tap_points=[1, 3])
        net64 = N.NetworkCheckpoint(spec, N.init_params(spec, seed=5), [0.4], [0.3]).astype(np.float64)
        rng = np.random.default_rng(6)
        target = C.encode(net64, rng.random((1, 1, 8, 8)))
        x = rng.random((1, 1, 8, 8))

        def f(a):
            xn = (a - 0.4) / 0.3
            h1 = np.maximum(conv2d_direct(xn, net64.params["layer00.weight"], net64.params["layer00.bias"], 1, 1), 0)
            h2 = np.maximum(conv2d_direct(h1, net64.params["layer02.weight"], net64.params["layer02.bias"], 1, 1), 0)
            total = 0.0
            for act, tap in ((h1, target.taps[0]), (h2, target.taps[1])):
                m, v = channel_stats_direct(act, False)
                total += ((m[0] - tap.mean) ** 2).sum() + ((v[0] - tap.var) ** 2).sum()
            return 0.5 * total

        xt = T.Tensor(x, requires_grad=True)
        with T.Tape() as tape:
            loss, _ = S.impression_loss(net64, xt, target)
        T.backward(loss, tape)
        assert loss.item() == pytest.approx(f(x), rel=1e-9)
        coords = {tuple(idx) for idx in np.random.default_rng(7).integers(0, [1, 1, 8, 8], size=(64, 4))}
        numeric = finite_diff_grad_validated(f, x, h=1e-3, coords=coords)
        assert len(numeric) >= 40  # a few kink-contaminated coordinates may drop
        analytic = {idx: xt.grad[idx] for idx in numeric}
        assert normalized_grad_error(analytic, numeric) < 1e-4

    def test_incompatible_target_rejected(self, small_net, toy_net):
        rng = np.random.default_rng(8)
        target = C.encode(toy_net, rng.random((1, 1, 8, 8)).astype(np.float32))
        with pytest.raises(IncompatibleCodesError):
            S.impression_loss(small_net, rng.random((1, 1, 8, 8)).astype(np.float32), target)


class TestSynthesize:
    def test_zero_iterations_rejected(self):
        with pytest.raises(ConfigError):
            S.SynthesisConfig(iterations=0)

    def test_single_step_bounded_by_learning_rate(self, small_net):
        rng = np.random.default_rng(9)
        init = rng.random((2, 1, 8, 8)).astype(np.float32)
        target = C.encode(small_net, rng.random((1, 1, 8, 8)).astype(np.float32))
        cfg = S.SynthesisConfig(iterations=1, learning_rate=0.1, shift=0, flip_prob=0.0, seed=0)
        res = S.synthesize(small_net, target, cfg, init_images=init)
        assert np.abs(res.images - init).max() <= 0.1 + 1e-7
        assert len(res.loss_trajectory) == 1

    def test_convex_oracle_recovers_target_statistics(self, toy_net):
        rng = np.random.default_rng(10)
        target = C.encode(toy_net, rng.random((1, 1, 8, 8)).astype(np.float32))
        cfg = S.SynthesisConfig(
            iterations=6000, learning_rate=2.5e-4, shift=0, flip_prob=0.0,
            batch_size=2, seed=3, precision="float64",
        )
        res = S.synthesize(toy_net, target, cfg)
        assert res.loss_trajectory[-1] < 1e-8

    def test_deterministic_given_seed(self, small_net):
        rng = np.random.default_rng(11)
        target = C.encode(small_net, rng.random((1, 1, 8, 8)).astype(np.float32))
        cfg = S.SynthesisConfig(iterations=5, batch_size=3, shift=2, seed=42)
        a = S.synthesize(small_net, target, cfg)
        b = S.synthesize(small_net, target, cfg)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.loss_trajectory, b.loss_trajectory)

    def test_two_seeds_give_distinct_images(self, small_net):
        rng = np.random.default_rng(12)
        target = C.encode(small_net, rng.random((1, 1, 8, 8)).astype(np.float32))
        base = dict(iterations=60, batch_size=2, shift=1, seed=0)
        a = S.synthesize(small_net, target, S.SynthesisConfig(**base))
        b = S.synthesize(small_net, target, S.SynthesisConfig(**{**base, "seed": 1}))
        assert np.linalg.norm(a.images - b.images) > 0
        fa, fb = a.loss_trajectory[-1], b.loss_trajectory[-1]
        assert max(fa, fb) <= 2.0 * min(fa, fb)

    def test_images_stay_clamped(self, small_net):
        rng = np.random.default_rng(13)
        target = C.encode(small_net, rng.random((1, 1, 8, 8)).astype(np.float32))
        cfg = S.SynthesisConfig(iterations=8, batch_size=2, learning_rate=0.5, seed=1)
        res = S.synthesize(small_net, target, cfg)
        assert res.images.min() >= 0.0 and res.images.max() <= 1.0

    def test_mean_only_schema_ignores_variances(self, toy_net):
        # images with matching means but different variances have zero loss
        rng = np.random.default_rng(14)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        target = C.encode(toy_net, img, C.CodeSchema.MEAN_ONLY)
        mu = img.mean()
        spread = np.clip(mu + (img - mu) * 0.5, 0, 1)
        spread += mu - spread.mean()  # restore the exact mean
        loss, _ = S.impression_loss(toy_net, spread.astype(np.float32), target)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_trajectory_length_and_per_image_count(self, small_net):
        rng = np.random.default_rng(15)
        target = C.encode(small_net, rng.random((1, 1, 8, 8)).astype(np.float32))
        cfg = S.SynthesisConfig(iterations=7, batch_size=3, seed=2)
        res = S.synthesize(small_net, target, cfg)
        assert len(res.loss_trajectory) == 7
        assert res.per_image_losses.shape == (3,)
        assert (res.per_image_losses >= 0).all()
        assert res.impression_trajectory is None
