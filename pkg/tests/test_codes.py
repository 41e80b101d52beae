"""Impression codes: encoding, ensembling, distance metric, persistence."""

import json

import numpy as np
import pytest

from impression import codes as C
from impression import network as N
from impression.codes import CodeSchema, ImpressionCode, TapStats
from impression.errors import CodeFileError, DegenerateInputError, DimensionError, IncompatibleCodesError


@pytest.fixture(scope="module")
def net():
    spec = N.small_spec(1, 8, 2, widths=(4, 8))
    return N.NetworkCheckpoint(spec, N.init_params(spec, seed=1), norm_mean=[0.4], norm_std=[0.3])


@pytest.fixture(scope="module")
def identity_net():
    # 1x1 identity conv tapped directly: tap stats are the raw image stats
    layers = [N.conv(1, kernel=1, stride=1, padding=0), N.global_avgpool(), N.dense(2)]
    spec = N.NetworkSpec(1, 6, 6, 2, layers, tap_points=[0])
    params = N.init_params(spec, seed=0)
    params["layer00.weight"] = np.ones((1, 1, 1, 1), dtype=np.float32)
    params["layer00.bias"] = np.zeros(1, dtype=np.float32)
    return N.NetworkCheckpoint(spec, params, norm_mean=[0.0], norm_std=[1.0])


def random_code(rng, channels=(3, 5), schema=CodeSchema.MEAN_VAR, fingerprint="f" * 64):
    taps = tuple(
        TapStats(
            name=f"tap{i}",
            mean=rng.standard_normal(c) if schema.has_mean else None,
            var=rng.random(c) if schema.has_var else None,
        )
        for i, c in enumerate(channels)
    )
    return ImpressionCode(schema=schema, fingerprint=fingerprint, taps=taps)


class TestEncode:
    def test_identical_images_identical_codes(self, net):
        rng = np.random.default_rng(0)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        a = C.encode(net, img)
        b = C.encode(net, img.copy())
        assert C.distance(a, b) == 0.0

    def test_constant_image_through_identity_tap(self, identity_net):
        img = np.full((1, 1, 6, 6), 0.7, dtype=np.float32)
        code = C.encode(identity_net, img, CodeSchema.MEAN_VAR)
        assert code.taps[0].mean[0] == pytest.approx(0.7, abs=1e-6)
        assert code.taps[0].var[0] == pytest.approx(0.0, abs=1e-9)

    def test_matches_loop_oracle(self, net):
        rng = np.random.default_rng(1)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        code = C.encode(net, img, CodeSchema.MEAN_VAR)
        tf = N.forward_with_taps(net, img)
        for tap_stats, (name, act) in zip(code.taps, tf.taps):
            a = act.data[0]
            for c in range(a.shape[0]):
                vals = [a[c, i, j] for i in range(a.shape[1]) for j in range(a.shape[2])]
                mean = sum(vals) / len(vals)
                var = sum((v - mean) ** 2 for v in vals) / len(vals)
                assert tap_stats.mean[c] == pytest.approx(mean, abs=1e-6)
                assert tap_stats.var[c] == pytest.approx(var, abs=1e-6)

    def test_dimension_is_k_or_2k(self, net):
        img = np.zeros((1, 1, 8, 8), dtype=np.float32)
        k = net.spec.tapped_channels()
        assert C.encode(net, img, CodeSchema.MEAN_ONLY).dimension == k
        assert C.encode(net, img, CodeSchema.VAR_ONLY).dimension == k
        assert C.encode(net, img, CodeSchema.MEAN_VAR).dimension == 2 * k

    def test_batch_rejected(self, net):
        with pytest.raises(DimensionError):
            C.encode(net, np.zeros((2, 1, 8, 8), dtype=np.float32))

    def test_meanvar_mean_half_equals_meanonly(self, net):
        rng = np.random.default_rng(2)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        mv = C.encode(net, img, CodeSchema.MEAN_VAR)
        mo = C.encode(net, img, CodeSchema.MEAN_ONLY)
        assert C.distance(mv.mean_half(), mo) == 0.0

    def test_flip_sensitivity(self, net):
        rng = np.random.default_rng(3)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        flipped = img[:, :, :, ::-1].copy()
        assert C.distance(C.encode(net, img), C.encode(net, flipped)) > 0


class TestEncodeEnsemble:
    def test_single_image_matches_encode(self, net):
        rng = np.random.default_rng(4)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        single = C.encode(net, img)
        ensembled = C.encode_ensemble(net, img)
        assert ensembled.ensemble_size == 1
        np.testing.assert_allclose(ensembled.to_vector(), single.to_vector(), rtol=1e-5, atol=1e-7)

    def test_duplication_invariance(self, net):
        rng = np.random.default_rng(5)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        once = C.encode_ensemble(net, img)
        eight = C.encode_ensemble(net, np.repeat(img, 8, axis=0))
        np.testing.assert_allclose(eight.to_vector(), once.to_vector(), rtol=1e-5, atol=1e-7)
        assert eight.ensemble_size == 8

    def test_shuffle_and_partition_invariance(self, net):
        rng = np.random.default_rng(6)
        images = rng.random((32, 1, 8, 8)).astype(np.float32)
        base = C.encode_ensemble(net, images, batch_size=32)
        shuffled = C.encode_ensemble(net, images[rng.permutation(32)], batch_size=7)
        other = C.encode_ensemble(net, images[rng.permutation(32)], batch_size=5)
        for variant in (shuffled, other):
            ref, got = base.to_vector(), variant.to_vector()
            np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-7)

    def test_merge_matches_single_pass(self, net):
        rng = np.random.default_rng(7)
        images = rng.random((20, 1, 8, 8)).astype(np.float32)
        whole = C.encode_ensemble(net, images)
        left = C.EnsembleAccumulator(net)
        left.update(images[:8])
        right = C.EnsembleAccumulator(net)
        right.update(images[8:])
        left.merge(right)
        np.testing.assert_allclose(left.finalize().to_vector(), whole.to_vector(), rtol=1e-6)

    def test_empty_dataset_rejected(self, net):
        with pytest.raises(DegenerateInputError):
            C.encode_ensemble(net, np.zeros((0, 1, 8, 8), dtype=np.float32))


class TestDistance:
    def test_self_distance_zero(self):
        code = random_code(np.random.default_rng(8))
        assert C.distance(code, code) == 0.0

    def test_single_coordinate_difference(self):
        rng = np.random.default_rng(9)
        a = random_code(rng)
        taps = list(a.taps)
        mean = taps[0].mean.copy()
        mean[1] += 0.25
        taps[0] = TapStats(taps[0].name, mean, taps[0].var)
        b = ImpressionCode(a.schema, a.fingerprint, tuple(taps))
        assert C.distance(a, b) == pytest.approx(0.25, rel=1e-12)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(10)
        a, b = random_code(rng), random_code(rng)
        assert C.distance(a, b) == C.distance(b, a)

    def test_triangle_inequality_on_random_triples(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            a, b, c = (random_code(rng) for _ in range(3))
            assert C.distance(a, c) <= C.distance(a, b) + C.distance(b, c) + 1e-6

    def test_schema_mismatch_identified(self):
        rng = np.random.default_rng(12)
        a = random_code(rng, schema=CodeSchema.MEAN_ONLY)
        b = random_code(rng, schema=CodeSchema.MEAN_VAR)
        with pytest.raises(IncompatibleCodesError, match="schema"):
            C.distance(a, b)

    def test_fingerprint_mismatch_identified(self):
        rng = np.random.default_rng(13)
        a = random_code(rng, fingerprint="a" * 64)
        b = random_code(rng, fingerprint="b" * 64)
        with pytest.raises(IncompatibleCodesError, match="fingerprint"):
            C.distance(a, b)

    def test_tap_structure_mismatch_identified(self):
        rng = np.random.default_rng(14)
        a = random_code(rng, channels=(3, 5))
        b = random_code(rng, channels=(3, 4))
        with pytest.raises(IncompatibleCodesError):
            C.distance(a, b)


class TestCodeIO:
    def test_roundtrip_within_tolerance(self, net, tmp_path):
        rng = np.random.default_rng(15)
        img = rng.random((1, 1, 8, 8)).astype(np.float32)
        code = C.encode(net, img)
        path = tmp_path / "code.json"
        C.save_code(code, path)
        again = C.load_code(path)
        assert C.distance(code, again) <= 1e-6

    def test_handwritten_minimal_file(self, tmp_path):
        doc = {
            "schema": "meanvar",
            "fingerprint": "00" * 32,
            "ensemble_size": 3,
            "taps": [{"name": "t0", "mean": [1.0, 2.0], "var": [0.5, 0.0]}],
        }
        path = tmp_path / "code.json"
        path.write_text(json.dumps(doc))
        code = C.load_code(path)
        assert code.dimension == 4
        assert code.ensemble_size == 3

    def test_negative_variance_rejected(self, tmp_path):
        doc = {
            "schema": "meanvar",
            "fingerprint": "00" * 32,
            "ensemble_size": 1,
            "taps": [{"name": "t0", "mean": [1.0], "var": [-0.1]}],
        }
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(CodeFileError, match="negative variance"):
            C.load_code(path)

    def test_unknown_schema_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"schema": "covariance", "fingerprint": "", "ensemble_size": 1, "taps": []}))
        with pytest.raises(CodeFileError, match="schema"):
            C.load_code(path)

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(CodeFileError):
            C.load_code(path)

    def test_serialized_with_full_precision(self, tmp_path):
        value = np.float32(1 / 3)
        code = ImpressionCode(
            schema=CodeSchema.MEAN_ONLY,
            fingerprint="00" * 32,
            taps=(TapStats("t0", np.array([value]), None),),
        )
        path = tmp_path / "code.json"
        C.save_code(code, path)
        again = C.load_code(path)
        assert np.float32(again.taps[0].mean[0]) == value
