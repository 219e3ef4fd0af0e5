"""Loss formulas, noisy-OR fusion, gating identity, and map diagnostics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualkd.autodiff import Tensor
from dualkd.distill import (
    BranchLosses,
    ScoreRecord,
    anomaly_map,
    anomaly_score,
    bilinear_resize,
    box_smooth3,
    branch_losses,
    decoder_loss,
    encoder_loss,
    encoder_score_last,
    encoder_score_prefix,
    feature_variance_map,
    gate_coefficient,
    noisy_or_probability,
    read_score_records,
    total_loss,
    write_score_records,
)
from dualkd.nets import (
    BottleneckConfig,
    FeatureDecoder,
    FeaturePyramid,
    NoisyBottleneck,
    ViTConfig,
    VisionTransformer,
    fuse_mid_layers,
)
from dualkd.rng import stream_rng

# frozen high-precision scalars
SIG_HALF_TIMES_SIG_ONE = 0.455054233923411245  # sigmoid(0.5)*sigmoid(1.0)


def random_pyramid(depth, channels=4, grid=2, seed=0, with_tokens=False):
    rng = stream_rng(seed, 60)
    maps = [Tensor(rng.normal(size=(channels, grid, grid))) for _ in range(depth)]
    tokens, final = [], None
    if with_tokens:
        tokens = [Tensor(rng.normal(size=channels)) for _ in range(depth)]
        final = Tensor(rng.normal(size=channels))
    return FeaturePyramid(maps, tokens, final)


def oracle_decoder_loss(teacher: FeaturePyramid, decoder: FeaturePyramid) -> float:
    """Independent direct evaluation: explicit groups, explicit cosines."""
    total = 0.0
    for i in (1, 2):
        ft = np.zeros_like(teacher.patch_features[0].data)
        for j in range(4 * i - 1, 4 * i + 3):  # 1-indexed inclusive range
            ft += teacher.patch_features[j - 1].data
        ft /= 4.0
        fd = np.zeros_like(decoder.patch_features[0].data)
        for j in range(4 * i - 3, 4 * i + 1):
            fd += decoder.patch_features[j - 1].data
        fd /= 4.0
        a, b = ft.reshape(-1), fd.reshape(-1)
        cos = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        total += 1.0 - cos
    return 0.5 * total


def oracle_encoder_loss(teacher: FeaturePyramid, encoder: FeaturePyramid) -> float:
    m = len(teacher.class_tokens)
    acc = 0.0
    for j in range(m - 1):
        d = teacher.class_tokens[j].data - encoder.class_tokens[j].data
        acc += float(np.sum(d * d))
    d = teacher.final_class_token.data - encoder.final_class_token.data
    acc += float(np.sum(d * d))
    return acc / m


class TestDecoderLoss:
    def test_equal_groups_give_zero(self):
        t = random_pyramid(12, seed=1)
        d = FeaturePyramid([t.patch_features[j + 2] for j in range(8)])
        # decoder layers 1..8 == teacher layers 3..10, so both groups match
        assert abs(decoder_loss(t, d).item()) < 1e-12

    def test_negated_groups_give_two(self):
        t = random_pyramid(12, seed=2)
        d = FeaturePyramid([Tensor(-t.patch_features[j + 2].data) for j in range(8)])
        assert abs(decoder_loss(t, d).item() - 2.0) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_direct_oracle(self, seed):
        t = random_pyramid(12, channels=6, grid=3, seed=100 + seed)
        d = random_pyramid(8, channels=6, grid=3, seed=200 + seed)
        assert abs(decoder_loss(t, d).item() - oracle_decoder_loss(t, d)) < 1e-10

    def test_scale_invariance(self):
        t = random_pyramid(12, seed=3)
        d = random_pyramid(8, seed=4)
        base = decoder_loss(t, d).item()
        t2 = FeaturePyramid([m * 3.7 for m in t.patch_features])
        d2 = FeaturePyramid([m * 0.2 for m in d.patch_features])
        assert abs(decoder_loss(t2, d2).item() - base) < 1e-10

    def test_range_bounds(self):
        for seed in range(10):
            t = random_pyramid(12, seed=300 + seed)
            d = random_pyramid(8, seed=400 + seed)
            val = decoder_loss(t, d).item()
            assert 0.0 <= val <= 2.0

    def test_gradient_reaches_decoder_features(self):
        t = random_pyramid(12, seed=5)
        maps = [Tensor(stream_rng(6, 61).normal(size=(4, 2, 2)), requires_grad=True)
                for _ in range(8)]
        d = FeaturePyramid(maps)
        decoder_loss(t, d).backward()
        assert all(m.grad is not None for m in maps)


class TestEncoderLoss:
    def test_identical_tokens_zero(self):
        t = random_pyramid(12, with_tokens=True, seed=6)
        e = FeaturePyramid(list(t.patch_features), list(t.class_tokens),
                           t.final_class_token)
        assert encoder_loss(t, e).item() == 0.0

    def test_all_ones_offset_gives_channel_count(self):
        c = 4
        t = random_pyramid(12, channels=c, with_tokens=True, seed=7)
        ones = np.ones(c)
        e = FeaturePyramid(
            list(t.patch_features),
            [Tensor(tok.data + ones) for tok in t.class_tokens],
            Tensor(t.final_class_token.data + ones))
        assert abs(encoder_loss(t, e).item() - c) < 1e-12

    def test_matches_direct_oracle_m12_c32(self):
        t = random_pyramid(12, channels=32, with_tokens=True, seed=8)
        e = random_pyramid(12, channels=32, with_tokens=True, seed=9)
        assert abs(encoder_loss(t, e).item() - oracle_encoder_loss(t, e)) < 1e-10

    def test_token_count_mismatch(self):
        t = random_pyramid(12, with_tokens=True, seed=10)
        e = random_pyramid(11, with_tokens=True, seed=11)
        with pytest.raises(ValueError):
            encoder_loss(t, e)

    def test_distinct_seeds_give_positive_loss_on_real_networks(self):
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=12,
                        num_heads=2, mlp_ratio=2.0)
        teacher = VisionTransformer.create(cfg, master_seed=0)
        student = VisionTransformer.create(cfg, master_seed=1)
        img = stream_rng(0, 62).random((1, 8, 8))
        val = encoder_loss(teacher.forward(img), student.forward(img)).item()
        assert val > 0.0

    def test_copied_weights_give_zero_on_real_networks(self):
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=12,
                        num_heads=2, mlp_ratio=2.0)
        teacher = VisionTransformer.create(cfg, master_seed=0)
        student = VisionTransformer(cfg, {k: Tensor(v.data.copy(), requires_grad=True)
                                          for k, v in teacher.params.items()})
        img = stream_rng(1, 62).random((1, 8, 8))
        assert encoder_loss(teacher.forward(img), student.forward(img)).item() < 1e-10


class TestScores:
    def test_score_last_examples(self):
        t = random_pyramid(12, channels=4, with_tokens=True, seed=12)
        same = FeaturePyramid([], list(t.class_tokens), t.final_class_token)
        assert encoder_score_last(t, same) == 0.0
        off = FeaturePyramid([], list(t.class_tokens),
                             Tensor(t.final_class_token.data + 1.0))
        assert abs(encoder_score_last(t, off) - 4.0) < 1e-12
        rnd = random_pyramid(12, channels=4, with_tokens=True, seed=13)
        d = t.final_class_token.data - rnd.final_class_token.data
        assert abs(encoder_score_last(t, rnd) - float(d @ d)) < 1e-12

    def test_score_prefix_examples(self):
        t = random_pyramid(2, channels=4, with_tokens=True, seed=14)
        e = random_pyramid(2, channels=4, with_tokens=True, seed=15)
        d0 = t.class_tokens[0].data - e.class_tokens[0].data
        assert abs(encoder_score_prefix(t, e) - float(d0 @ d0)) < 1e-12
        t12 = random_pyramid(12, channels=4, with_tokens=True, seed=16)
        e12 = random_pyramid(12, channels=4, with_tokens=True, seed=17)
        want = np.mean([np.sum((t12.class_tokens[j].data - e12.class_tokens[j].data) ** 2)
                        for j in range(11)])
        assert abs(encoder_score_prefix(t12, e12) - want) < 1e-10

    def test_score_prefix_needs_two_levels(self):
        t = random_pyramid(1, with_tokens=True, seed=18)
        with pytest.raises(ValueError):
            encoder_score_prefix(t, t)


class TestNoisyOr:
    def test_zero_losses(self):
        r = noisy_or_probability(0.0, 0.0)
        assert r.p_normal == 0.75
        assert r.anomaly == 0.25
        assert r.p_encoder == 0.5 and r.p_decoder == 0.5

    def test_saturation(self):
        r = noisy_or_probability(20.0, 20.0)
        assert r.p_normal <= 1e-8 + 1e-12

    def test_half_one_matches_high_precision_oracle(self):
        r = noisy_or_probability(0.5, 1.0)
        assert abs(r.anomaly - SIG_HALF_TIMES_SIG_ONE) < 1e-12
        assert abs(r.p_normal - (1.0 - SIG_HALF_TIMES_SIG_ONE)) < 1e-12

    def test_identities_on_random_pairs(self):
        rng = stream_rng(2, 63)
        for _ in range(200):
            le, ld = rng.uniform(0, 12, size=2)
            r = noisy_or_probability(le, ld)
            assert abs(r.p_normal - (1.0 - (1.0 - r.p_encoder) * (1.0 - r.p_decoder))) < 1e-12
            assert abs((1.0 - r.p_encoder) - 1.0 / (1.0 + math.exp(-le))) < 1e-12
            assert abs(r.anomaly - (1.0 - r.p_normal)) < 1e-15

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            noisy_or_probability(float("nan"), 0.0)


class TestTotalLoss:
    def test_single_normal_zero_losses(self):
        val = total_loss([(0.0, 0.0, 1)]).item()
        assert abs(val - (-math.log(0.75))) < 1e-12

    def test_single_abnormal_saturated(self):
        val = total_loss([(20.0, 20.0, 0)]).item()
        assert abs(val) < 1e-6

    def test_mixed_batch_matches_term_by_term_oracle(self):
        batch = [(0.3, 0.7, 1), (2.0, 0.1, 0), (1.5, 1.5, 1)]
        def sig(x):
            return 1.0 / (1.0 + math.exp(-x))
        want = 0.0
        for le, ld, y in batch:
            p = 1.0 - sig(le) * sig(ld)
            want += y * math.log(p) + (1 - y) * math.log(1.0 - p)
        want = -want / len(batch)
        assert abs(total_loss(batch).item() - want) < 1e-12

    def test_clamp_keeps_logs_finite(self):
        # anomaly probability ~0 -> log clamped, loss finite
        val = total_loss([(-40.0, -40.0, 0)]).item()
        assert math.isfinite(val)
        assert val <= -math.log(1e-7) + 1e-9

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError):
            total_loss([(0.0, 0.0, 2)])
        with pytest.raises(ValueError):
            total_loss([])


class TestGating:
    """The co-training gate: each branch's gradient is scaled by the other
    branch's anomaly vote, checked against finite differences."""

    def _setup(self):
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=10,
                        num_heads=2, mlp_ratio=2.0)
        dec_cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=8,
                            num_heads=2, mlp_ratio=2.0, has_class_token=False)
        teacher = VisionTransformer.create(cfg, master_seed=0)
        teacher.freeze()
        encoder = VisionTransformer.create(cfg, master_seed=1)
        bottleneck = NoisyBottleneck.create(BottleneckConfig(), embed_dim=8, master_seed=2)
        decoder = FeatureDecoder.create(dec_cfg, master_seed=3)
        img = stream_rng(3, 64).random((1, 8, 8))
        t_pyr = teacher.forward(img)
        return teacher, encoder, bottleneck, decoder, img, t_pyr

    @staticmethod
    def _fd(fn, tensor, flat_idx, h=1e-5):
        flat = tensor.data.reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + h
        fp = fn()
        flat[flat_idx] = orig - h
        fm = fn()
        flat[flat_idx] = orig
        return (fp - fm) / (2 * h)

    def test_encoder_gradient_obeys_gate(self):
        _, encoder, bottleneck, decoder, img, t_pyr = self._setup()
        fused = fuse_mid_layers(t_pyr)
        l_sd = decoder_loss(t_pyr, decoder.forward(
            bottleneck.forward(fused, training=False))).item()

        l_se_t = encoder_loss(t_pyr, encoder.forward(img))
        fusion = noisy_or_probability(l_se_t.item(), l_sd)
        gate = gate_coefficient(fusion.p_decoder, fusion.p_normal)

        total = total_loss([(l_se_t, l_sd, 1)])
        total.backward()

        def p_se():
            le = encoder_loss(t_pyr, encoder.forward(img)).item()
            return 1.0 / (1.0 + math.exp(le))

        rng = stream_rng(4, 64)
        names = sorted(encoder.params)
        for _ in range(6):
            name = names[rng.integers(len(names))]
            t = encoder.params[name]
            idx = int(rng.integers(t.data.size))
            analytic = t.grad.reshape(-1)[idx]
            numeric = -gate * self._fd(p_se, t, idx)
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8

    def test_decoder_gradient_obeys_symmetric_gate(self):
        _, encoder, bottleneck, decoder, img, t_pyr = self._setup()
        l_se = encoder_loss(t_pyr, encoder.forward(img)).item()
        fused = fuse_mid_layers(t_pyr)

        def l_sd_tensor():
            return decoder_loss(t_pyr, decoder.forward(
                bottleneck.forward(fused, training=False)))

        fusion = noisy_or_probability(l_se, l_sd_tensor().item())
        gate = gate_coefficient(fusion.p_encoder, fusion.p_normal)

        total = total_loss([(l_se, l_sd_tensor(), 1)])
        total.backward()

        def p_sd():
            return 1.0 / (1.0 + math.exp(l_sd_tensor().item()))

        rng = stream_rng(5, 64)
        for params in (decoder.params, bottleneck.params):
            names = sorted(params)
            for _ in range(3):
                name = names[rng.integers(len(names))]
                t = params[name]
                idx = int(rng.integers(t.data.size))
                analytic = t.grad.reshape(-1)[idx]
                numeric = -gate * self._fd(p_sd, t, idx)
                assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8

    def test_gate_coefficient_examples(self):
        assert abs(gate_coefficient(0.5, 0.75) - 2.0 / 3.0) < 1e-15
        assert gate_coefficient(1.0, 0.6) == 0.0
        with pytest.raises(ValueError):
            gate_coefficient(0.5, 0.0)


class TestAnomalyScore:
    def test_examples(self):
        assert anomaly_score(0.0, 0.0, "noisy_or") == 0.25
        assert anomaly_score(0.0, 0.0, "plain_sum") == 0.0
        assert abs(anomaly_score(0.5, 1.0, "noisy_or") - SIG_HALF_TIMES_SIG_ONE) < 1e-12

    def test_unknown_fusion(self):
        with pytest.raises(ValueError):
            anomaly_score(0.0, 0.0, "mean")

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 3.0))
    @settings(max_examples=50, deadline=None)
    def test_strictly_increasing_in_each_argument(self, lp, ld, delta):
        base = anomaly_score(lp, ld, "noisy_or")
        assert anomaly_score(lp + delta, ld, "noisy_or") > base
        assert anomaly_score(lp, ld + delta, "noisy_or") > base

    def test_rank_order_invariant_under_common_shift(self):
        # a common additive shift of the last-token losses is a monotone
        # transform of the score once the decoder losses are held common,
        # so ranks (hence AUROC) cannot move
        rng = stream_rng(6, 65)
        lps = rng.uniform(0, 4, size=24)
        ld = 0.9
        base = [anomaly_score(a, ld, "noisy_or") for a in lps]
        shifted = [anomaly_score(a + 1.3, ld, "noisy_or") for a in lps]
        assert np.array_equal(np.argsort(base), np.argsort(shifted))
        plain = [anomaly_score(a, b, "plain_sum")
                 for a, b in zip(lps, rng.uniform(0, 2, size=24))]
        plain_shift = [p + 1.3 for p in plain]
        assert np.array_equal(np.argsort(plain), np.argsort(plain_shift))


class TestMaps:
    def test_identical_pyramids_zero_map(self):
        t = random_pyramid(12, seed=20)
        d = FeaturePyramid([t.patch_features[j + 2] for j in range(8)])
        out = anomaly_map(t, d, target_size=8).data
        assert out.shape == (8, 8)
        assert np.all(np.abs(out) < 1e-10)

    def test_single_negated_location_is_maximal(self):
        base = stream_rng(7, 66).normal(size=(4, 2, 2))
        t = FeaturePyramid([Tensor(base.copy()) for _ in range(12)])
        dec_maps = []
        for j in range(8):
            m = base.copy()
            if j < 4:
                m[:, 1, 0] = -m[:, 1, 0]
            dec_maps.append(Tensor(m))
        out = anomaly_map(t, FeaturePyramid(dec_maps), target_size=2).data
        assert np.unravel_index(np.argmax(out), out.shape) == (1, 0)
        assert abs(out[1, 0] - 2.0) < 1e-12
        out[1, 0] = 0.0
        assert np.all(np.abs(out) < 1e-12)

    def test_matches_per_location_oracle(self):
        t = random_pyramid(12, channels=5, grid=3, seed=21)
        d = random_pyramid(8, channels=5, grid=3, seed=22)
        got = anomaly_map(t, d, target_size=3).data
        for h in range(3):
            for w in range(3):
                want = 0.0
                for i in (1, 2):
                    ft = np.mean([t.patch_features[j - 1].data[:, h, w]
                                  for j in range(4 * i - 1, 4 * i + 3)], axis=0)
                    fd = np.mean([d.patch_features[j - 1].data[:, h, w]
                                  for j in range(4 * i - 3, 4 * i + 1)], axis=0)
                    cos = float(ft @ fd) / (np.linalg.norm(ft) * np.linalg.norm(fd))
                    want += 1.0 - cos
                assert abs(got[h, w] - want) < 1e-10

    def test_bilinear_matches_loop_oracle(self):
        arr = stream_rng(8, 66).normal(size=(3, 3))
        target = 7
        got = bilinear_resize(arr, target)
        scale = 3 / target
        for oy in range(target):
            for ox in range(target):
                sy = min(max((oy + 0.5) * scale - 0.5, 0), 2)
                sx = min(max((ox + 0.5) * scale - 0.5, 0), 2)
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                y1, x1 = min(y0 + 1, 2), min(x0 + 1, 2)
                fy, fx = sy - y0, sx - x0
                want = (arr[y0, x0] * (1 - fy) * (1 - fx) + arr[y0, x1] * (1 - fy) * fx
                        + arr[y1, x0] * fy * (1 - fx) + arr[y1, x1] * fy * fx)
                assert abs(got[oy, ox] - want) < 1e-12

    def test_box_smooth_constant_preserved(self):
        arr = np.full((4, 4), 2.5)
        assert np.allclose(box_smooth3(arr), 2.5, atol=1e-12)

    def test_variance_map_examples(self):
        base = stream_rng(9, 66).normal(size=(4, 3, 3))
        assert np.all(feature_variance_map([Tensor(base), Tensor(base.copy())]).data == 0.0)
        out = feature_variance_map([Tensor(base), Tensor(base + 1.0)]).data
        assert np.allclose(out, 0.25, atol=1e-12)
        samples = [stream_rng(10 + k, 66).normal(size=(4, 3, 3)) for k in range(5)]
        got = feature_variance_map([Tensor(s) for s in samples]).data
        want = np.var(np.stack([s.mean(axis=0) for s in samples]), axis=0)
        assert np.allclose(got, want, atol=1e-12)
        with pytest.raises(ValueError):
            feature_variance_map([Tensor(base)])


class TestScoreRecords:
    def test_csv_round_trip(self, tmp_path):
        rng = stream_rng(11, 67)
        records = []
        for k in range(5):
            losses = BranchLosses(*rng.uniform(0, 3, size=4))
            records.append(ScoreRecord.from_losses(f"s{k:03d}", "test", k % 2, losses))
        path = tmp_path / "scores.csv"
        write_score_records(path, records)
        back = read_score_records(path)
        assert back == records

    def test_from_losses_fuses_consistently(self):
        losses = BranchLosses(encoder=0.4, decoder=0.8, score_last=0.5, score_prefix=0.3)
        rec = ScoreRecord.from_losses("x", "test", 1, losses)
        assert rec.anomaly_noisy_or == anomaly_score(0.5, 0.8, "noisy_or")
        assert rec.anomaly_plain_sum == 0.5 + 0.8

    def test_branch_losses_bundle_on_real_networks(self):
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=12,
                        num_heads=2, mlp_ratio=2.0)
        dec_cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=8,
                            num_heads=2, mlp_ratio=2.0, has_class_token=False)
        teacher = VisionTransformer.create(cfg, master_seed=0)
        teacher.freeze()
        encoder = VisionTransformer.create(cfg, master_seed=1)
        bn = NoisyBottleneck.create(BottleneckConfig(), 8, master_seed=2)
        decoder = FeatureDecoder.create(dec_cfg, master_seed=3)
        img = stream_rng(12, 67).random((1, 8, 8))
        t_pyr = teacher.forward(img)
        e_pyr = encoder.forward(img)
        d_pyr = decoder.forward(bn.forward(fuse_mid_layers(t_pyr), training=False))
        bl = branch_losses(t_pyr, e_pyr, d_pyr)
        assert bl.encoder >= 0 and bl.score_last >= 0 and bl.score_prefix >= 0
        assert 0.0 <= bl.decoder <= 2.0
