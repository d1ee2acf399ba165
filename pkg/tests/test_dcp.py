from dataclasses import replace

import numpy as np
import pytest

from mukv.core import BlockId, GranularityLevel, PerLevel
from mukv.dcp import (
    AttentionPayload,
    IndicatorMode,
    RetentionPolicy,
    attention_indicator,
    block_seed,
    compress_block,
    frequency_indicator,
    fuse_scores,
    select_topk,
)
from mukv.errors import EmptyMatrixError, LengthMismatchError, ShapeMismatchError

from conftest import attention_indicator_oracle, dft_magnitude_mean_oracle, random_record, topk_oracle


def default_policy(**kw):
    base = dict(alpha=PerLevel(0.5, 0.7, 0.8), rho=PerLevel(0.1, 0.1, 0.8))
    base.update(kw)
    return RetentionPolicy(**base)


class TestAttentionIndicator:
    def test_uniform_attention(self):
        h, n = 3, 5
        a = np.full((h, n, n), 1.0 / n, dtype=np.float32)
        scores = attention_indicator(AttentionPayload.from_raw(a), n, h)
        assert np.allclose(scores, 1.0 / n)

    def test_all_mass_on_token_zero(self):
        a = np.array([[[1.0, 0.0], [1.0, 0.0]]], dtype=np.float32)
        scores = attention_indicator(AttentionPayload.from_raw(a), 2, 1)
        assert np.allclose(scores, [1.0, 0.0])

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        h, n = 2, 7
        a = rng.uniform(size=(h, n, n))
        a /= a.sum(axis=2, keepdims=True)
        a = a.astype(np.float32)
        scores = attention_indicator(AttentionPayload.from_raw(a), n, h)
        assert np.allclose(scores, attention_indicator_oracle(a, n, h), atol=1e-6)

    def test_aggregated_matches_raw(self):
        rng = np.random.default_rng(1)
        h, n = 2, 6
        a = rng.uniform(size=(h, n, n))
        a /= a.sum(axis=2, keepdims=True)
        agg = a.sum(axis=(0, 1)).astype(np.float32)
        from_raw = attention_indicator(AttentionPayload.from_raw(a.astype(np.float32)), n, h)
        from_agg = attention_indicator(AttentionPayload.from_aggregated(agg), n, h)
        assert np.allclose(from_raw, from_agg, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            attention_indicator(AttentionPayload.from_aggregated(np.ones(3, dtype=np.float32)), 4, 1)


class TestFrequencyIndicator:
    def test_constant_sequence_energy_in_dc_bin(self):
        n, c = 8, 3
        scores = frequency_indicator(np.full((n, c), 2.5, dtype=np.float32))
        assert scores[0] == pytest.approx(2.5 * n)
        assert np.all(scores[1:] == 0.0)  # power-of-two length: exact cancellation

    def test_single_token(self):
        keys = np.array([[3.0, -4.0, 12.0]], dtype=np.float32)
        scores = frequency_indicator(keys)
        assert scores.shape == (1,)
        assert scores[0] == pytest.approx(np.abs(keys).mean())

    def test_against_naive_dft_oracle(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(8, 3)).astype(np.float32)
        assert np.allclose(frequency_indicator(m), dft_magnitude_mean_oracle(m), rtol=1e-5)

    def test_oracle_agreement_across_sizes(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(1, 257))
            d = int(rng.integers(1, 17))
            m = rng.normal(size=(n, d)).astype(np.float32)
            assert np.allclose(
                frequency_indicator(m), dft_magnitude_mean_oracle(m), rtol=1e-5, atol=1e-9
            )

    def test_empty_rejected(self):
        with pytest.raises(EmptyMatrixError):
            frequency_indicator(np.zeros((0, 4), dtype=np.float32))


class TestFuseScores:
    def test_attention_only_collapses(self):
        out = fuse_scores([3, 1, 2], [9, 9, 9], alpha=1.0)
        assert np.allclose(out, [1.0, 0.0, 0.5])

    def test_symmetric_cancellation(self):
        assert np.allclose(fuse_scores([0, 1], [1, 0], alpha=0.5), [0.5, 0.5])

    def test_hand_arithmetic(self):
        # 0.7 * [0, 0.5, 1] + 0.3 * [1, 0.5, 0]
        out = fuse_scores([2, 4, 6], [6, 5, 4], alpha=0.7)
        assert np.allclose(out, [0.3, 0.5, 0.7])

    def test_low_frequency_flip(self):
        high = fuse_scores([0, 0], [1, 5], alpha=0.0, keep_high_frequency=True)
        low = fuse_scores([0, 0], [1, 5], alpha=0.0, keep_high_frequency=False)
        assert np.allclose(high, [0.0, 1.0])
        assert np.allclose(low, [1.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            fuse_scores([1, 2], [1, 2, 3], alpha=0.5)


class TestSelectTopk:
    def test_direct_sort(self):
        assert select_topk([0.9, 0.1, 0.5], rho=2 / 3).tolist() == [0, 2]

    def test_tie_break_by_index(self):
        assert select_topk([1.0, 1.0, 1.0, 1.0], rho=0.5).tolist() == [0, 1]

    def test_reference_patch_budget(self):
        rng = np.random.default_rng(4)
        assert len(select_topk(rng.normal(size=49), rho=0.1)) == 4

    def test_floor_of_one(self):
        assert select_topk([0.3, 0.7], rho=0.1).tolist() in ([0], [1])
        assert len(select_topk([0.3], rho=0.01)) == 1

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            n = int(rng.integers(1, 40))
            # quantized scores force plenty of ties
            scores = rng.integers(0, 5, size=n).astype(np.float64) / 4.0
            rho = float(rng.uniform(0.05, 1.0))
            assert select_topk(scores, rho).tolist() == topk_oracle(scores.tolist(), rho)

    def test_monotone_nesting_in_rho(self):
        rng = np.random.default_rng(6)
        scores = rng.normal(size=37)
        previous = set()
        for rho in (0.1, 0.25, 0.5, 0.75, 1.0):
            current = set(select_topk(scores, rho).tolist())
            assert previous <= current
            previous = current


def _compress(record, policy, block_index=0):
    heads = record.geometry.num_heads
    ts = (record.time_start + record.time_end) / 2
    return compress_block(record.blocks[block_index], policy, ts, heads)


class TestCompressBlock:
    def test_frame_block_budget(self, desk_config):
        rng = np.random.default_rng(7)
        record = random_record(rng, desk_config, 0)
        frame_ix = next(
            i for i, b in enumerate(record.blocks) if b.block_id.granularity is GranularityLevel.FRAME
        )
        block = _compress(record, default_policy(), frame_ix)
        assert block.kappa == 19
        assert all(k.shape == (19, desk_config.geometry.concat_dim) for k in block.layer_keys)

    def test_segment_block_budget(self, desk_config):
        rng = np.random.default_rng(8)
        record = random_record(rng, desk_config, 0)
        seg_ix = next(
            i for i, b in enumerate(record.blocks) if b.block_id.granularity is GranularityLevel.SEGMENT
        )
        block = _compress(record, default_policy(), seg_ix)
        assert block.kappa == 627

    def test_random_mode_deterministic(self, small_config):
        rng = np.random.default_rng(9)
        record = random_record(rng, small_config, 0)
        policy = default_policy(indicator_mode=IndicatorMode.RANDOM, seed=7)
        a = _compress(record, policy)
        b = _compress(record, policy)
        assert a.retained_indices.tolist() == b.retained_indices.tolist()
        assert a.encode() == b.encode()
        other = default_policy(indicator_mode=IndicatorMode.RANDOM, seed=8)
        c = _compress(record, other)
        assert a.retained_indices.tolist() != c.retained_indices.tolist() or a.kappa == c.kappa

    def test_byte_determinism(self, small_config):
        rng = np.random.default_rng(10)
        record = random_record(rng, small_config, 0)
        assert _compress(record, default_policy()).encode() == _compress(record, default_policy()).encode()

    def test_retained_indices_ascending_and_uniform_rows(self, small_config):
        rng = np.random.default_rng(11)
        record = random_record(rng, small_config, 1)
        for i in range(len(record.blocks)):
            block = _compress(record, default_policy(), i)
            idx = block.retained_indices.astype(int)
            assert (np.diff(idx) > 0).all() or len(idx) == 1
            assert len({k.shape[0] for k in block.layer_keys} | {v.shape[0] for v in block.layer_values}) == 1

    def test_summary_is_mean_of_retained_last_layer_keys(self, small_config):
        rng = np.random.default_rng(12)
        record = random_record(rng, small_config, 0)
        policy = default_policy()
        raw = record.blocks[0]
        block = _compress(record, policy, 0)
        keep = block.retained_indices.astype(int)
        expected = raw.layer_keys[-1][keep].astype(np.float64).mean(axis=0).astype(np.float32)
        assert np.allclose(block.summary, expected, atol=1e-7)

    def test_attention_only_ignores_keys(self, small_config):
        rng = np.random.default_rng(13)
        record = random_record(rng, small_config, 0)
        policy = default_policy(indicator_mode=IndicatorMode.ATTENTION_ONLY)
        before = _compress(record, policy).retained_indices.tolist()
        record.blocks[0].layer_keys[-1] = rng.normal(
            size=record.blocks[0].layer_keys[-1].shape
        ).astype(np.float32)
        after = _compress(record, policy).retained_indices.tolist()
        assert before == after

    def test_frequency_only_ignores_attention(self, small_config):
        rng = np.random.default_rng(14)
        record = random_record(rng, small_config, 0)
        policy = default_policy(indicator_mode=IndicatorMode.FREQUENCY_ONLY)
        before = _compress(record, policy).retained_indices.tolist()
        n = record.blocks[0].token_count
        heads = small_config.geometry.num_heads
        agg = rng.uniform(0.5, 1.5, size=n)
        agg *= (heads * n) / agg.sum()
        record.blocks[0].payload = AttentionPayload.from_aggregated(agg.astype(np.float32))
        after = _compress(record, policy).retained_indices.tolist()
        assert before == after

    def test_monotone_rho_nesting(self, small_config):
        rng = np.random.default_rng(15)
        record = random_record(rng, small_config, 0)
        previous = set()
        for rho in (0.1, 0.3, 0.6, 1.0):
            policy = default_policy(rho=PerLevel(rho, rho, rho))
            block = _compress(record, policy)
            current = set(block.retained_indices.tolist())
            assert previous <= current
            previous = current


class TestBlockSeed:
    def test_stable_and_distinct(self):
        a = BlockId(GranularityLevel.FRAME, 3, 1)
        b = BlockId(GranularityLevel.FRAME, 3, 2)
        assert block_seed(0, a) == block_seed(0, a)
        assert block_seed(0, a) != block_seed(0, b)
        assert block_seed(0, a) != block_seed(1, a)
