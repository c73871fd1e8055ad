"""Attention states, merge algebra, decomposition identity, rotary embedding."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnmem.attention import (
    AttentionState,
    RopeConfig,
    apply_rope,
    attn_with_state,
    decompose_check,
    merge,
)
from conftest import brute_softmax_attention


def random_block(rng, n, d_h, dtype=np.float32):
    return (
        rng.standard_normal((n, d_h)).astype(dtype),
        rng.standard_normal((n, d_h)).astype(dtype),
    )


class TestAttnWithState:
    def test_zero_query_gives_uniform_softmax(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((3, 4)).astype(np.float32)
        keys = rng.standard_normal((3, 4)).astype(np.float32)
        state = attn_with_state(np.zeros(4, dtype=np.float32), keys, values)
        np.testing.assert_allclose(state.out, values.mean(axis=0), rtol=1e-6)
        assert state.log_z == pytest.approx(math.log(3), rel=1e-12)

    def test_empty_block(self):
        state = attn_with_state(
            np.ones(4, dtype=np.float32),
            np.zeros((0, 4), dtype=np.float32),
            np.zeros((0, 4), dtype=np.float32),
        )
        assert state.is_empty
        assert state.log_z == float("-inf")
        assert not state.out.any()

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        q = rng.standard_normal(4).astype(np.float32)
        keys, values = random_block(rng, 7, 4)
        state = attn_with_state(q, keys, values)
        oracle_out, oracle_log_z = brute_softmax_attention(q, keys, values)
        rel = np.abs(state.out - oracle_out).max() / np.abs(oracle_out).max()
        assert rel <= 1e-6
        assert state.log_z == pytest.approx(oracle_log_z, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dim"):
            attn_with_state(np.ones(3), np.ones((2, 4)), np.ones((2, 4)))
        with pytest.raises(ValueError, match="row counts"):
            attn_with_state(np.ones(4), np.ones((2, 4)), np.ones((3, 4)))

    def test_nonfinite_rejected(self):
        q = np.array([1.0, np.nan])
        with pytest.raises(ValueError, match="non-finite"):
            attn_with_state(q, np.ones((2, 2)), np.ones((2, 2)))

    def test_stability_at_huge_scores(self):
        # scores up to +-1e4: max-subtraction must keep everything finite
        d_h = 4
        q = np.full(d_h, 100.0, dtype=np.float32)
        keys = np.stack([np.full(d_h, 50.0), np.full(d_h, -50.0)]).astype(np.float32)
        values = np.ones((2, d_h), dtype=np.float32)
        scores = keys.astype(np.float64) @ q.astype(np.float64) / math.sqrt(d_h)
        assert np.abs(scores).max() == pytest.approx(1e4)
        state = attn_with_state(q, keys, values)
        assert np.isfinite(state.out).all()
        assert np.isfinite(state.log_z)

    def test_output_dtype_follows_inputs(self):
        rng = np.random.default_rng(1)
        q32 = rng.standard_normal(4).astype(np.float32)
        k, v = random_block(rng, 3, 4)
        assert attn_with_state(q32, k, v).out.dtype == np.float32
        q64, k64, v64 = q32.astype(np.float64), k.astype(np.float64), v.astype(np.float64)
        assert attn_with_state(q64, k64, v64).out.dtype == np.float64


class TestMerge:
    def test_identity_element_bit_exact(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal(8).astype(np.float32)
        k, v = random_block(rng, 5, 8)
        state = attn_with_state(q, k, v)
        empty = AttentionState.empty(8)
        for merged in (merge(state, empty), merge(empty, state)):
            assert np.array_equal(merged.out, state.out)
            assert merged.log_z == state.log_z

    def test_equal_outputs_masses_add(self):
        out = np.array([1.0, -2.0, 0.5], dtype=np.float32)
        s1 = AttentionState(out=out.copy(), log_z=math.log(1.0))
        s2 = AttentionState(out=out.copy(), log_z=math.log(3.0))
        merged = merge(s1, s2)
        np.testing.assert_allclose(merged.out, out, rtol=1e-6)
        assert merged.log_z == pytest.approx(math.log(4.0), rel=1e-12)

    def test_merge_equals_concatenated_block(self):
        rng = np.random.default_rng(7)
        q = rng.standard_normal(8).astype(np.float32)
        k1, v1 = random_block(rng, 6, 8)
        k2, v2 = random_block(rng, 9, 8)
        merged = merge(attn_with_state(q, k1, v1), attn_with_state(q, k2, v2))
        oracle_out, oracle_log_z = brute_softmax_attention(
            q, np.concatenate([k1, k2]), np.concatenate([v1, v2])
        )
        rel = np.abs(merged.out - oracle_out).max() / np.abs(oracle_out).max()
        assert rel <= 1e-6
        assert merged.log_z == pytest.approx(oracle_log_z, abs=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            merge(AttentionState.empty(3), AttentionState.empty(4))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_algebra_properties(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.standard_normal(6).astype(np.float32)
        states = [
            attn_with_state(q, *random_block(rng, int(rng.integers(1, 8)), 6))
            for _ in range(3)
        ]
        s1, s2, s3 = states
        ab, ba = merge(s1, s2), merge(s2, s1)
        assert np.abs(ab.out - ba.out).max() <= 1e-6 * max(np.abs(ba.out).max(), 1e-9)
        assert ab.log_z == pytest.approx(ba.log_z, abs=1e-9)
        left = merge(merge(s1, s2), s3)
        right = merge(s1, merge(s2, s3))
        assert np.abs(left.out - right.out).max() <= 1e-6 * max(np.abs(right.out).max(), 1e-9)
        mass = math.exp(merge(s1, s2).log_z)
        assert mass == pytest.approx(math.exp(s1.log_z) + math.exp(s2.log_z), rel=1e-6)


class TestDecomposeCheck:
    def test_single_block_error_exactly_zero(self):
        rng = np.random.default_rng(11)
        q = rng.standard_normal(4).astype(np.float32)
        k, v = random_block(rng, 5, 4)
        _, _, err = decompose_check(q, [(k, v)])
        assert err == 0.0

    def test_duplicated_block_symmetry(self):
        rng = np.random.default_rng(12)
        q = rng.standard_normal(4).astype(np.float32)
        k, v = random_block(rng, 5, 4)
        single = attn_with_state(q, k, v)
        merged, _, _ = decompose_check(q, [(k, v), (k, v)])
        np.testing.assert_allclose(merged.out, single.out, rtol=1e-6)
        assert merged.log_z == pytest.approx(single.log_z + math.log(2), abs=1e-9)

    def test_eight_random_blocks_f32(self):
        rng = np.random.default_rng(13)
        q = rng.standard_normal(8).astype(np.float32)
        blocks = [random_block(rng, int(rng.integers(1, 17)), 8) for _ in range(8)]
        _, _, err = decompose_check(q, blocks)
        assert err <= 1e-5

    def test_eight_random_blocks_f64(self):
        rng = np.random.default_rng(14)
        q = rng.standard_normal(8)
        blocks = [
            (rng.standard_normal((int(rng.integers(1, 17)), 8)), rng.standard_normal((int(rng.integers(1, 17)), 8)))
            for _ in range(8)
        ]
        blocks = [(k, rng.standard_normal(k.shape)) for k, _ in blocks]
        _, _, err = decompose_check(q, blocks)
        assert err <= 1e-12

    def test_no_blocks_rejected(self):
        with pytest.raises(ValueError):
            decompose_check(np.ones(4), [])


class TestApplyRope:
    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((3, 8)).astype(np.float32)
        assert np.array_equal(apply_rope(x, 0), x)

    def test_norm_preserved(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal((2, 16)).astype(np.float32)
        rotated = apply_rope(x, 1234)
        np.testing.assert_allclose(
            np.linalg.norm(rotated, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-6
        )

    def test_closed_form_two_dims(self):
        x = np.array([1.0, 0.0])
        rotated = apply_rope(x, 1, RopeConfig(theta_base=10000.0))
        np.testing.assert_allclose(rotated, [math.cos(1.0), math.sin(1.0)], rtol=1e-12)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            apply_rope(np.ones(3), 1)

    def test_rotations_compose(self):
        rng = np.random.default_rng(23)
        x = rng.standard_normal(8)
        both = apply_rope(apply_rope(x, 3), 4)
        direct = apply_rope(x, 7)
        np.testing.assert_allclose(both, direct, rtol=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RopeConfig(theta_base=0.0)
        with pytest.raises(ValueError):
            RopeConfig(virtual_position=-1)
