import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowalign.errors import ShapeMismatchError
from flowalign.hybridpos import (
    GlobalPosEmbeddings,
    OddHeadDimError,
    RopeTable,
    add_global_pos,
    apply_rope_stream,
    apply_rope_stream_bwd,
    identity_rotary,
    rope2d_apply,
    stream_rope_tables,
)


@pytest.fixture
def table():
    return RopeTable(head_dim=16, max_pos=32)


class TestRope2d:
    def test_origin_is_identity(self, table, rng):
        x = rng.standard_normal(16)
        assert np.allclose(rope2d_apply(x, (0, 0), table), x, atol=1e-12)

    def test_norm_preserved(self, table, rng):
        for _ in range(20):
            x = rng.standard_normal(16)
            i, j = rng.integers(0, 32, 2)
            y = rope2d_apply(x, (int(i), int(j)), table)
            assert abs(np.linalg.norm(y) - np.linalg.norm(x)) < 1e-6 * np.linalg.norm(x)

    def test_relative_position_property(self, table, rng):
        # attention logits depend only on the positional offset
        q = rng.standard_normal(16)
        k = rng.standard_normal(16)
        ref = np.dot(rope2d_apply(q, (3, 5), table), rope2d_apply(k, (1, 2), table))
        for di, dj in [(1, 0), (0, 1), (5, 7), (10, 20)]:
            shifted = np.dot(
                rope2d_apply(q, (3 + di, 5 + dj), table),
                rope2d_apply(k, (1 + di, 2 + dj), table),
            )
            assert abs(shifted - ref) < 1e-5 * max(1.0, abs(ref))

    def test_odd_head_dim_rejected(self):
        with pytest.raises(OddHeadDimError):
            RopeTable(head_dim=6, max_pos=4)

    def test_dim_mismatch(self, table, rng):
        with pytest.raises(ShapeMismatchError):
            rope2d_apply(rng.standard_normal(8), (0, 0), table)

    @given(st.integers(0, 15), st.integers(0, 15))
    @settings(max_examples=30, deadline=None)
    def test_isometry_property(self, i, j):
        t = RopeTable(head_dim=8, max_pos=16)
        x = np.arange(1.0, 9.0)
        y = rope2d_apply(x, (i, j), t)
        assert abs(np.linalg.norm(y) - np.linalg.norm(x)) < 1e-6 * np.linalg.norm(x)


class TestIdentityRotary:
    def test_exact_identity(self, rng):
        x = rng.standard_normal(12)
        assert identity_rotary(x) is x

    def test_matches_rope_at_origin(self, table, rng):
        x = rng.standard_normal(16)
        assert np.allclose(identity_rotary(x), rope2d_apply(x, (0, 0), table), atol=1e-12)

    def test_nan_passthrough(self):
        x = np.array([np.nan, 1.0, 2.0])
        out = identity_rotary(x)
        assert np.isnan(out[0]) and out[1] == 1.0


class TestStreamTables:
    def test_globals_identity_patches_rotated(self, small_space, rng):
        cos, sin = stream_rope_tables(small_space, 8)
        n_glob = 1 + small_space.n_reg
        assert np.all(cos[:n_glob] == 1.0) and np.all(sin[:n_glob] == 0.0)
        assert np.any(sin[n_glob:] != 0.0)

    def test_stream_apply_matches_single_vector(self, small_space, rng):
        head_dim = 8
        cos, sin = stream_rope_tables(small_space, head_dim, dtype=np.float64)
        table = RopeTable(head_dim=head_dim, max_pos=max(small_space.h, small_space.w))
        x = rng.standard_normal((1, 1, small_space.n_tokens, head_dim))
        y = apply_rope_stream(x, cos, sin)[0, 0]
        k = 1 + small_space.n_reg
        for i in range(small_space.h):
            for j in range(small_space.w):
                expect = rope2d_apply(x[0, 0, k], (i, j), table)
                assert np.allclose(y[k], expect, atol=1e-12)
                k += 1

    def test_bwd_is_inverse(self, small_space, rng):
        cos, sin = stream_rope_tables(small_space, 8, dtype=np.float64)
        x = rng.standard_normal((2, 3, small_space.n_tokens, 8))
        back = apply_rope_stream_bwd(apply_rope_stream(x, cos, sin), cos, sin)
        assert np.allclose(back, x, atol=1e-12)


class TestGlobalPos:
    def test_zero_tokens_give_table(self, rng):
        g = GlobalPosEmbeddings.init(3, 8, rng)
        out = add_global_pos(np.zeros((4, 8)), g)
        assert np.array_equal(out, g.table)

    def test_zero_table_keeps_tokens(self, rng):
        g = GlobalPosEmbeddings(table=np.zeros((4, 8), dtype=np.float32))
        tokens = rng.standard_normal((4, 8))
        assert np.allclose(add_global_pos(tokens, g), tokens)

    def test_rows_distinct_after_init(self, rng):
        g = GlobalPosEmbeddings.init(4, 16, rng)
        for i in range(5):
            for j in range(i + 1, 5):
                assert not np.array_equal(g.table[i], g.table[j])

    def test_shape_mismatch(self, rng):
        g = GlobalPosEmbeddings.init(3, 8, rng)
        with pytest.raises(ShapeMismatchError):
            add_global_pos(np.zeros((5, 8)), g)

    def test_gradient_equals_summed_token_gradient(self, rng):
        # loss = sum(probe * (tokens + table)); finite differences on table
        # must equal the analytic gradient wrt the sum, which is probe itself
        g = GlobalPosEmbeddings.init(2, 4, rng)
        g.table = g.table.astype(np.float64)  # f64 so the 1e-6 step is exact
        tokens = rng.standard_normal((3, 4))
        probe = rng.standard_normal((3, 4))
        h = 1e-6
        fd = np.zeros_like(g.table, dtype=np.float64)
        for i in range(3):
            for j in range(4):
                g.table[i, j] += h
                lp = np.sum(probe * add_global_pos(tokens, g))
                g.table[i, j] -= 2 * h
                lm = np.sum(probe * add_global_pos(tokens, g))
                g.table[i, j] += h
                fd[i, j] = (lp - lm) / (2 * h)
        assert np.allclose(fd, probe, atol=1e-5)
