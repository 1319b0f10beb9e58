import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowalign.embedspace import (
    SpaceConfig,
    TargetEmbedding,
    read_embedding_file,
    validate,
    write_embedding_file,
)
from flowalign.errors import FormatError, NonFiniteError, ShapeMismatchError

from .conftest import random_embedding


def zero_embedding(cfg):
    return TargetEmbedding(
        patches=np.zeros((cfg.h, cfg.w, cfg.d_img)),
        cls=np.zeros(cfg.d_img),
        registers=np.zeros((cfg.n_reg, cfg.d_img)),
    )


class TestValidate:
    def test_zero_filled_ok(self, small_space):
        validate(zero_embedding(small_space), small_space)

    def test_patch_width_off_by_one(self, small_space):
        c = small_space
        e = TargetEmbedding(
            patches=np.zeros((c.h, c.w + 1, c.d_img)),
            cls=np.zeros(c.d_img),
            registers=np.zeros((c.n_reg, c.d_img)),
        )
        with pytest.raises(ShapeMismatchError):
            validate(e, c)

    def test_nan_in_cls(self, small_space):
        e = zero_embedding(small_space)
        e.cls[0] = np.nan
        with pytest.raises(NonFiniteError):
            validate(e, small_space)

    def test_inf_in_patches(self, small_space):
        e = zero_embedding(small_space)
        e.patches[0, 0, 0] = np.inf
        with pytest.raises(NonFiniteError):
            validate(e, small_space)

    @given(
        pshape=st.tuples(*[st.integers(0, 5)] * 3),
        cshape=st.tuples(st.integers(0, 5)),
        rshape=st.tuples(*[st.integers(0, 5)] * 2),
    )
    @settings(max_examples=60, deadline=None)
    def test_total_on_arbitrary_shapes(self, pshape, cshape, rshape):
        # never panics: either passes or raises one of the two declared errors
        cfg = SpaceConfig(h=4, w=4, d_img=8, n_reg=2)
        e = TargetEmbedding(
            patches=np.zeros(pshape), cls=np.zeros(cshape), registers=np.zeros(rshape)
        )
        try:
            validate(e, cfg)
        except (ShapeMismatchError, NonFiniteError):
            pass


class TestEmbeddingFile:
    def test_round_trip_bit_exact(self, small_space, rng, tmp_path):
        batch = [random_embedding(small_space, rng) for _ in range(5)]
        path = tmp_path / "e.gape"
        write_embedding_file(path, batch)
        back = read_embedding_file(path)
        assert len(back) == 5
        for a, b in zip(batch, back):
            assert a.equal_bits(b)

    def test_single_round_trip(self, small_space, rng, tmp_path):
        path = tmp_path / "one.gape"
        e = random_embedding(small_space, rng)
        write_embedding_file(path, [e])
        assert read_embedding_file(path)[0].equal_bits(e)

    def test_empty_batch_rejected(self, tmp_path):
        with pytest.raises(ShapeMismatchError):
            write_embedding_file(tmp_path / "x.gape", [])

    def test_mixed_shapes_rejected(self, small_space, rng, tmp_path):
        other = SpaceConfig(h=4, w=4, d_img=16, n_reg=2)
        batch = [random_embedding(small_space, rng) for _ in range(2)]
        batch.append(random_embedding(other, rng))
        with pytest.raises(ShapeMismatchError):
            write_embedding_file(tmp_path / "x.gape", batch)

    def test_truncated_file(self, small_space, rng, tmp_path):
        path = tmp_path / "t.gape"
        write_embedding_file(path, [random_embedding(small_space, rng)])
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(FormatError):
            read_embedding_file(path)

    def test_wrong_magic(self, small_space, rng, tmp_path):
        path = tmp_path / "m.gape"
        write_embedding_file(path, [random_embedding(small_space, rng)])
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            read_embedding_file(path)

    def test_file_order_preserved(self, small_space, rng, tmp_path):
        batch = [random_embedding(small_space, rng) for _ in range(4)]
        path = tmp_path / "o.gape"
        write_embedding_file(path, batch)
        back = read_embedding_file(path)
        assert back[2].equal_bits(batch[2])
        assert not back[0].equal_bits(batch[1])


def test_space_config_invariants():
    with pytest.raises(ValueError):
        SpaceConfig(h=0)
    with pytest.raises(ValueError):
        SpaceConfig(n_reg=-1)
    cfg = SpaceConfig(h=3, w=5)
    assert cfg.n_patches == 15
    assert cfg.n_tokens == 1 + cfg.n_reg + 15
