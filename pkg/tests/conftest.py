import numpy as np
import pytest

from flowalign.embedspace import SpaceConfig, TargetEmbedding


@pytest.fixture
def small_space():
    return SpaceConfig(h=4, w=4, d_img=8, n_reg=2, s=4, d_cond=16)


@pytest.fixture
def desk_space():
    return SpaceConfig()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def random_embedding(cfg: SpaceConfig, rng) -> TargetEmbedding:
    return TargetEmbedding(
        patches=rng.standard_normal((cfg.h, cfg.w, cfg.d_img), dtype=np.float32),
        cls=rng.standard_normal(cfg.d_img, dtype=np.float32),
        registers=rng.standard_normal((cfg.n_reg, cfg.d_img), dtype=np.float32),
    )
