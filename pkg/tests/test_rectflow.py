import numpy as np
import pytest

from flowalign.embedspace import TargetEmbedding
from flowalign.errors import RangeError, ShapeMismatchError
from flowalign.rectflow import (
    FlowSample,
    LossWeights,
    flow_loss,
    make_flow_sample,
    sample,
    sample_t,
    velocity_target,
)

from .conftest import random_embedding


class TestMakeFlowSample:
    def test_t0_gives_noise(self, small_space, rng):
        x1 = random_embedding(small_space, rng)
        fs = make_flow_sample(x1, 0.0, rng)
        for a, b in zip(fs.xt, fs.x0):
            assert np.array_equal(a, b)

    def test_t1_gives_data(self, small_space, rng):
        x1 = random_embedding(small_space, rng)
        fs = make_flow_sample(x1, 1.0, rng)
        assert np.array_equal(fs.xt[0], x1.patches)
        assert np.array_equal(fs.xt[1], x1.cls)
        assert np.array_equal(fs.xt[2], x1.registers)

    def test_midpoint_matches_independent_computation(self, small_space):
        x1 = random_embedding(small_space, np.random.Generator(np.random.PCG64(7)))
        fs = make_flow_sample(x1, 0.5, np.random.Generator(np.random.PCG64(42)))
        # oracle: replay the identical noise draws from the same seed
        rng2 = np.random.Generator(np.random.PCG64(42))
        x0 = [
            rng2.standard_normal(a.shape, dtype=np.float32)
            for a in (x1.patches, x1.cls, x1.registers)
        ]
        expect = [
            np.float32(0.5) * (a + b)
            for a, b in zip(x0, (x1.patches, x1.cls, x1.registers))
        ]
        for got, want in zip(fs.xt, expect):
            assert np.allclose(got, want, atol=1e-7)

    def test_shared_t_across_components(self, small_space, rng):
        x1 = random_embedding(small_space, rng)
        t = 0.37
        fs = make_flow_sample(x1, t, rng)
        for xt, x0, x1a in zip(
            fs.xt, fs.x0, (x1.patches, x1.cls, x1.registers)
        ):
            recon = np.float32(t) * x1a + np.float32(1 - t) * x0
            assert np.array_equal(xt, recon)

    def test_t_out_of_range(self, small_space, rng):
        with pytest.raises(RangeError):
            make_flow_sample(random_embedding(small_space, rng), 1.5, rng)


class TestVelocityTarget:
    def test_zero_when_equal(self, small_space, rng):
        x1 = random_embedding(small_space, rng)
        fs = FlowSample(
            x0=(x1.patches.copy(), x1.cls.copy(), x1.registers.copy()),
            x1=x1, t=0.5,
            xt=(x1.patches, x1.cls, x1.registers),
        )
        assert all(np.all(v == 0) for v in velocity_target(fs))

    def test_independent_of_t(self, small_space, rng):
        x1 = random_embedding(small_space, rng)
        rng_a = np.random.Generator(np.random.PCG64(3))
        rng_b = np.random.Generator(np.random.PCG64(3))
        a = velocity_target(make_flow_sample(x1, 0.1, rng_a))
        b = velocity_target(make_flow_sample(x1, 0.9, rng_b))
        for va, vb in zip(a, b):
            assert np.array_equal(va, vb)

    def test_matches_brute_force_subtraction(self, small_space, rng):
        x1 = random_embedding(small_space, rng)
        fs = make_flow_sample(x1, 0.3, rng)
        v = velocity_target(fs)
        assert np.array_equal(v[0], x1.patches - fs.x0[0])
        assert np.array_equal(v[1], x1.cls - fs.x0[1])
        assert np.array_equal(v[2], x1.registers - fs.x0[2])


class TestFlowLoss:
    def test_zero_at_exact_target(self, small_space, rng):
        fs = make_flow_sample(random_embedding(small_space, rng), 0.4, rng)
        assert flow_loss(velocity_target(fs), fs, LossWeights()) == 0.0

    def test_unit_offset_sums_weights(self, small_space, rng):
        w = LossWeights(lambda_p=0.4, lambda_cls=0.3, lambda_reg=0.3)
        fs = make_flow_sample(random_embedding(small_space, rng), 0.4, rng)
        pred = tuple(v + 1.0 for v in velocity_target(fs))
        # each component's mean squared error is exactly 1
        assert abs(flow_loss(pred, fs, w) - (0.4 + 0.3 + 0.3)) < 1e-6

    def test_zero_pred_zero_noise_ones_data(self, small_space):
        c = small_space
        x1 = TargetEmbedding(
            patches=np.ones((c.h, c.w, c.d_img)),
            cls=np.ones(c.d_img),
            registers=np.ones((c.n_reg, c.d_img)),
        )
        zeros = (
            np.zeros_like(x1.patches), np.zeros_like(x1.cls), np.zeros_like(x1.registers)
        )
        fs = FlowSample(x0=zeros, x1=x1, t=0.5, xt=zeros)
        w = LossWeights(0.4, 0.3, 0.3)
        assert abs(flow_loss(zeros, fs, w) - 1.0) < 1e-9

    def test_nonnegative(self, small_space, rng):
        for _ in range(10):
            fs = make_flow_sample(random_embedding(small_space, rng), sample_t(rng), rng)
            pred = tuple(rng.standard_normal(v.shape) for v in velocity_target(fs))
            assert flow_loss(pred, fs, LossWeights()) >= 0

    def test_shape_mismatch(self, small_space, rng):
        fs = make_flow_sample(random_embedding(small_space, rng), 0.4, rng)
        bad = tuple(np.zeros((1, 1)) for _ in range(3))
        with pytest.raises(ShapeMismatchError):
            flow_loss(bad, fs, LossWeights())

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            LossWeights(-0.1, 0.5, 0.5)


class ConstantVelocityOracle:
    """Fake model returning (x1 - x0) for a fixed pair, for any state.

    Velocities are f64 so the only deviation left is integrator roundoff.
    """

    def __init__(self, x0, x1):
        self.v = tuple(
            np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
            for a, b in zip(x0, (x1.patches, x1.cls, x1.registers))
        )
        self.calls = []

    def __call__(self, xt, t, cond):
        self.calls.append((tuple(a.copy() for a in xt), t))
        return self.v


class TestSampler:
    @pytest.mark.parametrize("steps", [1, 7, 50])
    def test_exact_on_constant_velocity(self, small_space, steps):
        seed = 77
        rng_draw = np.random.Generator(np.random.PCG64(seed))
        shapes = [
            (small_space.h, small_space.w, small_space.d_img),
            (small_space.d_img,),
            (small_space.n_reg, small_space.d_img),
        ]
        x0 = [rng_draw.standard_normal(s, dtype=np.float32).astype(np.float64) for s in shapes]
        x1 = random_embedding(small_space, np.random.Generator(np.random.PCG64(5)))
        oracle = ConstantVelocityOracle(x0, x1)
        out = sample(oracle, None, steps, np.random.Generator(np.random.PCG64(seed)), small_space)
        for got, want in zip(
            (out.patches, out.cls, out.registers), (x1.patches, x1.cls, x1.registers)
        ):
            denom = np.maximum(np.abs(want), 1e-6)
            assert np.max(np.abs(got - want) / denom) < 1e-6

    def test_one_step_is_x0_plus_velocity(self, small_space, rng):
        x1 = random_embedding(small_space, np.random.Generator(np.random.PCG64(5)))
        seed = 123
        rng_draw = np.random.Generator(np.random.PCG64(seed))
        shapes = [
            (small_space.h, small_space.w, small_space.d_img),
            (small_space.d_img,),
            (small_space.n_reg, small_space.d_img),
        ]
        x0 = [rng_draw.standard_normal(s, dtype=np.float32).astype(np.float64) for s in shapes]
        oracle = ConstantVelocityOracle(x0, x1)
        out = sample(oracle, None, 1, np.random.Generator(np.random.PCG64(seed)), small_space)
        assert len(oracle.calls) == 1
        assert oracle.calls[0][1] == 0.0
        assert np.allclose(out.patches, np.float32(x0[0] + oracle.v[0]), atol=1e-6)

    def test_bit_identical_given_seed(self, small_space):
        x1 = random_embedding(small_space, np.random.Generator(np.random.PCG64(5)))
        zeros = (np.zeros_like(x1.patches), np.zeros_like(x1.cls), np.zeros_like(x1.registers))
        oracle = ConstantVelocityOracle(zeros, x1)
        a = sample(oracle, None, 9, np.random.Generator(np.random.PCG64(4)), small_space)
        b = sample(oracle, None, 9, np.random.Generator(np.random.PCG64(4)), small_space)
        assert a.equal_bits(b)

    def test_steps_validation(self, small_space, rng):
        with pytest.raises(RangeError):
            sample(lambda *a: None, None, 0, rng, small_space)


class TestSampleT:
    def test_monte_carlo_mean(self):
        rng = np.random.Generator(np.random.PCG64(0))
        draws = [sample_t(rng) for _ in range(100_000)]
        assert abs(np.mean(draws) - 0.5) < 0.01

    def test_range(self, rng):
        for _ in range(1000):
            assert 0.0 <= sample_t(rng) <= 1.0

    def test_reproducible(self):
        a = [sample_t(np.random.Generator(np.random.PCG64(9))) for _ in range(1)]
        b = [sample_t(np.random.Generator(np.random.PCG64(9))) for _ in range(1)]
        assert a == b
