"""Rectified-flow machinery: straight-line interpolation between Gaussian
noise and data, constant velocity targets, the weighted matching loss, and
a fixed-step Euler sampler.

All three components (patches, CLS, registers) share one timestep per
sample; noise is drawn i.i.d. standard normal per component and element.
Each component's loss is the mean over its own elements, so the weights act
per component rather than per element.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedspace import SpaceConfig, TargetEmbedding
from .errors import NonFiniteError, RangeError, ShapeMismatchError

COMPONENTS = ("patch", "cls", "reg")


@dataclass(frozen=True)
class LossWeights:
    """Per-component weights of the matching loss; defaults 0.4/0.3/0.3."""

    lambda_p: float = 0.4
    lambda_cls: float = 0.3
    lambda_reg: float = 0.3

    def __post_init__(self):
        if min(self.lambda_p, self.lambda_cls, self.lambda_reg) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_p == self.lambda_cls == self.lambda_reg == 0:
            raise ValueError("loss weights must not all be zero")


@dataclass(frozen=True)
class FlowSample:
    """One training point: noise x0, data x1, time t, interpolation xt.

    xt = t*x1 + (1-t)*x0 elementwise per component.
    """

    x0: tuple  # (patches, cls, registers) noise arrays
    x1: TargetEmbedding
    t: float
    xt: tuple


def sample_t(rng) -> float:
    """Uniform timestep on [0, 1]."""
    return float(rng.random())


def make_flow_sample(x1: TargetEmbedding, t: float, rng) -> FlowSample:
    """Draw standard-normal noise per component and interpolate at time t."""
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"t={t} outside [0, 1]")
    x0 = tuple(
        rng.standard_normal(a.shape, dtype=np.float32)
        for a in (x1.patches, x1.cls, x1.registers)
    )
    t32 = np.float32(t)
    xt = tuple(
        t32 * a1 + (np.float32(1.0) - t32) * a0
        for a0, a1 in zip(x0, (x1.patches, x1.cls, x1.registers))
    )
    return FlowSample(x0=x0, x1=x1, t=t, xt=xt)


def velocity_target(fs: FlowSample) -> tuple:
    """Constant straight-path velocity x1 - x0, independent of t."""
    return (
        fs.x1.patches - fs.x0[0],
        fs.x1.cls - fs.x0[1],
        fs.x1.registers - fs.x0[2],
    )


def _component_mse(pred, target) -> float:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"{pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff))


def flow_loss(pred: tuple, fs: FlowSample, w: LossWeights) -> float:
    """Weighted sum of per-component mean squared velocity errors."""
    target = velocity_target(fs)
    return (
        w.lambda_p * _component_mse(pred[0], target[0])
        + w.lambda_cls * _component_mse(pred[1], target[1])
        + w.lambda_reg * _component_mse(pred[2], target[2])
    )


def batch_flow_loss(pred: tuple, target: tuple, w: LossWeights):
    """Loss and gradients for batched arrays.

    pred/target: (patches [B,h,w,d], cls [B,d], regs [B,n,d]).
    Returns (loss, per-component losses dict, dpred tuple).
    """
    weights = (w.lambda_p, w.lambda_cls, w.lambda_reg)
    loss = 0.0
    comps = {}
    dpred = []
    for name, wk, pk, tk in zip(COMPONENTS, weights, pred, target):
        if pk.shape != tk.shape:
            raise ShapeMismatchError(f"{name}: {pk.shape} vs {tk.shape}")
        diff = pk - tk
        mse = float(np.mean(diff * diff, dtype=np.float64))
        comps[name] = mse
        loss += wk * mse
        dpred.append((2.0 * wk / diff.size) * diff)
    return loss, comps, tuple(dpred)


def sample_batch(velocity_fn, cond, steps: int, rng, cfg: SpaceConfig) -> list[TargetEmbedding]:
    """Batched Euler integration sharing one rng stream.

    velocity_fn: (patches [B,h,w,d], cls [B,d], regs [B,n,d], t [B], cond)
    -> velocity triple. Noise is drawn per sample in batch order, so results
    are reproducible for a fixed rng seed.
    """
    if steps < 1:
        raise RangeError(f"steps must be >= 1, got {steps}")
    b = cond.shape[0]
    shapes = (
        (b, cfg.h, cfg.w, cfg.d_img),
        (b, cfg.d_img),
        (b, cfg.n_reg, cfg.d_img),
    )
    x = [rng.standard_normal(s, dtype=np.float32).astype(np.float64) for s in shapes]
    dt = 1.0 / steps
    for k in range(steps):
        t = np.full(b, k / steps, dtype=np.float32)
        v = velocity_fn(
            x[0].astype(np.float32), x[1].astype(np.float32), x[2].astype(np.float32), t, cond
        )
        for i in range(3):
            x[i] += dt * np.asarray(v[i], dtype=np.float64)
    out = []
    for i in range(b):
        e = TargetEmbedding(patches=x[0][i], cls=x[1][i], registers=x[2][i])
        if not (np.all(np.isfinite(e.patches)) and np.all(np.isfinite(e.cls)) and np.all(np.isfinite(e.registers))):
            raise NonFiniteError("sampler state diverged")
        out.append(e)
    return out


def sample(model, cond, steps: int, rng, cfg: SpaceConfig | None = None) -> TargetEmbedding:
    """Integrate the learned ODE from noise with fixed-step forward Euler.

    model: callable (xt_triple, t, cond) -> velocity triple. Integration
    runs in float64 with t_k = k/steps and step 1/steps; the result is cast
    to the float32 embedding type.
    """
    if steps < 1:
        raise RangeError(f"steps must be >= 1, got {steps}")
    cfg = cfg or SpaceConfig()
    shapes = ((cfg.h, cfg.w, cfg.d_img), (cfg.d_img,), (cfg.n_reg, cfg.d_img))
    x = [rng.standard_normal(s, dtype=np.float32).astype(np.float64) for s in shapes]
    dt = 1.0 / steps
    for k in range(steps):
        t = k / steps
        v = model(tuple(x), t, cond)
        for i in range(3):
            x[i] = x[i] + dt * np.asarray(v[i], dtype=np.float64)
    for arr in x:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("sampler state diverged")
    return TargetEmbedding(patches=x[0], cls=x[1], registers=x[2])
