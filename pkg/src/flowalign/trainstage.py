"""Two-stage training: curriculum over dataset flavors, AdamW with cosine
annealing, named-tensor checkpointing, and a finite-difference grad checker.

Only the DiT parameters, the global position table, and the prompt
encoder's soft tokens are trainable; every frozen parameter stays
bit-identical across any run.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .alignerdit import DitConfig, DitModel, init_dit_params
from .embedspace import SpaceConfig
from .errors import FormatError, NonFiniteError, RangeError, ShapeMismatchError
from .rectflow import LossWeights, batch_flow_loss
from .synthworld import TEACHER_SEED, FrozenPromptEncoder, PromptTokens, read_dataset

STAGE_LR = {
    "pretrain": (2.8e-4, 1e-5),
    "finetune": (5.6e-4, 0.0),
}


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from lr_max (step 0) to lr_min (step total)."""
    if total < 1:
        raise RangeError(f"total must be >= 1, got {total}")
    if not 0 <= step <= total:
        raise RangeError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def init_opt_state(params: dict) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def optimizer_step(
    params: dict,
    grads: dict,
    state: dict,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
):
    """One decoupled-weight-decay adaptive update, in place.

    Decay multiplies parameters directly by (1 - lr*weight_decay); it is
    never folded into the gradients. Moment estimates are bias-corrected.
    """
    if lr < 0:
        raise RangeError("lr must be >= 0")
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{k}: grad {g.shape} vs param {p.shape}")
        m = state["m"][k]
        v = state["v"][k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


CKPT_MAGIC = b"GAPC"
CKPT_VERSION = 1


@dataclass
class CheckpointArchive:
    """Named f32 tensors plus JSON metadata; save/load is bit-exact."""

    entries: dict[str, np.ndarray]
    metadata: dict

    def save(self, path) -> None:
        names = list(self.entries)
        offset = 0
        manifest_entries = []
        for n in names:
            a = self.entries[n]
            if a.dtype != np.float32:
                raise ShapeMismatchError(f"entry {n} must be float32, got {a.dtype}")
            manifest_entries.append({"name": n, "shape": list(a.shape), "offset": offset})
            offset += 4 * a.size
        manifest = json.dumps(
            {"entries": manifest_entries, "metadata": self.metadata}
        ).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", CKPT_VERSION))
            f.write(struct.pack("<I", len(manifest)))
            f.write(manifest)
            for n in names:
                f.write(np.ascontiguousarray(self.entries[n], dtype="<f4").tobytes())

    @staticmethod
    def load(path) -> "CheckpointArchive":
        with open(path, "rb") as f:
            if f.read(4) != CKPT_MAGIC:
                raise FormatError("bad checkpoint magic")
            (version,) = struct.unpack("<I", f.read(4))
            if version != CKPT_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            (mlen,) = struct.unpack("<I", f.read(4))
            try:
                m = json.loads(f.read(mlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"bad checkpoint manifest: {exc}") from exc
            blob = f.read()
        entries = {}
        for ent in m["entries"]:
            size = int(np.prod(ent["shape"])) if ent["shape"] else 1
            start = ent["offset"]
            raw = blob[start : start + 4 * size]
            if len(raw) != 4 * size:
                raise FormatError(f"truncated checkpoint blob at {ent['name']}")
            entries[ent["name"]] = (
                np.frombuffer(raw, dtype="<f4").reshape(ent["shape"]).copy()
            )
        return CheckpointArchive(entries=entries, metadata=m["metadata"])


def make_archive(trainable: dict, opt_state: dict, metadata: dict) -> CheckpointArchive:
    entries = {k: v.copy() for k, v in trainable.items()}
    for k, v in opt_state["m"].items():
        entries[f"opt.m.{k}"] = v.copy()
    for k, v in opt_state["v"].items():
        entries[f"opt.v.{k}"] = v.copy()
    md = dict(metadata)
    md["opt_t"] = opt_state["t"]
    return CheckpointArchive(entries=entries, metadata=md)


def split_archive(archive: CheckpointArchive):
    """Returns (trainable params, opt state) views copied out of an archive."""
    trainable = {
        k: v.copy() for k, v in archive.entries.items() if not k.startswith("opt.")
    }
    state = init_opt_state(trainable)
    for k in trainable:
        if f"opt.m.{k}" in archive.entries:
            state["m"][k] = archive.entries[f"opt.m.{k}"].copy()
            state["v"][k] = archive.entries[f"opt.v.{k}"].copy()
    state["t"] = int(archive.metadata.get("opt_t", 0))
    return trainable, state


@dataclass
class TrainConfig:
    dataset_path: str
    checkpoint_path: str
    stage: str = "pretrain"
    steps: int = 1000
    batch_size: int = 32
    lr_max: float | None = None  # stage default when None
    lr_min: float | None = None
    weight_decay: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    trace_path: str | None = None
    init_checkpoint: str | None = None
    checkpoint_every: int = 0  # 0: final only
    log_every: int = 0  # 0: silent
    teacher_seed: int = TEACHER_SEED
    d_model: int = 128
    n_blocks: int = 4
    n_heads: int = 4

    def __post_init__(self):
        if self.stage not in STAGE_LR:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 1:
            raise RangeError("steps must be >= 1")
        lo, hi = STAGE_LR[self.stage]
        if self.lr_max is None:
            self.lr_max = lo
        if self.lr_min is None:
            self.lr_min = hi
        if not (self.lr_max >= self.lr_min >= 0):
            raise ValueError("need lr_max >= lr_min >= 0")
        if self.stage == "finetune" and not self.init_checkpoint:
            raise ValueError("finetune stage requires an initial checkpoint")


@dataclass
class TraceRow:
    step: int
    loss: float
    lr: float
    loss_patch: float
    loss_cls: float
    loss_reg: float


TRACE_HEADER = ["step", "loss", "lr", "loss_patch", "loss_cls", "loss_reg"]


def _trace_fields(r: "TraceRow") -> list:
    return [r.step, f"{r.loss:.8e}", f"{r.lr:.8e}", f"{r.loss_patch:.8e}",
            f"{r.loss_cls:.8e}", f"{r.loss_reg:.8e}"]


def write_trace(path, rows: list["TraceRow"]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_HEADER)
        for r in rows:
            w.writerow(_trace_fields(r))


@dataclass
class TrainResult:
    archive: CheckpointArchive
    trace: list[TraceRow]
    model: DitModel
    encoder: FrozenPromptEncoder


def _build_model_and_encoder(cfg: TrainConfig, space: SpaceConfig):
    if cfg.init_checkpoint:
        archive = CheckpointArchive.load(cfg.init_checkpoint)
        dit_cfg = DitConfig.from_dict(archive.metadata["dit"])
        if dit_cfg.space != space:
            raise ShapeMismatchError("checkpoint space config disagrees with dataset")
        teacher_seed = int(archive.metadata["teacher_seed"])
        trainable, _ = split_archive(archive)  # fresh optimizer per stage
        enc = FrozenPromptEncoder(space, seed=teacher_seed)
        enc.soft_tokens = trainable.pop("prompt.soft_tokens")
        model = DitModel(dit_cfg, params=trainable)
    else:
        teacher_seed = cfg.teacher_seed
        dit_cfg = DitConfig(
            space=space, d_model=cfg.d_model, n_blocks=cfg.n_blocks, n_heads=cfg.n_heads
        )
        model = DitModel(dit_cfg, params=init_dit_params(dit_cfg, seed=cfg.seed))
        enc = FrozenPromptEncoder(space, seed=teacher_seed)
    return model, enc, teacher_seed


def train(cfg: TrainConfig) -> TrainResult:
    """Run one curriculum stage; returns the final archive and loss trace.

    Deterministic given cfg.seed (single-threaded). Aborts with
    NonFiniteError on a NaN/Inf loss, leaving the last periodic checkpoint
    (if any) on disk.
    """
    space, _flavor, records = read_dataset(cfg.dataset_path)
    model, enc, teacher_seed = _build_model_and_encoder(cfg, space)

    trainable = dict(model.params)
    trainable["prompt.soft_tokens"] = enc.soft_tokens
    opt = init_opt_state(trainable)

    x1p = np.stack([r.target.patches for r in records])
    x1c = np.stack([r.target.cls for r in records])
    x1r = np.stack([r.target.registers for r in records])
    prompts = [r.tokens for r in records]
    n = len(records)

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    trace: list[TraceRow] = []
    last_saved_step = None
    trace_file = open(cfg.trace_path, "w", newline="") if cfg.trace_path else None
    trace_writer = None
    if trace_file:
        trace_writer = csv.writer(trace_file)
        trace_writer.writerow(TRACE_HEADER)

    def metadata(step):
        return {
            "dit": model.cfg.to_dict(),
            "teacher_seed": teacher_seed,
            "train_seed": cfg.seed,
            "stage": cfg.stage,
            "step": step,
        }

    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        tb = rng.random(cfg.batch_size, dtype=np.float64).astype(np.float32)
        b1p, b1c, b1r = x1p[idx], x1c[idx], x1r[idx]
        x0 = (
            rng.standard_normal(b1p.shape, dtype=np.float32),
            rng.standard_normal(b1c.shape, dtype=np.float32),
            rng.standard_normal(b1r.shape, dtype=np.float32),
        )
        t4 = tb[:, None, None, None]
        t2 = tb[:, None]
        t3 = tb[:, None, None]
        xt = (
            t4 * b1p + (1.0 - t4) * x0[0],
            t2 * b1c + (1.0 - t2) * x0[1],
            t3 * b1r + (1.0 - t3) * x0[2],
        )
        target = (b1p - x0[0], b1c - x0[1], b1r - x0[2])

        cond, pcache = enc.encode_batch([prompts[i] for i in idx])
        pred, cache = model.forward_batch(xt[0], xt[1], xt[2], tb, cond, want_cache=True)
        loss, comps, dpred = batch_flow_loss(pred, target, cfg.weights)
        if not math.isfinite(loss):
            if trace_file:
                trace_file.close()
            raise NonFiniteError(
                f"loss diverged at step {step + 1}; last good checkpoint: "
                f"{'step ' + str(last_saved_step) if last_saved_step else 'none'}"
            )
        grads, d_cond = model.backward_batch(cache, *dpred)
        grads["prompt.soft_tokens"] = enc.backward_batch(pcache, d_cond)

        lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min)
        optimizer_step(trainable, grads, opt, lr, cfg.weight_decay)

        row = TraceRow(step + 1, loss, lr, comps["patch"], comps["cls"], comps["reg"])
        trace.append(row)
        if trace_writer:
            trace_writer.writerow(_trace_fields(row))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            print(f"step {step + 1}/{cfg.steps} loss {loss:.5f} lr {lr:.2e}")
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            make_archive(trainable, opt, metadata(step + 1)).save(cfg.checkpoint_path)
            last_saved_step = step + 1

    if trace_file:
        trace_file.close()
    archive = make_archive(trainable, opt, metadata(cfg.steps))
    archive.save(cfg.checkpoint_path)
    return TrainResult(archive=archive, trace=trace, model=model, encoder=enc)


def load_model(path) -> tuple[DitModel, FrozenPromptEncoder]:
    """Rebuild the model and prompt encoder from a checkpoint archive."""
    archive = CheckpointArchive.load(path)
    dit_cfg = DitConfig.from_dict(archive.metadata["dit"])
    trainable, _ = split_archive(archive)
    enc = FrozenPromptEncoder(dit_cfg.space, seed=int(archive.metadata["teacher_seed"]))
    enc.soft_tokens = trainable.pop("prompt.soft_tokens")
    return DitModel(dit_cfg, params=trainable), enc


# --- gradient checking ------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    max_rel_err: float


@dataclass
class GradCheckFixture:
    """Small batch for finite differencing: targets, noise, times, prompts."""

    x1: tuple
    x0: tuple
    t: np.ndarray
    prompts: list[PromptTokens]
    weights: LossWeights = field(default_factory=LossWeights)


def make_fixture(space: SpaceConfig, batch: int, seed: int) -> GradCheckFixture:
    """Random dense fixture; targets need not come from the teacher."""
    rng = np.random.Generator(np.random.PCG64(seed))
    shapes = [
        (batch, space.h, space.w, space.d_img),
        (batch, space.d_img),
        (batch, space.n_reg, space.d_img),
    ]
    x1 = tuple(rng.standard_normal(s) for s in shapes)
    x0 = tuple(rng.standard_normal(s) for s in shapes)
    t = rng.random(batch)
    from .synthworld import gen_scene, scene_to_prompt

    prompts = [scene_to_prompt(gen_scene(int(rng.integers(0, 2**32)), space)) for _ in range(batch)]
    return GradCheckFixture(x1=x1, x0=x0, t=t, prompts=prompts)


def grad_check(
    model: DitModel,
    enc: FrozenPromptEncoder,
    fixture: GradCheckFixture,
    n_params: int = 120,
    tol: float = 1e-3,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences (f64).

    Samples n_params random scalar parameters across the trainable set
    (including soft tokens). Relative error uses a 1e-6 denominator floor so
    genuinely negligible gradients do not divide by rounding noise.
    """
    model64 = model.astype(np.float64)
    enc64 = enc.astype(np.float64)
    x1 = tuple(a.astype(np.float64) for a in fixture.x1)
    x0 = tuple(a.astype(np.float64) for a in fixture.x0)
    t = fixture.t.astype(np.float64)
    tt = [t[(...,) + (None,) * (a.ndim - 1)] for a in x1]
    xt = tuple(tk * a1 + (1.0 - tk) * a0 for tk, a0, a1 in zip(tt, x0, x1))
    target = tuple(a1 - a0 for a0, a1 in zip(x0, x1))

    trainable = dict(model64.params)
    trainable["prompt.soft_tokens"] = enc64.soft_tokens

    def loss_only() -> float:
        cond, _ = enc64.encode_batch(fixture.prompts)
        pred, _ = model64.forward_batch(xt[0], xt[1], xt[2], t, cond)
        loss, _, _ = batch_flow_loss(pred, target, fixture.weights)
        return loss

    cond, pcache = enc64.encode_batch(fixture.prompts)
    pred, cache = model64.forward_batch(xt[0], xt[1], xt[2], t, cond, want_cache=True)
    _, _, dpred = batch_flow_loss(pred, target, fixture.weights)
    grads, d_cond = model64.backward_batch(cache, *dpred)
    grads["prompt.soft_tokens"] = enc64.backward_batch(pcache, d_cond)

    rng = np.random.Generator(np.random.PCG64(seed))
    names = sorted(trainable)
    entries = []
    for _ in range(n_params):
        name = names[int(rng.integers(0, len(names)))]
        arr = trainable[name]
        idx = int(rng.integers(0, arr.size))
        flat = arr.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        lp = loss_only()
        flat[idx] = orig - step
        lm = loss_only()
        flat[idx] = orig
        numeric = (lp - lm) / (2.0 * step)
        analytic = float(grads[name].reshape(-1)[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        entries.append(GradCheckEntry(name, idx, analytic, numeric, rel))
    return GradCheckReport(entries=entries, max_rel_err=max(e.rel_err for e in entries))
