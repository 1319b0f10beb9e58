"""Procedural scene world and deterministic frozen teacher encoders.

Scenes are small object lists on an h x w grid. Two frozen encoders stand in
for the real prompt/image backbones: a token-level transformer whose only
trainable parameters are appended soft tokens, and a per-cell affine target
encoder. Both are seeded, pure, and bit-reproducible.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .embedspace import ConditioningSequence, SpaceConfig, TargetEmbedding
from .errors import FormatError, RangeError

TEACHER_SEED = 0xD1CE

VOCAB_SIZE = 64
MAX_PROMPT_LEN = 48

# token id layout (fixed-width object encoding, injective on attributes)
TOK_BOS = 0
TOK_EOS = 1
TOK_SEP = 2
TOK_SHAPE = 3   # 3..5
TOK_COLOR = 6   # 6..13
TOK_SIZE = 14   # 14..16
TOK_DIGIT = 17  # 17..24, base-8 digits for row/col coordinates

N_SHAPES = 3  # 0=circle, 1=square, 2=triangle
N_SIZES = 3

PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.85, 0.10],
        [0.15, 0.20, 0.95],
        [0.92, 0.88, 0.12],
        [0.85, 0.15, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.95, 0.95],
        [0.60, 0.35, 0.10],
    ],
    dtype=np.float32,
)
C_PAL = len(PALETTE)

# fixed centering constant for pooled-RGB teacher inputs; roughly the mean
# grid occupancy times the mean palette intensity, so CLS directions spread
RGB_CENTER = np.array([0.10, 0.10, 0.10], dtype=np.float32)


@dataclass(frozen=True)
class SceneObject:
    shape_id: int
    color_id: int
    row: int
    col: int
    size: int


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    seed: int


@dataclass(frozen=True)
class PromptTokens:
    tokens: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) > MAX_PROMPT_LEN:
            raise ValueError(f"prompt too long: {len(self.tokens)}")


def gen_scene(seed: int, cfg: SpaceConfig | None = None, flavor: str = "any") -> Scene:
    """Deterministically generate a scene from a seed.

    flavor "any": 1..4 objects anywhere; "pretrain": 2..4 objects (cluttered);
    "finetune": a single object centered on the grid.
    """
    cfg = cfg or SpaceConfig()
    rng = np.random.Generator(np.random.PCG64(seed))
    if flavor == "finetune":
        size = int(rng.integers(1, N_SIZES + 1))
        obj = SceneObject(
            shape_id=int(rng.integers(0, N_SHAPES)),
            color_id=int(rng.integers(0, C_PAL)),
            row=(cfg.h - size) // 2,
            col=(cfg.w - size) // 2,
            size=size,
        )
        return Scene(objects=(obj,), seed=seed)
    if flavor == "pretrain":
        n = int(rng.integers(2, 5))
        min_size = 2  # cluttered: larger footprints
    elif flavor == "any":
        n = int(rng.integers(1, 5))
        min_size = 1
    else:
        raise ValueError(f"unknown flavor {flavor!r}")
    objects = tuple(
        SceneObject(
            shape_id=int(rng.integers(0, N_SHAPES)),
            color_id=int(rng.integers(0, C_PAL)),
            row=int(rng.integers(0, cfg.h)),
            col=int(rng.integers(0, cfg.w)),
            size=int(rng.integers(min_size, N_SIZES + 1)),
        )
        for _ in range(n)
    )
    return Scene(objects=objects, seed=seed)


def _coord_tokens(x: int) -> tuple[int, int]:
    # two base-8 digits; supports grids up to 64 cells per axis
    if x >= 64:
        raise ValueError("grid coordinates above 63 not representable")
    return (TOK_DIGIT + x // 8, TOK_DIGIT + x % 8)


def scene_to_prompt(sc: Scene) -> PromptTokens:
    """Fixed-width token encoding; injective on the scene attribute tuple."""
    toks = [TOK_BOS]
    for o in sc.objects:
        toks.append(TOK_SHAPE + o.shape_id)
        toks.append(TOK_COLOR + o.color_id)
        toks.append(TOK_SIZE + o.size - 1)
        toks.extend(_coord_tokens(o.row))
        toks.extend(_coord_tokens(o.col))
        toks.append(TOK_SEP)
    toks.append(TOK_EOS)
    return PromptTokens(tokens=tuple(toks))


def _footprint(obj: SceneObject, h: int, w: int):
    """Cells covered by an object, clipped to the grid."""
    cells = []
    s = obj.size
    if obj.shape_id == 1:  # square: axis-aligned s x s box
        for di in range(s):
            for dj in range(s):
                cells.append((obj.row + di, obj.col + dj))
    elif obj.shape_id == 0:  # circle: inscribed disk of the s x s box
        ci = obj.row + (s - 1) / 2.0
        cj = obj.col + (s - 1) / 2.0
        r = s / 2.0
        for di in range(s):
            for dj in range(s):
                i, j = obj.row + di, obj.col + dj
                if (i - ci) ** 2 + (j - cj) ** 2 <= r * r:
                    cells.append((i, j))
    else:  # triangle: lower-left half of the box (col offset <= row offset)
        for di in range(s):
            for dj in range(di + 1):
                cells.append((obj.row + di, obj.col + dj))
    return [(i, j) for i, j in cells if 0 <= i < h and 0 <= j < w]


def rasterize(sc: Scene, cfg: SpaceConfig | None = None) -> np.ndarray:
    """Paint objects onto an [h, w, 3] grid; later objects overwrite earlier."""
    cfg = cfg or SpaceConfig()
    grid = np.zeros((cfg.h, cfg.w, 3), dtype=np.float32)
    for obj in sc.objects:
        color = PALETTE[obj.color_id]
        for i, j in _footprint(obj, cfg.h, cfg.w):
            grid[i, j] = color
    return grid


class FrozenTargetEncoder:
    """Deterministic affine teacher mapping scenes to target embeddings.

    patches[i,j] = rgb[i,j] @ w_patch + poscode[i,j]
    cls          = (mean rgb - center) @ w_cls
    registers    = affines of (mean rgb, max rgb, occupancy, object count/4)
    """

    def __init__(self, cfg: SpaceConfig | None = None, seed: int = TEACHER_SEED):
        self.cfg = cfg or SpaceConfig()
        c = self.cfg
        rng = np.random.Generator(np.random.PCG64(seed))
        # the positional code dominates background cells (it is what makes the
        # layout learnable), while covered cells are color-dominated so that
        # per-token alignment is sensitive to conditional content
        self.w_patch = rng.normal(0.0, 1.2, (3, c.d_img)).astype(np.float32)
        self.poscode = rng.normal(0.0, 0.7, (c.h, c.w, c.d_img)).astype(np.float32)
        self.w_cls = rng.normal(0.0, 1.7, (3, c.d_img)).astype(np.float32)
        # one affine per register; stat inputs cycle (mean rgb, max rgb,
        # occupancy, count/4) so n_reg != 4 degrades gracefully
        self.reg_w = []
        for k in range(c.n_reg):
            dim_in = 3 if k % 4 in (0, 1) else 1
            self.reg_w.append(rng.normal(0.0, 1.4, (dim_in, c.d_img)).astype(np.float32))

    def encode(self, sc: Scene) -> TargetEmbedding:
        c = self.cfg
        rgb = rasterize(sc, c)
        patches = rgb @ self.w_patch + self.poscode
        mean_rgb = rgb.mean(axis=(0, 1))
        cls = (mean_rgb - RGB_CENTER) @ self.w_cls
        max_rgb = rgb.max(axis=(0, 1))
        occupancy = np.float32(np.any(rgb > 0, axis=-1).mean())
        count = np.float32(len(sc.objects) / 4.0)
        stats = [
            mean_rgb - RGB_CENTER,
            max_rgb - RGB_CENTER,
            np.array([occupancy], dtype=np.float32),
            np.array([count], dtype=np.float32),
        ]
        regs = np.zeros((c.n_reg, c.d_img), dtype=np.float32)
        for k in range(c.n_reg):
            regs[k] = stats[k % 4] @ self.reg_w[k]
        return TargetEmbedding(patches=patches, cls=cls, registers=regs)


def encode_target(sc: Scene, enc: FrozenTargetEncoder) -> TargetEmbedding:
    return enc.encode(sc)


class FrozenPromptEncoder:
    """Frozen 2-block transformer over [token embeddings || soft tokens].

    Every parameter except soft_tokens is fixed at construction; training
    gradients reach only the appended soft tokens. Hidden states at the s
    soft-token positions form the conditioning sequence.
    """

    N_BLOCKS = 2
    N_HEADS = 4
    MLP_RATIO = 2

    def __init__(self, cfg: SpaceConfig | None = None, seed: int = TEACHER_SEED):
        self.cfg = cfg or SpaceConfig()
        dc = self.cfg.d_cond
        rng = np.random.Generator(np.random.PCG64(seed + 1))
        std = 1.0 / np.sqrt(dc)
        p = {"embed": rng.normal(0.0, 0.5, (VOCAB_SIZE, dc)).astype(np.float32)}
        for b in range(self.N_BLOCKS):
            for name in ("wq", "wk", "wv", "wo"):
                p[f"block{b}.{name}"] = rng.normal(0.0, std, (dc, dc)).astype(np.float32)
                p[f"block{b}.{name[1]}b"] = np.zeros(dc, dtype=np.float32)
            hid = self.MLP_RATIO * dc
            p[f"block{b}.w1"] = rng.normal(0.0, std, (dc, hid)).astype(np.float32)
            p[f"block{b}.b1"] = np.zeros(hid, dtype=np.float32)
            p[f"block{b}.w2"] = rng.normal(0.0, 1.0 / np.sqrt(hid), (hid, dc)).astype(np.float32)
            p[f"block{b}.b2"] = np.zeros(dc, dtype=np.float32)
            for ln in ("ln1", "ln2"):
                p[f"block{b}.{ln}.g"] = np.ones(dc, dtype=np.float32)
                p[f"block{b}.{ln}.b"] = np.zeros(dc, dtype=np.float32)
        self.params = p  # frozen: never handed to the optimizer
        self.posenc = nn.sinusoid_table(MAX_PROMPT_LEN + self.cfg.s, dc)
        self.soft_tokens = rng.normal(0.0, 0.5, (self.cfg.s, dc)).astype(np.float32)

    def snapshot_frozen(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def astype(self, dtype) -> "FrozenPromptEncoder":
        """Copy with all tensors cast (used for f64 gradient checking)."""
        other = object.__new__(FrozenPromptEncoder)
        other.cfg = self.cfg
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        other.posenc = self.posenc.astype(dtype)
        other.soft_tokens = self.soft_tokens.astype(dtype)
        return other

    def _block_fwd(self, b: int, x):
        p = self.params
        caches = {}
        hn, caches["ln1"] = nn.layernorm(x)
        h = hn * p[f"block{b}.ln1.g"] + p[f"block{b}.ln1.b"]
        caches["h1"] = h
        q = nn.linear(h, p[f"block{b}.wq"], p[f"block{b}.qb"])
        k = nn.linear(h, p[f"block{b}.wk"], p[f"block{b}.kb"])
        v = nn.linear(h, p[f"block{b}.wv"], p[f"block{b}.vb"])
        qh, kh, vh = (nn.split_heads(t, self.N_HEADS) for t in (q, k, v))
        o, caches["attn"] = nn.attention(qh, kh, vh)
        o = nn.merge_heads(o)
        caches["o"] = o
        x = x + nn.linear(o, p[f"block{b}.wo"], p[f"block{b}.ob"])
        hn2, caches["ln2"] = nn.layernorm(x)
        h2 = hn2 * p[f"block{b}.ln2.g"] + p[f"block{b}.ln2.b"]
        caches["h2"] = h2
        u = nn.linear(h2, p[f"block{b}.w1"], p[f"block{b}.b1"])
        caches["u"] = u
        a, caches["s_u"] = nn.silu_cached(u)
        caches["a"] = a
        x = x + nn.linear(a, p[f"block{b}.w2"], p[f"block{b}.b2"])
        return x, caches

    def _block_bwd(self, b: int, caches, dx):
        # input gradient only; all block parameters are frozen
        p = self.params
        da, _, _ = nn.linear_bwd(caches["a"], p[f"block{b}.w2"], dx)
        du = nn.silu_bwd(caches["u"], da, caches["s_u"])
        dh2, _, _ = nn.linear_bwd(caches["h2"], p[f"block{b}.w1"], du)
        dhn2 = dh2 * p[f"block{b}.ln2.g"]
        dx = dx + nn.layernorm_bwd(caches["ln2"], dhn2)
        do, _, _ = nn.linear_bwd(caches["o"], p[f"block{b}.wo"], dx)
        doh = nn.split_heads(do, self.N_HEADS)
        dqh, dkh, dvh = nn.attention_bwd(caches["attn"], doh)
        dq, dk, dv = (nn.merge_heads(t) for t in (dqh, dkh, dvh))
        h = caches["h1"]
        dh = (
            nn.linear_bwd(h, p[f"block{b}.wq"], dq)[0]
            + nn.linear_bwd(h, p[f"block{b}.wk"], dk)[0]
            + nn.linear_bwd(h, p[f"block{b}.wv"], dv)[0]
        )
        dhn = dh * p[f"block{b}.ln1.g"]
        dx = dx + nn.layernorm_bwd(caches["ln1"], dhn)
        return dx

    def _forward(self, token_batch: np.ndarray):
        """token_batch [G, T] int -> (C [G, s, dc], cache)."""
        t_len = token_batch.shape[1]
        s = self.cfg.s
        emb = self.params["embed"][token_batch]  # [G, T, dc]
        soft = np.broadcast_to(self.soft_tokens, (len(token_batch), s, self.cfg.d_cond))
        x = np.concatenate([emb, soft], axis=1) + self.posenc[: t_len + s]
        block_caches = []
        for b in range(self.N_BLOCKS):
            x, c = self._block_fwd(b, x)
            block_caches.append(c)
        return x[:, t_len:, :], (t_len, block_caches)

    def _backward(self, cache, d_c: np.ndarray) -> np.ndarray:
        """d_c [G, s, dc] -> gradient wrt soft_tokens (summed over the group)."""
        t_len, block_caches = cache
        g = d_c.shape[0]
        dx = np.zeros((g, t_len + self.cfg.s, self.cfg.d_cond), dtype=d_c.dtype)
        dx[:, t_len:, :] = d_c
        for b in reversed(range(self.N_BLOCKS)):
            dx = self._block_bwd(b, block_caches[b], dx)
        return dx[:, t_len:, :].sum(axis=0)

    def encode(self, p: PromptTokens) -> ConditioningSequence:
        c, _ = self._forward(np.array([p.tokens], dtype=np.int64))
        return ConditioningSequence(latents=c[0])

    def encode_batch(self, prompts: list[PromptTokens]):
        """Group prompts by length so each group runs as one batched pass.

        Returns (C [B, s, dc], cache for backward_batch).
        """
        groups: dict[int, list[int]] = {}
        for i, p in enumerate(prompts):
            groups.setdefault(len(p.tokens), []).append(i)
        out = np.empty(
            (len(prompts), self.cfg.s, self.cfg.d_cond), dtype=self.soft_tokens.dtype
        )
        caches = []
        for t_len in sorted(groups):
            idx = groups[t_len]
            batch = np.array([prompts[i].tokens for i in idx], dtype=np.int64)
            c, cache = self._forward(batch)
            out[idx] = c
            caches.append((idx, cache))
        return out, caches

    def backward_batch(self, caches, d_c: np.ndarray) -> np.ndarray:
        """Gradient of a batch loss wrt soft_tokens given dL/dC [B, s, dc]."""
        d_soft = np.zeros_like(self.soft_tokens)
        for idx, cache in caches:
            d_soft += self._backward(cache, d_c[idx])
        return d_soft


def encode_prompt(p: PromptTokens, enc: FrozenPromptEncoder) -> ConditioningSequence:
    return enc.encode(p)


DATASET_MAGIC = b"GAPD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class DatasetRecord:
    tokens: PromptTokens
    target: TargetEmbedding
    scene_seed: int


def gen_dataset(
    n: int,
    seed: int,
    path,
    cfg: SpaceConfig | None = None,
    flavor: str = "pretrain",
    teacher_seed: int = TEACHER_SEED,
) -> None:
    """Write n (prompt, target, scene seed) records; byte-identical per seed."""
    if n < 1:
        raise RangeError(f"dataset size must be >= 1, got {n}")
    if flavor not in ("pretrain", "finetune", "any"):
        raise ValueError(f"unknown flavor {flavor!r}")
    cfg = cfg or SpaceConfig()
    teacher = FrozenTargetEncoder(cfg, seed=teacher_seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    scene_seeds = rng.integers(0, 2**63, size=n, dtype=np.uint64)
    manifest = json.dumps(
        {"n": n, "cfg": cfg.to_dict(), "flavor": flavor}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for ss in scene_seeds:
            sc = gen_scene(int(ss), cfg, flavor)
            toks = scene_to_prompt(sc)
            emb = teacher.encode(sc)
            f.write(struct.pack("<I", len(toks.tokens)))
            f.write(np.array(toks.tokens, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(emb.patches, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(emb.cls, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(emb.registers, dtype="<f4").tobytes())
            f.write(struct.pack("<Q", int(ss)))


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated dataset: wanted {n} bytes, got {len(buf)}")
    return buf


def read_dataset(path):
    """Returns (SpaceConfig, flavor, list[DatasetRecord])."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != DATASET_MAGIC:
            raise FormatError("bad dataset magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        (mlen,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            m = json.loads(_read_exact(f, mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad dataset manifest: {exc}") from exc
        cfg = SpaceConfig.from_dict(m["cfg"])
        records = []
        for _ in range(m["n"]):
            (t_count,) = struct.unpack("<I", _read_exact(f, 4))
            toks = np.frombuffer(_read_exact(f, 4 * t_count), dtype="<u4")
            patches = np.frombuffer(
                _read_exact(f, 4 * cfg.h * cfg.w * cfg.d_img), dtype="<f4"
            ).reshape(cfg.h, cfg.w, cfg.d_img)
            cls = np.frombuffer(_read_exact(f, 4 * cfg.d_img), dtype="<f4")
            regs = np.frombuffer(
                _read_exact(f, 4 * cfg.n_reg * cfg.d_img), dtype="<f4"
            ).reshape(cfg.n_reg, cfg.d_img)
            (scene_seed,) = struct.unpack("<Q", _read_exact(f, 8))
            records.append(
                DatasetRecord(
                    tokens=PromptTokens(tuple(int(t) for t in toks)),
                    target=TargetEmbedding(patches.copy(), cls.copy(), regs.copy()),
                    scene_seed=scene_seed,
                )
            )
    return cfg, m["flavor"], records
