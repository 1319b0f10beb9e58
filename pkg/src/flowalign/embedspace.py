"""Structured embedding space: configuration, value types, and file format.

The target space is a triple (patch grid, CLS vector, register matrix) in a
shared feature dimension. The token ordering used everywhere downstream is
[CLS, registers, patches row-major]. Feature values are 32-bit floats.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NonFiniteError, ShapeMismatchError

EMBED_MAGIC = b"GAPE"
EMBED_VERSION = 1


@dataclass(frozen=True)
class SpaceConfig:
    """Dimensions of the structured embedding space.

    h, w: patch grid rows/cols; d_img: target feature dimension;
    n_reg: register token count; s: soft-token count; d_cond: conditioning
    dimension. The patch count h*w is always derived, never stored.
    """

    h: int = 8
    w: int = 8
    d_img: int = 64
    n_reg: int = 4
    s: int = 16
    d_cond: int = 128

    def __post_init__(self):
        if min(self.h, self.w, self.d_img, self.s, self.d_cond) < 1:
            raise ValueError("h, w, d_img, s, d_cond must all be >= 1")
        if self.n_reg < 0:
            raise ValueError("n_reg must be >= 0")

    @property
    def n_patches(self) -> int:
        return self.h * self.w

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_reg + self.h * self.w

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "w": self.w,
            "d_img": self.d_img,
            "n_reg": self.n_reg,
            "s": self.s,
            "d_cond": self.d_cond,
        }

    @staticmethod
    def from_dict(d: dict) -> "SpaceConfig":
        return SpaceConfig(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class TargetEmbedding:
    """One point of the target space: patches [h,w,d], cls [d], registers [n_reg,d]."""

    patches: np.ndarray
    cls: np.ndarray
    registers: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "patches", np.asarray(self.patches, dtype=np.float32))
        object.__setattr__(self, "cls", np.asarray(self.cls, dtype=np.float32))
        object.__setattr__(self, "registers", np.asarray(self.registers, dtype=np.float32))

    def allclose(self, other: "TargetEmbedding", rtol=1e-5, atol=1e-7) -> bool:
        return (
            np.allclose(self.patches, other.patches, rtol=rtol, atol=atol)
            and np.allclose(self.cls, other.cls, rtol=rtol, atol=atol)
            and np.allclose(self.registers, other.registers, rtol=rtol, atol=atol)
        )

    def equal_bits(self, other: "TargetEmbedding") -> bool:
        return (
            np.array_equal(self.patches, other.patches)
            and np.array_equal(self.cls, other.cls)
            and np.array_equal(self.registers, other.registers)
        )


@dataclass(frozen=True)
class ConditioningSequence:
    """Latent vectors extracted at the soft-token positions, shape [s, d_cond]."""

    latents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "latents", np.asarray(self.latents, dtype=np.float32))


def validate(e: TargetEmbedding, cfg: SpaceConfig) -> None:
    """Check shapes against cfg and finiteness; raise on violation.

    Raises ShapeMismatchError if any component's dimensions disagree with
    cfg, NonFiniteError if any entry is NaN/Inf. Total over arbitrary
    finite-shaped inputs: only these two errors are ever raised.
    """
    if e.patches.shape != (cfg.h, cfg.w, cfg.d_img):
        raise ShapeMismatchError(
            f"patches shape {e.patches.shape} != {(cfg.h, cfg.w, cfg.d_img)}"
        )
    if e.cls.shape != (cfg.d_img,):
        raise ShapeMismatchError(f"cls shape {e.cls.shape} != {(cfg.d_img,)}")
    if e.registers.shape != (cfg.n_reg, cfg.d_img):
        raise ShapeMismatchError(
            f"registers shape {e.registers.shape} != {(cfg.n_reg, cfg.d_img)}"
        )
    for name, arr in (("patches", e.patches), ("cls", e.cls), ("registers", e.registers)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{name} contains NaN/Inf")


def stack_batch(batch: list[TargetEmbedding]):
    """Stack a homogeneous batch into (patches [B,h,w,d], cls [B,d], regs [B,n,d])."""
    patches = np.stack([e.patches for e in batch])
    cls = np.stack([e.cls for e in batch])
    regs = np.stack([e.registers for e in batch])
    return patches, cls, regs


def _check_homogeneous(batch: list[TargetEmbedding]) -> tuple:
    if not batch:
        raise ShapeMismatchError("empty batch")
    shapes = (batch[0].patches.shape, batch[0].cls.shape, batch[0].registers.shape)
    for e in batch[1:]:
        if (e.patches.shape, e.cls.shape, e.registers.shape) != shapes:
            raise ShapeMismatchError("batch embeddings have mixed shapes")
    return shapes


def write_embedding_file(path, batch: list[TargetEmbedding]) -> None:
    """Write a batch of embeddings; write -> read round-trips bit-exactly.

    Layout: magic "GAPE", version u32, length-prefixed JSON manifest
    {count, h, w, d_img, n_reg}, then per record patches, cls, registers
    as contiguous little-endian f32.
    """
    (h, w, d_img), _, (n_reg, _) = _check_homogeneous(batch)
    manifest = json.dumps(
        {"count": len(batch), "h": h, "w": w, "d_img": d_img, "n_reg": n_reg}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(struct.pack("<I", EMBED_VERSION))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for e in batch:
            f.write(np.ascontiguousarray(e.patches, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(e.cls, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(e.registers, dtype="<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_embedding_manifest(f) -> dict:
    magic = _read_exact(f, 4)
    if magic != EMBED_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {EMBED_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != EMBED_VERSION:
        raise FormatError(f"unsupported version {version}")
    (mlen,) = struct.unpack("<I", _read_exact(f, 4))
    try:
        manifest = json.loads(_read_exact(f, mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad manifest: {exc}") from exc
    for key in ("count", "h", "w", "d_img", "n_reg"):
        if key not in manifest:
            raise FormatError(f"manifest missing {key!r}")
    return manifest


def read_embedding_file(path) -> list[TargetEmbedding]:
    """Read embeddings in file order; FormatError on bad magic/manifest/truncation."""
    with open(path, "rb") as f:
        m = read_embedding_manifest(f)
        h, w, d_img, n_reg = m["h"], m["w"], m["d_img"], m["n_reg"]
        out = []
        for _ in range(m["count"]):
            patches = np.frombuffer(
                _read_exact(f, 4 * h * w * d_img), dtype="<f4"
            ).reshape(h, w, d_img)
            cls = np.frombuffer(_read_exact(f, 4 * d_img), dtype="<f4")
            regs = np.frombuffer(
                _read_exact(f, 4 * n_reg * d_img), dtype="<f4"
            ).reshape(n_reg, d_img)
            out.append(TargetEmbedding(patches.copy(), cls.copy(), regs.copy()))
    return out
