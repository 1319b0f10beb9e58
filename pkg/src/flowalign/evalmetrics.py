"""Alignment metrics, zero-shot retrieval recall, Fréchet Distance, and
unbiased Kernel Distance.

Per-token metrics operate on [B, N, D] token batches (N tokens per sample);
distribution metrics operate on flat [n, d] feature sets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedspace import TargetEmbedding, stack_batch
from .errors import (
    DegenerateInputError,
    EmptyDatabaseError,
    MissingGroundTruthError,
    RangeError,
    ShapeMismatchError,
)

EPS = 1e-8


def _as_tokens(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:  # [B, D] -> one token per sample
        a = a[:, None, :]
    if a.ndim != 3:
        raise ShapeMismatchError(f"expected [B, N, D] tokens, got {a.shape}")
    return a


def _paired(gen, gt):
    a, b = _as_tokens(gen), _as_tokens(gt)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ShapeMismatchError("empty batch")
    return a, b


def cosine_metric(gen, gt) -> float:
    """Mean per-token cosine similarity between generated and target tokens."""
    a, b = _paired(gen, gt)
    dots = np.sum(a * b, axis=-1)
    norms = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return float(np.mean(dots / np.maximum(norms, EPS)))


def mse_metric(gen, gt) -> float:
    """Mean squared error over batch, tokens, and feature dimension."""
    a, b = _paired(gen, gt)
    return float(np.mean((a - b) ** 2))


def norm_ratio(gen, gt) -> float:
    """Mean per-token norm ratio ||gen|| / (||gt|| + eps); 1.0 is magnitude-preserving."""
    a, b = _paired(gen, gt)
    return float(
        np.mean(np.linalg.norm(a, axis=-1) / (np.linalg.norm(b, axis=-1) + EPS))
    )


@dataclass(frozen=True)
class AlignmentReport:
    """Per-component cosine/mse/norm-ratio over a matched batch."""

    components: dict  # name -> {"cosine","mse","norm_ratio"}
    count: int


def alignment_report(gen: list[TargetEmbedding], gt: list[TargetEmbedding]) -> AlignmentReport:
    if len(gen) != len(gt):
        raise ShapeMismatchError(f"batch sizes differ: {len(gen)} vs {len(gt)}")
    gp, gc, gr = stack_batch(gen)
    tp, tc, tr = stack_batch(gt)
    b = len(gen)
    comps = {}
    pairs = {
        "patch": (gp.reshape(b, -1, gp.shape[-1]), tp.reshape(b, -1, tp.shape[-1])),
        "cls": (gc, tc),
        "reg": (gr, tr),
    }
    for name, (a, t) in pairs.items():
        if a.shape[1] == 0:  # register-free config
            comps[name] = {"cosine": float("nan"), "mse": float("nan"), "norm_ratio": float("nan")}
            continue
        comps[name] = {
            "cosine": cosine_metric(a, t),
            "mse": mse_metric(a, t),
            "norm_ratio": norm_ratio(a, t),
        }
    return AlignmentReport(components=comps, count=b)


# --- retrieval ---------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalReport:
    mode: str
    recall: dict  # k -> percentage

    def __post_init__(self):
        ks = sorted(self.recall)
        for lo, hi in zip(ks, ks[1:]):
            assert self.recall[lo] <= self.recall[hi] + 1e-12


def query_vector(e: TargetEmbedding, mode: str) -> np.ndarray:
    if mode == "cls":
        return e.cls.astype(np.float64)
    if mode == "pooled_patch":
        return e.patches.reshape(-1, e.patches.shape[-1]).mean(axis=0).astype(np.float64)
    raise ValueError(f"unknown retrieval mode {mode!r}")


def retrieval(
    queries: list[TargetEmbedding],
    database: list[TargetEmbedding],
    mode: str = "cls",
    ks: tuple = (1, 5, 10),
    gt_indices: list[int] | None = None,
) -> RetrievalReport:
    """Top-K recall by cosine ranking; ties broken by lower database index.

    gt_indices[i] is the database position holding query i's ground truth
    (defaults to i). Requires len(database) >= max(ks).
    """
    if not database:
        raise EmptyDatabaseError("retrieval database is empty")
    if max(ks) > len(database):
        raise RangeError(f"max k {max(ks)} exceeds database size {len(database)}")
    if gt_indices is None:
        gt_indices = list(range(len(queries)))
    if len(gt_indices) != len(queries):
        raise MissingGroundTruthError("one ground-truth index required per query")
    for i in gt_indices:
        if not 0 <= i < len(database):
            raise MissingGroundTruthError(f"ground-truth index {i} out of range")

    q = np.stack([query_vector(e, mode) for e in queries])
    d = np.stack([query_vector(e, mode) for e in database])
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), EPS)
    dn = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), EPS)
    sims = qn @ dn.T  # [Q, M]
    # stable argsort on -sim keeps lower database index first among ties
    order = np.argsort(-sims, axis=1, kind="stable")
    ranks = np.empty(len(queries), dtype=np.int64)
    for i, gt in enumerate(gt_indices):
        ranks[i] = int(np.nonzero(order[i] == gt)[0][0])
    recall = {k: float(100.0 * np.mean(ranks < k)) for k in ks}
    return RetrievalReport(mode=mode, recall=recall)


# --- distribution metrics ----------------------------------------------------


def _check_features(x, min_n: int) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"expected [n, d] features, got {a.shape}")
    if a.shape[0] < min_n:
        raise DegenerateInputError(f"need at least {min_n} samples, got {a.shape[0]}")
    return a


def frechet_distance(features_a, features_b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the matrix square
    root is taken by eigendecomposition of the symmetrized product with
    negative eigenvalues clamped to zero.
    """
    a = _check_features(features_a, 2)
    b = _check_features(features_b, 2)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("feature dimensions differ")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sa = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1])
    sb = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1])
    prod = sa @ sb
    sym = 0.5 * (prod + prod.T)
    eigvals = np.linalg.eigvalsh(sym)
    sqrt_trace = np.sqrt(np.clip(eigvals, 0.0, None)).sum()
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    return float(mean_term + np.trace(sa) + np.trace(sb) - 2.0 * sqrt_trace)


def _poly_kernel(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kernel_distance(features_a, features_b) -> float:
    """Unbiased squared MMD with the degree-3 polynomial kernel, times 100.

    Within-set terms use off-diagonal means. For equal set sizes the cross
    term also drops its diagonal pairing, so KD of a set against itself is
    exactly zero by estimator algebra; for unequal sizes every cross pair
    (all independent) contributes.
    """
    a = _check_features(features_a, 2)
    b = _check_features(features_b, 2)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("feature dimensions differ")
    m, n = a.shape[0], b.shape[0]
    kaa = _poly_kernel(a, a)
    kbb = _poly_kernel(b, b)
    kab = _poly_kernel(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    if m == n:
        term_ab = (kab.sum() - np.trace(kab)) / (m * (m - 1))
    else:
        term_ab = kab.sum() / (m * n)
    return float(100.0 * (term_a + term_b - 2.0 * term_ab))
