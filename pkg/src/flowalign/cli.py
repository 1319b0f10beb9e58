"""Command-line surface: gen-data, train, sample, eval, retrieve, select-view.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. The GAP_SEED
environment variable overrides the default seed of any command whose --seed
(or --rng-seed) flag is omitted. A --config JSON file may supply any flag
value; explicit flags win, unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import alignerdit, rectflow
from .embedspace import (
    SpaceConfig,
    read_embedding_file,
    write_embedding_file,
)
from .errors import FlowAlignError
from .evalmetrics import (
    alignment_report,
    frechet_distance,
    kernel_distance,
    retrieval,
)
from .rectflow import LossWeights
from .synthworld import gen_dataset, gen_scene, read_dataset, scene_to_prompt
from .trainstage import TrainConfig, load_model, train
from .viewsel3d import candidate_visibility, load_obj

DEFAULT_SEED = 0


def _env_seed() -> int:
    raw = os.environ.get("GAP_SEED")
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError as exc:
        raise FlowAlignError(f"GAP_SEED must be an integer, got {raw!r}") from exc


def _apply_config_file(args, parser, known: dict):
    """Overlay --config values under explicit flags; reject unknown keys."""
    if not getattr(args, "config", None):
        return
    try:
        with open(args.config) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config file: {exc}")
    if not isinstance(data, dict):
        parser.error("config file must hold a flat JSON object")
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest not in known:
            parser.error(f"unknown config key {key!r}")
        if getattr(args, dest) is None:
            setattr(args, dest, type_coerce(value, known[dest]))


def type_coerce(value, caster):
    return caster(value) if caster is not None else value


def _resolve(args, name, default):
    v = getattr(args, name, None)
    return default if v is None else v


def _space_from_args(args) -> SpaceConfig:
    base = SpaceConfig()
    return SpaceConfig(
        h=_resolve(args, "grid_h", base.h),
        w=_resolve(args, "grid_w", base.w),
        d_img=_resolve(args, "d_img", base.d_img),
        n_reg=_resolve(args, "n_reg", base.n_reg),
        s=_resolve(args, "soft_tokens", base.s),
        d_cond=_resolve(args, "d_cond", base.d_cond),
    )


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args, parser) -> int:
    _apply_config_file(args, parser, GEN_DATA_KEYS)
    seed = _resolve(args, "seed", _env_seed())
    n = args.n
    if n < 1:
        parser.error("--n must be >= 1")
    gen_dataset(n, seed, args.out, _space_from_args(args), flavor=args.flavor)
    print(f"wrote {n} records to {args.out}")
    return 0


def cmd_train(args, parser) -> int:
    _apply_config_file(args, parser, TRAIN_KEYS)
    if args.stage == "finetune" and not args.init_ckpt:
        parser.error("--stage finetune requires --init-ckpt")
    weights = LossWeights(
        lambda_p=_resolve(args, "lambda_p", 0.4),
        lambda_cls=_resolve(args, "lambda_cls", 0.3),
        lambda_reg=_resolve(args, "lambda_reg", 0.3),
    )
    cfg = TrainConfig(
        dataset_path=args.data,
        checkpoint_path=args.out_ckpt,
        stage=args.stage,
        steps=_resolve(args, "steps", 1000),
        batch_size=_resolve(args, "batch_size", 32),
        lr_max=args.lr_max,
        lr_min=args.lr_min,
        weight_decay=_resolve(args, "weight_decay", 0.0),
        weights=weights,
        seed=_resolve(args, "seed", _env_seed()),
        trace_path=args.trace,
        init_checkpoint=args.init_ckpt,
        checkpoint_every=_resolve(args, "checkpoint_every", 0),
        log_every=_resolve(args, "log_every", 0),
        d_model=_resolve(args, "d_model", 128),
        n_blocks=_resolve(args, "n_blocks", 4),
        n_heads=_resolve(args, "n_heads", 4),
    )
    result = train(cfg)
    print(
        f"trained {cfg.steps} steps; final loss {result.trace[-1].loss:.6f}; "
        f"checkpoint {args.out_ckpt}"
    )
    return 0


def cmd_sample(args, parser) -> int:
    _apply_config_file(args, parser, SAMPLE_KEYS)
    steps = _resolve(args, "steps", 50)
    if steps < 1:
        parser.error("--steps must be >= 1")
    if bool(args.scene_seeds) == bool(args.dataset):
        parser.error("exactly one of --scene-seeds or --dataset is required")
    model, enc = load_model(args.ckpt)
    space = model.cfg.space
    if args.scene_seeds:
        try:
            seeds = [int(x) for x in args.scene_seeds.split(",") if x]
        except ValueError:
            parser.error("--scene-seeds must be a comma-separated integer list")
        prompts = [scene_to_prompt(gen_scene(s, space, args.flavor)) for s in seeds]
    else:
        ds_space, _, records = read_dataset(args.dataset)
        if ds_space != space:
            raise FlowAlignError("dataset space config disagrees with checkpoint")
        prompts = [r.tokens for r in records]

    rng_seed = _resolve(args, "rng_seed", _env_seed())
    cond, _ = enc.encode_batch(prompts)
    out = []
    if args.deterministic:
        rng = np.random.Generator(np.random.PCG64(rng_seed))
        for i, _p in enumerate(prompts):
            def velocity(xt, t, c, _i=i):
                return alignerdit.forward(xt, t, c, model)

            out.append(rectflow.sample(velocity, cond[i], steps, rng, space))
    else:
        # independent per-prompt streams
        for i, ss in enumerate(np.random.SeedSequence(rng_seed).spawn(len(prompts))):
            rng = np.random.Generator(np.random.PCG64(ss))

            def velocity(xt, t, c):
                return alignerdit.forward(xt, t, c, model)

            out.append(rectflow.sample(velocity, cond[i], steps, rng, space))
    write_embedding_file(args.out, out)
    print(f"sampled {len(out)} embeddings to {args.out}")
    return 0


def cmd_eval(args, parser) -> int:
    _apply_config_file(args, parser, EVAL_KEYS)
    gen = read_embedding_file(args.gen)
    gt = read_embedding_file(args.gt)
    report = alignment_report(gen, gt)
    rows = []
    for comp, metrics in report.components.items():
        for metric, value in metrics.items():
            rows.append([metric, comp, f"{value:.9f}", report.count])
    if args.fd or args.kd:
        pool_gen = np.stack([e.patches.reshape(-1, e.patches.shape[-1]).mean(0) for e in gen])
        pool_gt = np.stack([e.patches.reshape(-1, e.patches.shape[-1]).mean(0) for e in gt])
        if args.fd:
            rows.append(["fd", "pooled_patch", f"{frechet_distance(pool_gen, pool_gt):.9f}", report.count])
        if args.kd:
            rows.append(["kd", "pooled_patch", f"{kernel_distance(pool_gen, pool_gt):.9f}", report.count])
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "component", "value", "count"])
        w.writerows(rows)
    print(f"wrote {len(rows)} metric rows to {args.out}")
    return 0


def cmd_retrieve(args, parser) -> int:
    _apply_config_file(args, parser, RETRIEVE_KEYS)
    queries = read_embedding_file(args.queries)
    database = read_embedding_file(args.database)
    try:
        ks = tuple(int(x) for x in _resolve(args, "ks", "1,5,10").split(","))
    except ValueError:
        parser.error("--ks must be a comma-separated integer list")
    if not ks or min(ks) < 1:
        parser.error("--ks entries must be >= 1")
    if database and max(ks) > len(database):
        parser.error(f"max k {max(ks)} exceeds database size {len(database)}")
    gt_indices = None
    if args.gt_ids:
        with open(args.gt_ids) as f:
            gt_indices = [int(line) for line in f if line.strip()]
    modes = ("cls", "pooled_patch") if args.mode == "both" else (args.mode,)
    for mode in modes:
        rep = retrieval(queries, database, mode=mode, ks=ks, gt_indices=gt_indices)
        recalls = " ".join(f"R@{k}={rep.recall[k]:.2f}%" for k in sorted(rep.recall))
        print(f"{mode}: {recalls}")
    return 0


def cmd_select_view(args, parser) -> int:
    _apply_config_file(args, parser, SELECT_VIEW_KEYS)
    seed = _resolve(args, "seed", _env_seed())
    mesh = load_obj(args.mesh)
    counts = candidate_visibility(mesh, seed=seed)
    best = max(sorted(counts), key=lambda y: counts[y])
    for yaw in sorted(counts):
        print(f"yaw {int(yaw)}: {counts[yaw]} visible")
    print(f"selected_yaw {int(best)}")
    return 0


# --- parser ------------------------------------------------------------------

GEN_DATA_KEYS = {
    "n": int, "seed": int, "flavor": str, "out": str, "grid_h": int,
    "grid_w": int, "d_img": int, "n_reg": int, "soft_tokens": int, "d_cond": int,
}
TRAIN_KEYS = {
    "stage": str, "data": str, "out_ckpt": str, "steps": int, "batch_size": int,
    "lr_max": float, "lr_min": float, "weight_decay": float, "seed": int,
    "init_ckpt": str, "trace": str, "lambda_p": float, "lambda_cls": float,
    "lambda_reg": float, "d_model": int, "n_blocks": int, "n_heads": int,
    "checkpoint_every": int, "log_every": int,
}
SAMPLE_KEYS = {
    "ckpt": str, "out": str, "steps": int, "rng_seed": int,
    "scene_seeds": str, "dataset": str, "flavor": str,
}
EVAL_KEYS = {"gen": str, "gt": str, "out": str}
RETRIEVE_KEYS = {"queries": str, "database": str, "mode": str, "ks": str, "gt_ids": str}
SELECT_VIEW_KEYS = {"mesh": str, "seed": int}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowalign")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--flavor", required=True, choices=["pretrain", "finetune", "any"])
    p.add_argument("--out", required=True)
    p.add_argument("--grid-h", type=int, dest="grid_h")
    p.add_argument("--grid-w", type=int, dest="grid_w")
    p.add_argument("--d-img", type=int, dest="d_img")
    p.add_argument("--n-reg", type=int, dest="n_reg")
    p.add_argument("--soft-tokens", type=int, dest="soft_tokens")
    p.add_argument("--d-cond", type=int, dest="d_cond")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=["pretrain", "finetune"])
    p.add_argument("--data", required=True)
    p.add_argument("--out-ckpt", required=True, dest="out_ckpt")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr-max", type=float, dest="lr_max")
    p.add_argument("--lr-min", type=float, dest="lr_min")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--seed", type=int)
    p.add_argument("--init-ckpt", dest="init_ckpt")
    p.add_argument("--trace")
    p.add_argument("--lambda-p", type=float, dest="lambda_p")
    p.add_argument("--lambda-cls", type=float, dest="lambda_cls")
    p.add_argument("--lambda-reg", type=float, dest="lambda_reg")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-blocks", type=int, dest="n_blocks")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--log-every", type=int, dest="log_every")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate embeddings from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--rng-seed", type=int, dest="rng_seed")
    p.add_argument("--scene-seeds", dest="scene_seeds")
    p.add_argument("--dataset")
    p.add_argument("--flavor", default="any", choices=["pretrain", "finetune", "any"])
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="alignment metrics between two embedding files")
    p.add_argument("--gen", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fd", action="store_true")
    p.add_argument("--kd", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="top-K recall between embedding files")
    p.add_argument("--queries", required=True)
    p.add_argument("--database", required=True)
    p.add_argument("--mode", default="both", choices=["cls", "pooled_patch", "both"])
    p.add_argument("--ks")
    p.add_argument("--gt-ids", dest="gt_ids")
    p.add_argument("--config")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("select-view", help="minimum-occlusion yaw for a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_select_view)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (FlowAlignError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
