"""Command-line entry points: gen-data, train, geometry, texture, export, turntable.

Configuration is a versioned JSON document with `data`, `train`, and `run`
sections; --set key=value overrides touch declared keys only and are
validated before any work starts.  Every command exits 0 on success and
prints one `error: ...` line to stderr otherwise.
"""

import argparse
import copy
import json
import sys
from pathlib import Path

import torch

from .pipeline import (RunConfig, load_field_checkpoint, run_geometry, run_texture)
from .schedule import DiffusionSchedule
from .scoremodel import KINDS, ScoreModel, load_checkpoint, save_checkpoint
from .synthdata import VOCAB, generate_corpus, load_corpus, make_bank
from .tetgrid import build_grid, resolution_at
from .training import train_score_model
from .encoding import mask_at
from .export import export_mesh, turntable
from .pipeline import extract_mesh

CONFIG_SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "data": {
        "corpus_dir": "corpus",
        "tokens": list(VOCAB),
        "views_per_part": 8,
        "parts": ["head", "upper", "lower", "full"],
        "image_size": 64,
        "shapes_per_token": 1,
        "seed": 0,
    },
    "train": {
        "corpus_dir": "corpus",
        "out": "models",
        "steps": 1500,
        "batch_size": 4,
        "lr": 2e-4,
        "width": 32,
        "seed": 0,
        "total_timesteps": 1000,
        "resume_from": "",
    },
    "run": json.loads(RunConfig().to_json()),
}


def load_config(path: str | None, overrides: list[str], seed: int | None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path) as f:
            user = json.load(f)
        if user.get("schema_version") != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}")
        _merge(cfg, user, "")
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"override {ov!r} is not key=value")
        key, value = ov.split("=", 1)
        _apply_override(cfg, key, value)
    if seed is not None:
        cfg["data"]["seed"] = seed
        cfg["train"]["seed"] = seed
        cfg["run"]["seed"] = seed
    return cfg


def _merge(base: dict, user: dict, prefix: str):
    for k, v in user.items():
        if k == "schema_version":
            continue
        if k not in base:
            raise KeyError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def _apply_override(cfg: dict, key: str, value: str):
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise KeyError(f"unknown config key {key!r}")
        node = node[p]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise KeyError(f"unknown config key {key!r}")
    old = node[leaf]
    if isinstance(old, bool):
        node[leaf] = value.lower() in ("1", "true", "yes")
    elif isinstance(old, int) and not isinstance(old, bool):
        node[leaf] = int(value)
    elif isinstance(old, float):
        node[leaf] = float(value)
    elif isinstance(old, list):
        node[leaf] = json.loads(value)
    else:
        node[leaf] = value


def cmd_gen_data(cfg):
    d = cfg["data"]
    for token in d["tokens"]:
        if token not in VOCAB:
            raise ValueError(f"invalid token in config: data.tokens entry {token!r}")
    meta, counts = generate_corpus(
        d["corpus_dir"], seed=d["seed"], tokens=tuple(d["tokens"]),
        views_per_part=d["views_per_part"], parts=tuple(d["parts"]),
        image_size=d["image_size"], shapes_per_token=d["shapes_per_token"])
    print(f"corpus: {meta['records']} records -> {d['corpus_dir']}")
    per_token: dict = {}
    per_view: dict = {}
    per_part: dict = {}
    for (token, view, part), c in sorted(counts.items()):
        per_token[token] = per_token.get(token, 0) + c
        per_view[view] = per_view.get(view, 0) + c
        per_part[part] = per_part.get(part, 0) + c
    for name, table in (("token", per_token), ("view", per_view), ("part", per_part)):
        for k, c in sorted(table.items()):
            print(f"  {name} {k}: {c}")
    return 0


def cmd_train(cfg, kind: str):
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    tr = cfg["train"]
    meta, records = load_corpus(tr["corpus_dir"])
    bank = make_bank(tr["corpus_dir"], records, kind)
    schedule = DiffusionSchedule(tr["total_timesteps"])
    start_iteration = 0
    if tr.get("resume_from"):
        model, payload = load_checkpoint(tr["resume_from"], expected_kind=kind)
        start_iteration = payload["iteration"]
    else:
        torch.manual_seed(tr["seed"])
        model = ScoreModel(kind, tuple(meta["vocab"]), width=tr["width"])
    out = Path(tr["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = kind.replace("-", "_")
    result = train_score_model(
        model, bank, steps=tr["steps"], schedule=schedule, batch_size=tr["batch_size"],
        lr=tr["lr"], seed=tr["seed"], start_iteration=start_iteration,
        loss_csv=out / f"{stem}_loss.csv")
    ckpt = out / f"{stem}.pt"
    save_checkpoint(model, ckpt, tr["total_timesteps"], iteration=result.iteration)
    entries = bank["x0"][0].numel()
    print(f"trained {kind}: {result.iteration} iterations, "
          f"final loss {result.final_loss:.1f}, held-out loss {result.heldout_loss:.1f} "
          f"(random-predictor bound {entries})")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_geometry(cfg, normal_model: str, depth_model: str | None):
    run = RunConfig(**cfg["run"])
    models = {"normal": load_checkpoint(normal_model, "normal-adapted")[0]}
    models["depth"] = (load_checkpoint(depth_model, "depth-adapted")[0]
                       if depth_model else None)
    field, mesh, ckpt = run_geometry(run, models)
    print(f"geometry: {mesh.vertices.shape[0]} vertices, {mesh.faces.shape[0]} faces")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_texture(cfg, aligned_model: str, geometry_ckpt: str):
    run = RunConfig(**cfg["run"])
    model, _ = load_checkpoint(aligned_model, "normal-aligned")
    geometry, geo_cfg, payload = load_field_checkpoint(geometry_ckpt, "geometry")
    texture, ckpt = run_texture(run, model, geometry, geometry_run_id=payload["run_id"])
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_export(geometry_ckpt: str, texture_ckpt: str | None, out_prefix: str, force: bool):
    geometry, geo_cfg, gpayload = load_field_checkpoint(geometry_ckpt, "geometry")
    texture = None
    if texture_ckpt:
        texture, tex_cfg, tpayload = load_field_checkpoint(texture_ckpt, "texture")
        lineage = tpayload.get("geometry_run_id")
        if lineage != gpayload["run_id"] and not force:
            raise ValueError(
                f"lineage mismatch: texture was trained against run {lineage}, "
                f"geometry is run {gpayload['run_id']} (use --force to override)")
    res = resolution_at(geo_cfg.geometry_iters - 1, geo_cfg.resolution.base,
                        geo_cfg.resolution.period, geo_cfg.resolution.max_doublings)
    grid = build_grid(res)
    geometry.deform_bound = geo_cfg.deform_factor * grid.edge_length
    mask = mask_at(geo_cfg.geometry_iters - 1, geo_cfg.mask)
    with torch.no_grad():
        mesh = extract_mesh(geometry, grid, mask)
    if mesh.is_empty:
        raise ValueError("geometry checkpoint extracts an empty mesh; nothing to export")
    obj = export_mesh(mesh, texture, out_prefix)
    print(f"exported: {obj}")
    return 0


def cmd_turntable(geometry_ckpt: str, texture_ckpt: str | None, frames: int, out_dir: str,
                  image_size: int):
    geometry, geo_cfg, _ = load_field_checkpoint(geometry_ckpt, "geometry")
    texture = None
    if texture_ckpt:
        texture, _, _ = load_field_checkpoint(texture_ckpt, "texture")
    res = resolution_at(geo_cfg.geometry_iters - 1, geo_cfg.resolution.base,
                        geo_cfg.resolution.period, geo_cfg.resolution.max_doublings)
    grid = build_grid(res)
    geometry.deform_bound = geo_cfg.deform_factor * grid.edge_length
    mask = mask_at(geo_cfg.geometry_iters - 1, geo_cfg.mask)
    with torch.no_grad():
        mesh = extract_mesh(geometry, grid, mask)
    paths = turntable(mesh, texture, frames, out_dir, image_size=image_size)
    print(f"wrote {len(paths)} frames to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="normforge",
                                 description="shape and texture distillation pipeline")
    ap.add_argument("--config", help="JSON config path")
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override a declared config key")
    ap.add_argument("--seed", type=int, default=None, help="override all section seeds")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic corpus")

    p = sub.add_parser("train", help="train a score model on the corpus")
    p.add_argument("--kind", required=True, choices=KINDS)

    p = sub.add_parser("geometry", help="run geometry distillation")
    p.add_argument("--normal-model", required=True)
    p.add_argument("--depth-model", default=None)

    p = sub.add_parser("texture", help="run texture distillation")
    p.add_argument("--aligned-model", required=True)
    p.add_argument("--geometry", required=True, help="geometry checkpoint")

    p = sub.add_parser("export", help="export OBJ + MTL + texture atlas")
    p.add_argument("--geometry", required=True)
    p.add_argument("--texture", default=None)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--force", action="store_true", help="ignore lineage mismatch")

    p = sub.add_parser("turntable", help="render an azimuth sweep")
    p.add_argument("--geometry", required=True)
    p.add_argument("--texture", default=None)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("gen-data", "train", "geometry", "texture"):
            cfg = load_config(args.config, args.overrides, args.seed)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.kind)
        if args.command == "geometry":
            return cmd_geometry(cfg, args.normal_model, args.depth_model)
        if args.command == "texture":
            return cmd_texture(cfg, args.aligned_model, args.geometry)
        if args.command == "export":
            return cmd_export(args.geometry, args.texture, args.out, args.force)
        if args.command == "turntable":
            return cmd_turntable(args.geometry, args.texture, args.frames, args.out,
                                 args.image_size)
        raise ValueError(f"unknown command {args.command!r}")
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
