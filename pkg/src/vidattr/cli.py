"""Command-line surface. Every command reads the same run-config format,
writes all artifacts under ``--out``, and exits 0 on success, 1 on validation
errors, 2 on runtime failures (with a single-line JSON error record on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, build_model
from .data import (
    TEST,
    TRAIN,
    DataError,
    PreprocessConfig,
    SamplerConfig,
    TrackletBatcher,
    generate_synthetic,
    load_manifest,
    sample_frames,
    write_manifest,
)
from .fusion import attention_rollout
from .peft import compare_peft
from .schema import AttributeSchema, SchemaError
from .side import SideConfigError
from .train import (
    checkpoint_meta_for,
    count_parameters,
    evaluate,
    load_checkpoint,
    train,
)

VALIDATION_ERRORS = (ConfigError, SchemaError, DataError, SideConfigError, ValueError, IndexError, FileNotFoundError)

_CONVERTER_TOTALS = {"mars": 43, "duke": 37}


def _emit_error(exc: BaseException) -> None:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(rec), file=sys.stderr)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    with open(out / "config_used.json", "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Command-line flags override file values."""
    train_over = {}
    for name in ("steps", "epochs", "lr", "batch_size", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            train_over[name] = v
    if getattr(args, "deterministic", None) is not None:
        train_over["deterministic"] = args.deterministic
    if train_over:
        cfg = replace(cfg, train=replace(cfg.train, **train_over))
    if getattr(args, "mode", None):
        cfg = replace(cfg, mode=args.mode, peft=None if cfg.peft is None else cfg.peft)
    if getattr(args, "manifest", None):
        cfg = replace(cfg, manifest_path=args.manifest)
    return cfg


def _split_batchers(cfg: RunConfig, schema: AttributeSchema):
    if not cfg.manifest_path:
        raise ConfigError("config has no [data] manifest")
    tracklets = load_manifest(cfg.manifest_path, schema)
    train_split = [t for t in tracklets if t.split == TRAIN]
    test_split = [t for t in tracklets if t.split == TEST]
    if not train_split:
        raise DataError("manifest has no tracklets in the train split")
    k = cfg.train.frames_per_sample
    train_b = TrackletBatcher(train_split, schema, replace(cfg.sampler, k=k), cfg.preprocess)
    eval_b = None
    if test_split:
        eval_b = TrackletBatcher(
            test_split, schema, replace(cfg.sampler, k=k, seed=cfg.train.eval_seed), cfg.preprocess
        )
    return train_b, eval_b


def _write_metrics(report, out: Path, stem: str = "metrics") -> None:
    with open(out / f"{stem}.json", "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    (out / f"{stem}_table.txt").write_text(report.format_table() + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    out = _out_dir(args)
    schema = AttributeSchema.load(args.schema)
    manifest = generate_synthetic(args.num, schema, args.seed, out, test_fraction=args.test_fraction)
    print(f"wrote {args.num} synthetic tracklets; manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    out = _out_dir(args)
    schema = cfg.load_schema()
    train_b, eval_b = _split_batchers(cfg, schema)
    model = build_model(cfg, schema)
    _echo_config(cfg, out)
    meta = checkpoint_meta_for(model, cfg.peft_variant())
    meta.update(
        {
            "manifest": cfg.manifest_path,
            "sampler": dataclasses.asdict(cfg.sampler),
            "preprocess": dataclasses.asdict(cfg.preprocess),
        }
    )
    result = train(
        model, train_b, cfg.train, out_dir=out, eval_batcher=eval_b, checkpoint_meta=meta
    )
    print(f"trained {result.steps_run} steps; loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    if result.final_metrics is not None:
        _write_metrics(result.final_metrics, out)
        print(result.final_metrics.format_table())
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    model, meta = load_checkpoint(args.checkpoint)
    schema = model.schema
    manifest = args.manifest or meta.get("manifest")
    if not manifest:
        raise ConfigError("no manifest: pass --manifest or train with one recorded")
    tracklets = [t for t in load_manifest(manifest, schema) if t.split == args.split]
    if not tracklets:
        raise DataError(f"manifest has no tracklets in split {args.split!r}")
    sampler = SamplerConfig(**meta.get("sampler", {}))
    k = meta.get("train_cfg", {}).get("frames_per_sample", sampler.k)
    eval_seed = meta.get("train_cfg", {}).get("eval_seed", sampler.seed)
    pre = PreprocessConfig(
        **{**meta.get("preprocess", {}), "mean": tuple(meta.get("preprocess", {}).get("mean", (0.5, 0.5, 0.5))),
           "std": tuple(meta.get("preprocess", {}).get("std", (0.5, 0.5, 0.5)))}
    )
    batcher = TrackletBatcher(tracklets, schema, replace(sampler, k=k, seed=eval_seed), pre)
    report = evaluate(model, batcher, schema)
    _write_metrics(report, out)
    print(report.format_table())
    return 0


def cmd_count_params(args) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    schema = cfg.load_schema()
    model = build_model(cfg, schema)
    report = count_parameters(model)
    table = report.format_table()
    if args.out:
        out = _out_dir(args)
        _echo_config(cfg, out)
        with open(out / "param_report.json", "w", encoding="utf-8") as f:
            json.dump(
                {"total": report.total, "trainable": report.trainable, "by_prefix": report.by_prefix},
                f, indent=2, sort_keys=True,
            )
            f.write("\n")
        (out / "param_report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_compare_peft(args) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    out = _out_dir(args)
    schema = cfg.load_schema()
    train_b, eval_b = _split_batchers(cfg, schema)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    report = compare_peft(cfg, schema, train_b, eval_b, variants=variants, steps=args.steps)
    _echo_config(cfg, out)
    with open(out / "peft_comparison.json", "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    (out / "peft_comparison.txt").write_text(report.format_table() + "\n", encoding="utf-8")
    print(report.format_table())
    return 0


_HEAT_RGB = (255, 64, 0)


def _overlay(frame_img: Image.Image, saliency: np.ndarray, alpha: float = 0.6) -> Image.Image:
    """Upsample the patch-grid map bilinearly and alpha-blend it over the frame."""
    w, h = frame_img.size
    heat = Image.fromarray((saliency * 255).astype(np.uint8), mode="L").resize((w, h), Image.BILINEAR)
    overlay = Image.new("RGBA", (w, h), _HEAT_RGB + (0,))
    overlay.putalpha(heat.point(lambda v: int(v * alpha)))
    return Image.alpha_composite(frame_img.convert("RGBA"), overlay).convert("RGB")


def cmd_explain(args) -> int:
    import torch

    out = _out_dir(args)
    model, meta = load_checkpoint(args.checkpoint)
    schema = model.schema
    attr_index = schema.index_of(args.attribute)
    manifest = args.manifest or meta.get("manifest")
    if not manifest:
        raise ConfigError("no manifest: pass --manifest or train with one recorded")
    tracklets = {t.id: t for t in load_manifest(manifest, schema)}
    if args.tracklet not in tracklets:
        raise DataError(f"tracklet {args.tracklet!r} not found in {manifest}")
    tracklet = tracklets[args.tracklet]
    sampler = SamplerConfig(**meta.get("sampler", {}))
    k = meta.get("train_cfg", {}).get("frames_per_sample", sampler.k)
    eval_seed = meta.get("train_cfg", {}).get("eval_seed", sampler.seed)
    pre_kwargs = dict(meta.get("preprocess", {}))
    for key in ("mean", "std"):
        if key in pre_kwargs:
            pre_kwargs[key] = tuple(pre_kwargs[key])
    pre = PreprocessConfig(**pre_kwargs)
    video = sample_frames(tracklet, replace(sampler, k=k, seed=eval_seed), pre)
    frames = video.to_torch()
    maps = attention_rollout(model, frames, attr_index)
    model.eval()
    with torch.no_grad():
        pred = model(frames.unsqueeze(0))
    prob = float(pred.probabilities[0, attr_index])

    slug = args.attribute.replace(" ", "_")
    written = []
    for j, src_idx in enumerate(video.frame_indices):
        with Image.open(tracklet.frame_paths[src_idx]) as img:
            disp = img.convert("RGB").resize((pre.width, pre.height), Image.BILINEAR)
        blended = _overlay(disp, maps[j])
        p = out / f"{tracklet.id}_{slug}_f{j:02d}.png"
        blended.save(p)
        written.append(p.name)
    sidecar = {
        "tracklet": tracklet.id,
        "attribute": args.attribute,
        "attribute_index": attr_index,
        "frame_indices": list(video.frame_indices),
        "probability": prob,
        "images": written,
    }
    with open(out / f"{tracklet.id}_{slug}.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"{args.attribute!r} p={prob:.3f}; wrote {len(written)} heatmaps to {out}")
    return 0


def cmd_convert_manifest(args) -> int:
    """Skeleton converter for MARS-style / Duke-style annotation exports.

    Expects a CSV with columns: id, split, frames (';'-joined relative paths),
    then one column per schema group (class name for multi-class groups, 0/1
    for binary groups, empty for unknown). Refuses schemas whose binary total
    does not match the dataset family.
    """
    import csv

    out = _out_dir(args)
    schema = AttributeSchema.load(args.schema)
    expected = _CONVERTER_TOTALS[args.format]
    if schema.num_attributes != expected:
        raise SchemaError(
            f"{args.format} manifests need a schema with {expected} binary attributes, "
            f"got {schema.num_attributes}; refusing a silently wrong schema"
        )
    group_names = [g.name for g in schema.groups]
    records = []
    with open(args.src, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        required = {"id", "split", "frames"} | set(group_names)
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"CSV is missing columns {sorted(missing)}")
        for row in reader:
            gv = {}
            for g in schema.groups:
                raw = (row.get(g.name) or "").strip()
                if not raw:
                    gv[g.name] = None
                elif g.kind == "multi-class":
                    gv[g.name] = raw
                else:
                    gv[g.name] = raw.lower() in ("1", "true", "yes")
            records.append(
                {
                    "id": row["id"],
                    "split": row["split"],
                    "frames": [p for p in row["frames"].split(";") if p],
                    "group_values": gv,
                }
            )
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    load_manifest(manifest, schema)  # validate what we just wrote
    print(f"converted {len(records)} tracklets -> {manifest}")
    return 0


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidattr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate a synthetic tracklet dataset")
    sp.add_argument("--out", required=True, help="output directory (frames/ + manifest.jsonl)")
    sp.add_argument("--num", required=True, type=int, help="number of tracklets")
    sp.add_argument("--seed", type=int, default=0, help="generator seed (byte-identical reruns)")
    sp.add_argument("--schema", required=True, help="schema JSON with renderable groups")
    sp.add_argument("--test-fraction", type=float, default=0.0, help="fraction tagged as the test split")
    sp.set_defaults(func=cmd_synth_data)

    tp = sub.add_parser("train", help="train a model from a run config")
    tp.add_argument("--config", required=True, help="run config (.toml or .json)")
    tp.add_argument("--out", required=True, help="output directory (checkpoint, log, metrics)")
    tp.add_argument("--steps", type=int, help="override [train] steps")
    tp.add_argument("--epochs", type=int, help="override [train] epochs")
    tp.add_argument("--lr", type=float, help="override [train] lr")
    tp.add_argument("--batch-size", dest="batch_size", type=int, help="override [train] batch_size")
    tp.add_argument("--seed", type=int, help="override [train] seed")
    tp.add_argument("--mode", choices=["side", "full", "lora", "adapter", "prompt"], help="override tuning mode")
    tp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                    help="override [train] deterministic")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint")
    ep.add_argument("--checkpoint", required=True, help="checkpoint prefix (without .npz)")
    ep.add_argument("--out", required=True, help="output directory for metrics files")
    ep.add_argument("--manifest", help="manifest override (defaults to the one recorded at training)")
    ep.add_argument("--split", choices=[TRAIN, TEST], default=TEST, help="which split to score")
    ep.set_defaults(func=cmd_eval)

    cp = sub.add_parser("count-params", help="parameter accounting for a run config")
    cp.add_argument("--config", required=True, help="run config (.toml or .json)")
    cp.add_argument("--out", help="optional output directory for the report files")
    cp.add_argument("--mode", choices=["side", "full", "lora", "adapter", "prompt"], help="override tuning mode")
    cp.set_defaults(func=cmd_count_params)

    pp = sub.add_parser("compare-peft", help="train tuning strategies under one budget and compare")
    pp.add_argument("--config", required=True, help="run config (.toml or .json)")
    pp.add_argument("--out", required=True, help="output directory for the comparison report")
    pp.add_argument("--variants", default="side,lora,adapter,prompt",
                    help="comma-separated subset of side,lora,adapter,prompt")
    pp.add_argument("--steps", type=int, help="training budget per variant (defaults to [train] steps)")
    pp.set_defaults(func=cmd_compare_peft)

    xp = sub.add_parser("explain", help="attention-rollout heatmaps for one tracklet/attribute")
    xp.add_argument("--checkpoint", required=True, help="checkpoint prefix (without .npz)")
    xp.add_argument("--tracklet", required=True, help="tracklet id from the manifest")
    xp.add_argument("--attribute", required=True, help="binary attribute name, e.g. 'motion left'")
    xp.add_argument("--out", required=True, help="output directory for heatmaps + sidecar JSON")
    xp.add_argument("--manifest", help="manifest override (defaults to the one recorded at training)")
    xp.set_defaults(func=cmd_explain)

    vp = sub.add_parser("convert-manifest", help="convert a MARS-style/Duke-style CSV export to a manifest")
    vp.add_argument("--format", required=True, choices=sorted(_CONVERTER_TOTALS), help="annotation family")
    vp.add_argument("--src", required=True, help="source CSV (id, split, frames, one column per group)")
    vp.add_argument("--schema", required=True, help="schema JSON; binary total must match the family")
    vp.add_argument("--out", required=True, help="output directory for manifest.jsonl")
    vp.set_defaults(func=cmd_convert_manifest)
    return p


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if not e.code else 1
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        _emit_error(e)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except BaseException as e:  # runtime failure
        _emit_error(e)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
