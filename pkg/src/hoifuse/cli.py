"""Command-line entry point: ``hoifuse {generate,stage1-mask,ablate,evaluate,corpus,grid}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io as _io
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import evaluation as ev
from .filters import FilterMode, KernelSchedule, ScheduleMode
from .io import dump_tensor, load_image, read_json, save_image, tile_grid, write_json
from .masks import MaskSource, load_mask, save_mask
from .pipeline import (
    TOGGLE_GRID,
    BackendPair,
    MergeConfig,
    NoHeadFoundError,
    PipelineError,
    SweepAxes,
    ThresholdSegmentor,
    ablation_sweep,
    array_checksum,
    generate,
    image_to_uint8,
    stage1_layout,
)
from .backend import sample_initial_latent

log = logging.getLogger("hoifuse")

ADAPTERS_ENV = "PERSONAHOI_ADAPTERS"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

DEFAULTS = {
    "seed": 0,
    "steps": 50,
    "subject": "reference",
    "filter_mode": "LowHigh",
    "alpha_start": 2.5,
    "alpha_end": 0.5,
    "alpha_mode": "linear_decremental",
    "inject_step": 0,
    "cac": True,
    "lm": True,
    "rm": True,
    "backend_sd": "toy:seed=1",
    "backend_pfd": "toy:seed=2",
    "segmentor": "threshold",
    "mask": None,
    "residual_layers": None,
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parsing

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file; flags take precedence")
    p.add_argument("--prompt")
    p.add_argument("--subject", help="reference identity descriptor for the PFD branch")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mask", help="user-supplied head mask (8-bit grayscale); fallback when segmentation fails")
    p.add_argument("--segmentor", choices=["threshold", "none"],
                   help="'none' uses --mask directly instead of segmenting the stage-1 image")
    p.add_argument("--filter-mode")
    p.add_argument("--alpha-start", type=float)
    p.add_argument("--alpha-end", type=float)
    p.add_argument("--alpha-mode", choices=[m.value for m in ScheduleMode])
    p.add_argument("--inject-step", type=int)
    p.add_argument("--residual-layers", help="comma-separated skip layers to merge (default: all)")
    p.add_argument("--no-cac", dest="cac", action="store_false", default=None)
    p.add_argument("--no-lm", dest="lm", action="store_false", default=None)
    p.add_argument("--no-rm", dest="rm", action="store_false", default=None)
    p.add_argument("--backend-sd")
    p.add_argument("--backend-pfd")
    p.add_argument("--timestamps", action="store_true", help="embed a creation time in manifests")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoifuse", description="Dual-branch identity/interaction fusion")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run the two-stage fused generation")
    _add_run_flags(g)
    g.add_argument("--dump-intermediates", action="store_true")
    g.add_argument("--from-manifest", type=Path, help="replay a manifest and verify its checksums")

    s1 = sub.add_parser("stage1-mask", help="run the SD branch alone and extract the head mask")
    _add_run_flags(s1)

    a = sub.add_parser("ablate", help="Cartesian ablation sweep")
    _add_run_flags(a)
    a.add_argument("--toggles", choices=["grid"])
    a.add_argument("--filter-modes", help="'all' or comma-separated modes")
    a.add_argument("--alphas", help="comma-separated schedules: '1.5' (constant) or '2.5->0.5' (linear)")
    a.add_argument("--inject-steps", help="comma-separated injection steps")
    a.add_argument("--jobs", type=int, default=1)

    e = sub.add_parser("evaluate", help="score a directory of images with adapter-backed metrics")
    e.add_argument("--images", type=Path, required=True)
    e.add_argument("--mode", required=True, help="comma-separated subset of identity,prompt,interaction")
    e.add_argument("--adapters", type=Path, help=f"adapter-spec JSON (default: ${ADAPTERS_ENV})")
    e.add_argument("--prompts", type=Path, help="JSON mapping image filename -> prompt or HOI triplet")
    e.add_argument("--reference", type=Path, help="reference face image for identity mode")
    e.add_argument("--out", type=Path, help="write the MetricReport JSON here")
    e.add_argument("--method", default="generated")
    e.add_argument("--architecture", default="-")

    c = sub.add_parser("corpus", help="print the evaluation prompt lists")
    c.add_argument("--subject", required=True)
    c.add_argument("--set", dest="which", choices=["hoi", "general"], required=True)
    c.add_argument("--format", choices=["lines", "json"], default="lines")

    gr = sub.add_parser("grid", help="tile images row-major into one image")
    gr.add_argument("--images", type=Path, required=True)
    gr.add_argument("--cols", type=int, required=True)
    gr.add_argument("--out", type=Path, required=True)
    return parser


def _settings(args) -> dict:
    """Merge defaults < config file < flags."""
    merged = dict(DEFAULTS)
    if getattr(args, "config", None) is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file {args.config} not found")
        file_cfg = read_json(args.config)
        unknown = set(file_cfg) - set(DEFAULTS) - {"prompt"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in list(DEFAULTS) + ["prompt"]:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if not merged.get("prompt"):
        raise UsageError("--prompt is required (or set 'prompt' in --config)")
    return merged


def _schedule(settings: dict) -> KernelSchedule:
    mode = ScheduleMode(settings["alpha_mode"])
    start = float(settings["alpha_start"])
    end = start if mode is ScheduleMode.CONSTANT else float(settings["alpha_end"])
    return KernelSchedule(start, end, int(settings["steps"]), mode)


def _config(settings: dict) -> MergeConfig:
    layers = settings.get("residual_layers")
    if isinstance(layers, str):
        layers = tuple(int(x) for x in layers.split(",") if x.strip())
    try:
        return MergeConfig(
            enable_cac=bool(settings["cac"]),
            enable_latent_merge=bool(settings["lm"]),
            enable_residual_merge=bool(settings["rm"]),
            filter_mode=FilterMode.parse(settings["filter_mode"]),
            kernel_schedule=_schedule(settings),
            injection_step=int(settings["inject_step"]),
            seed=int(settings["seed"]),
            total_steps=int(settings["steps"]),
            residual_layers=layers,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _mask_inputs(settings: dict):
    """Return (segmentor, fallback mask, provenance extras)."""
    info = {"segmentor": settings["segmentor"], "mask_path": settings.get("mask")}
    mask = None
    if settings.get("mask"):
        mask_path = Path(settings["mask"])
        if not mask_path.exists():
            raise FileNotFoundError(f"mask file {mask_path} not found")
        mask = load_mask(mask_path, MaskSource.USER_SUPPLIED)
        info["mask_file_checksum"] = array_checksum(mask.values)
    if settings["segmentor"] == "none":
        if mask is None:
            raise UsageError("--segmentor none requires --mask")
        return None, mask, info
    return ThresholdSegmentor(), mask, info


def _backends(settings: dict) -> BackendPair:
    try:
        return BackendPair.from_specs(settings["backend_sd"], settings["backend_pfd"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ------------------------------------------------------------------ commands

def run_hash(manifest: dict) -> str:
    """Content address of a run: everything that determines its outputs."""
    keys = ("config", "prompt", "subject", "backends", "mask_provenance")
    blob = json.dumps({k: manifest.get(k) for k in keys}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_result(out: Path, result, settings: dict, timestamps: bool) -> dict:
    h = run_hash(result.manifest)
    names = {
        "image": f"{h}.png",
        "stage1_image": f"{h}.stage1.png",
        "head_mask": f"{h}.mask.png",
        "manifest": f"{h}.manifest.json",
    }
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / names["image"], result.image)
    save_image(out / names["stage1_image"], result.stage1_image)
    save_mask(result.head_mask, out / names["head_mask"])
    manifest = dict(result.manifest)
    manifest["outputs"] = names
    if timestamps:
        manifest["created"] = datetime.now(timezone.utc).isoformat()
    write_json(out / names["manifest"], manifest)
    return manifest


def _dumper(out: Path):
    root = out / "intermediates"

    def on_step(tr):
        stem = root / f"step{tr.step:03d}"
        dump_tensor(f"{stem}_z_sd", tr.z_sd_out.values, tr.t, "SD")
        dump_tensor(f"{stem}_z_pfd", tr.z_pfd_out.values, tr.t, "PFD")
        if tr.z_merged is not None:
            dump_tensor(f"{stem}_z_merged", tr.z_merged.values, tr.t, "merged")
        if tr.r_merged is not None:
            for idx, tensor in tr.r_merged.layers:
                dump_tensor(f"{stem}_res{idx}", tensor, tr.t + 1, "merged", idx)

    return on_step


def _settings_from_manifest(manifest: dict) -> dict:
    cfg = manifest["config"]
    sched = cfg["kernel_schedule"]
    prov = manifest.get("mask_provenance", {})
    return {
        **DEFAULTS,
        "prompt": manifest["prompt"],
        "subject": manifest["subject"],
        "seed": cfg["seed"],
        "steps": cfg["total_steps"],
        "filter_mode": cfg["filter_mode"],
        "alpha_start": sched["alpha_start"],
        "alpha_end": sched["alpha_end"],
        "alpha_mode": sched["mode"],
        "inject_step": cfg["injection_step"],
        "cac": cfg["enable_cac"],
        "lm": cfg["enable_latent_merge"],
        "rm": cfg["enable_residual_merge"],
        "residual_layers": tuple(cfg["residual_layers"]) if cfg.get("residual_layers") is not None else None,
        "backend_sd": manifest["backends"]["sd"]["spec"],
        "backend_pfd": manifest["backends"]["pfd"]["spec"],
        "segmentor": prov.get("segmentor", "threshold"),
        "mask": prov.get("mask_path"),
    }


def cmd_generate(args) -> int:
    if args.from_manifest is not None:
        if not args.from_manifest.exists():
            print(f"error: manifest {args.from_manifest} not found", file=sys.stderr)
            return 1
        clashing = [f for f in ("prompt", "seed", "steps", "config", "filter_mode", "inject_step")
                    if getattr(args, f) is not None]
        if clashing:
            raise UsageError(f"--from-manifest cannot be combined with {', '.join('--' + c.replace('_', '-') for c in clashing)}")
        original = read_json(args.from_manifest)
        settings = _settings_from_manifest(original)
    else:
        original = None
        settings = _settings(args)
    config = _config(settings)
    backends = _backends(settings)
    segmentor, mask, info = _mask_inputs(settings)
    on_step = _dumper(args.out) if args.dump_intermediates else None
    try:
        result = generate(settings["subject"], settings["prompt"], config, backends, segmentor, mask, info,
                          on_step=on_step)
    except NoHeadFoundError as exc:
        args.out.mkdir(parents=True, exist_ok=True)
        save_image(args.out / "stage1_no_head.png", exc.image)
        print(f"error: {exc}; pass --mask to supply a fallback head mask", file=sys.stderr)
        return 1
    except PipelineError as exc:
        write_json(args.out / "failed.manifest.json", exc.manifest)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest = _write_result(args.out, result, settings, args.timestamps)
    print(json.dumps({"manifest": str(args.out / manifest["outputs"]["manifest"]),
                      "image_checksum": manifest["checksums"]["image"]}))
    if original is not None:
        mismatched = [k for k, v in original.get("checksums", {}).items() if manifest["checksums"].get(k) != v]
        if mismatched:
            print(f"error: replay checksums differ: {', '.join(sorted(mismatched))}", file=sys.stderr)
            return 1
        print("replay: all checksums match")
    return 0


def cmd_stage1(args) -> int:
    settings = _settings(args)
    config = _config(settings)
    backends = _backends(settings)
    segmentor, mask, info = _mask_inputs(settings)
    params = backends.scheduler_params(config.total_steps)
    z_T = sample_initial_latent(backends.sd.descriptor.latent_shape, config.seed, config.total_steps)
    cond = backends.conditioner.encode(settings["prompt"])
    seg = segmentor or (lambda image: None)
    try:
        image, head = stage1_layout(backends.sd, cond, z_T, params, seg, mask)
    except NoHeadFoundError as exc:
        args.out.mkdir(parents=True, exist_ok=True)
        save_image(args.out / "stage1_no_head.png", exc.image)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    args.out.mkdir(parents=True, exist_ok=True)
    save_image(args.out / "stage1.png", image)
    save_mask(head, args.out / "mask.png")
    manifest = {
        "schema": 1,
        "config": config.to_dict(),
        "prompt": settings["prompt"],
        "backends": {"sd": {"spec": backends.sd_spec, "descriptor": backends.sd.descriptor.to_dict()}},
        "mask_provenance": {**info, "source": head.source.value, "area": float(head.values.sum())},
        "outputs": {"image": "stage1.png", "head_mask": "mask.png"},
        "checksums": {"stage1_z_T": array_checksum(z_T.values),
                      "stage1_image": array_checksum(image_to_uint8(image)),
                      "head_mask": array_checksum(head.values)},
    }
    if args.timestamps:
        manifest["created"] = datetime.now(timezone.utc).isoformat()
    write_json(args.out / "manifest.json", manifest)
    print(str(args.out / "mask.png"))
    return 0


def _parse_schedules(text: str, steps: int) -> list[KernelSchedule]:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "->" in item:
            a, b = item.split("->")
            out.append(KernelSchedule.linear(float(a), float(b), steps))
        else:
            out.append(KernelSchedule.constant(float(item), steps))
    return out


SWEEP_COLUMNS = ["config_hash", "label", "toggles", "filter_mode", "alpha_schedule", "inject_step",
                 "output_checksum", "status"]


def cmd_ablate(args) -> int:
    settings = _settings(args)
    base = _config(settings)
    try:
        axes = SweepAxes(
            toggles=list(TOGGLE_GRID) if args.toggles == "grid" else None,
            filter_modes=(list(FilterMode) if args.filter_modes == "all"
                          else [FilterMode.parse(m) for m in args.filter_modes.split(",")] if args.filter_modes
                          else None),
            alphas=_parse_schedules(args.alphas, base.total_steps) if args.alphas else None,
            injection_steps=[int(s) for s in args.inject_steps.split(",")] if args.inject_steps else None,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if axes.is_empty():
        raise UsageError("ablate needs at least one of --toggles, --filter-modes, --alphas, --inject-steps")
    backends = _backends(settings)
    segmentor, mask, info = _mask_inputs(settings)

    cells_dir = args.out / "cells"

    def run_cell(label, cfg):
        res = generate(settings["subject"], settings["prompt"], cfg, backends, segmentor, mask, info)
        _write_result(cells_dir / cfg.config_hash(), res, settings, False)
        return res

    rows = ablation_sweep(base, axes, settings["subject"], settings["prompt"], backends, segmentor, mask,
                          jobs=max(1, args.jobs), run_cell=run_cell)
    table = [{k: r.summary[k] for k in SWEEP_COLUMNS} | ({"error": r.error} if r.error else {}) for r in rows]
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(table)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.csv").write_text(buf.getvalue())
    write_json(args.out / "ablation.json", {"schema": 1, "base_config": base.to_dict(), "rows": table})
    print(buf.getvalue(), end="")
    return 0 if all(r.error is None for r in rows) else 1


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise FileNotFoundError(f"image directory {folder} not found")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _triplet(value) -> ev.HOITriplet:
    if isinstance(value, dict):
        return ev.HOITriplet(value["subject"], value["verb"], value["object"])
    words = str(value).split()
    if len(words) < 4 or words[0] not in ("a", "an"):
        raise ValueError(f"cannot read an HOI triplet from {value!r}")
    return ev.HOITriplet(words[1], words[2], " ".join(words[3:]))


def cmd_evaluate(args) -> int:
    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    bad = set(modes) - {"identity", "prompt", "interaction"}
    if bad or not modes:
        raise UsageError(f"unknown evaluation modes: {sorted(bad)}")
    adapter_path = args.adapters or (Path(os.environ[ADAPTERS_ENV]) if os.environ.get(ADAPTERS_ENV) else None)
    if adapter_path is None:
        raise UsageError(f"pass --adapters or set ${ADAPTERS_ENV}")
    for p in [adapter_path, args.prompts, args.reference]:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{p} not found")
    paths = _list_images(args.images)
    if not paths:
        raise FileNotFoundError(f"no images in {args.images}")
    adapters = ev.load_adapter_spec(adapter_path)
    images = [ev.EvalImage(load_image(p), p.name, str(p)) for p in paths]
    mapping = read_json(args.prompts) if args.prompts else None
    prompts = triplets = None
    if mapping is not None:
        missing = [p.name for p in paths if p.name not in mapping]
        if missing:
            raise UsageError(f"--prompts has no entry for {missing}")
        entries = [mapping[p.name] for p in paths]
        prompts = [e if isinstance(e, str) else _triplet(e).render() for e in entries]
        if "interaction" in modes:
            triplets = [_triplet(e) for e in entries]
    reference = None
    if args.reference is not None:
        reference = ev.EvalImage(load_image(args.reference), args.reference.name, str(args.reference))
    try:
        report = ev.evaluate(images, adapters, modes, prompts, triplets, reference)
    except ev.InvalidReferenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        write_json(args.out, report.to_dict())
    print(report.render_table(args.method, args.architecture))
    return 0


def cmd_corpus(args) -> int:
    if args.which == "hoi":
        prompts = ev.build_hoi_prompts(args.subject)
        if args.format == "json":
            print(json.dumps(prompts, indent=2))
        else:
            print("\n".join(prompts))
    else:
        general = ev.build_general_prompts(args.subject)
        if args.format == "json":
            print(json.dumps(general, indent=2))
        else:
            print("\n".join(f"{cat}\t{p}" for cat, items in general.items() for p in items))
    return 0


def cmd_grid(args) -> int:
    paths = _list_images(args.images)
    if not paths:
        raise FileNotFoundError(f"no images in {args.images}")
    grid = tile_grid([image_to_uint8(load_image(p)) for p in paths], args.cols)
    save_image(args.out, grid)
    print(f"{args.out} {grid.shape[1]}x{grid.shape[0]}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "stage1-mask": cmd_stage1,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
    "corpus": cmd_corpus,
    "grid": cmd_grid,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
