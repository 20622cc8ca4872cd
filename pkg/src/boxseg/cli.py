"""Command-line pipeline: phantom, preprocess, bbox, pseudomask, train, infer, eval.

Each subcommand is a thin wrapper over one module operation chain. Runs are
reproducible: every command honors --seed where randomness is involved and
writes a run manifest with the fully resolved configuration. Human-readable
progress goes to stdout; machine output goes to files. On failure the
command exits nonzero and emits a JSON error description on stderr.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .metrics import score_case, write_score_csv
from .network import ArchConfig
from .phantom import PhantomSpec, generate_corpus
from .preprocess import (
    ORGAN_PROFILES,
    extract_organ_slab,
    make_bounding_boxes,
    resize_volume,
    window_normalize,
)
from .pseudomask import PseudoMaskParams, generate_pseudo_mask
from .training import (
    TrainConfig,
    load_checkpoint,
    make_folds,
    infer as run_infer,
    save_checkpoint,
    train as run_train,
    write_history_csv,
)
from .volume import (
    SoftLabelVolume,
    Volume,
    binarize,
    load_box_set,
    load_volume,
    save_box_set,
    save_volume,
)


def _write_manifest(out_dir: Path, command: str, config: dict, started: float):
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "tool_version": __version__,
        "started_unix": started,
        "finished_unix": time.time(),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _guarded(fn):
    """Report failures as machine-readable JSON on stderr and exit nonzero."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, TypeError, OSError, KeyError) as exc:
            payload = {"error": type(exc).__name__, "message": str(exc), "command": fn.__name__}
            click.echo(json.dumps(payload), err=True)
            sys.exit(1)

    return wrapper


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError(f"expected three integers, got {text!r}")
    return tuple(parts)


def _parse_pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return tuple(parts)


@click.group()
@click.version_option(__version__, prog_name="boxseg")
def main():
    """Weakly supervised volumetric segmentation from bounding boxes."""


@main.command()
@click.option("--count", type=int, required=True, help="Number of phantom cases.")
@click.option("--seed", type=int, default=0, show_default=True, help="Base seed; case i uses seed+i.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output corpus directory.")
@click.option("--shape", default="16,64,64", show_default=True, help="Volume shape S,H,W (dims divisible by 8).")
@click.option("--organ-hu", default="60,10", show_default=True, help="Organ intensity mean,std in HU.")
@click.option("--background-hu", default="-80,15", show_default=True, help="Background intensity mean,std in HU.")
@click.option("--blobs", type=click.IntRange(1, 2), default=1, show_default=True, help="Blobs per phantom.")
@click.option("--hole-prob", type=float, default=0.0, show_default=True, help="Probability of a carved hole per blob.")
@click.option("--hole-radius", default="1,3", show_default=True, help="Hole radius range in px (lo,hi).")
@click.option("--noise-std", type=float, default=0.0, show_default=True, help="Additive voxel noise std in HU.")
@_guarded
def phantom(count, seed, out, shape, organ_hu, background_hu, blobs, hole_prob, hole_radius, noise_std):
    """Generate a synthetic corpus with exact ground truth."""
    started = time.time()
    out_path = _out_dir(out)
    radius_lo, radius_hi = (int(v) for v in _parse_pair(hole_radius))
    spec = PhantomSpec(
        shape=_parse_triple(shape),
        organ_intensity_hu=_parse_pair(organ_hu),
        background_intensity_hu=_parse_pair(background_hu),
        n_blobs=blobs,
        hole_probability=hole_prob,
        hole_radius_px=(radius_lo, radius_hi),
        noise_std_hu=noise_std,
        seed=seed,
    )
    manifest = generate_corpus(count, spec, out_path)
    click.echo(f"wrote {len(manifest['cases'])} phantom case(s) to {out_path}")
    config = {"count": count, "seed": seed, **{k: str(v) for k, v in asdict(spec).items()}}
    _write_manifest(out_path, "phantom", config, started)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True), help="Input int16-HU volume header.")
@click.option("--organ", type=click.Choice(sorted(ORGAN_PROFILES)), default="liver", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), help="JSON overrides: hu_window, ks, target_shape.")
@click.option("--gt", "gt_path", type=click.Path(exists=True), help="Dense labels for slab extraction (processed alongside).")
@click.option("--boxes", "boxes_path", type=click.Path(exists=True), help="Box annotations for slab extraction.")
@click.option("--resize/--no-resize", default=False, show_default=True, help="Resize to the profile target shape.")
@click.option("--seed", type=int, default=0, show_default=True, help="Recorded for provenance; this command is deterministic.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory.")
@_guarded
def preprocess(in_path, organ, config_path, gt_path, boxes_path, resize, seed, out):
    """Window to the organ HU interval, normalize, extract the organ slab."""
    started = time.time()
    out_path = _out_dir(out)
    profile = ORGAN_PROFILES[organ]
    if config_path:
        overrides = json.loads(Path(config_path).read_text())
        if "hu_window" in overrides:
            profile = replace(profile, hu_window=tuple(overrides["hu_window"]))
        if "ks" in overrides:
            profile = replace(profile, kmeans_ks=tuple(overrides["ks"]))
        if "target_shape" in overrides:
            from .volume import VolumeShape

            profile = replace(profile, target_shape=VolumeShape.from_any(overrides["target_shape"]))
    vol = load_volume(in_path)
    normalized = window_normalize(vol, profile.hu_window)
    gt = load_volume(gt_path) if gt_path else None
    slab_range = None
    if gt is not None or boxes_path:
        reference = gt if gt is not None else load_box_set(boxes_path)
        normalized, slab_range = extract_organ_slab(normalized, reference)
        if gt is not None:
            gt = Volume.from_array(gt.data[slab_range[0] : slab_range[1] + 1], gt.dtype, gt.spacing_mm)
    if resize:
        normalized = resize_volume(normalized, profile.target_shape, mode="trilinear")
        if gt is not None:
            gt = resize_volume(gt, profile.target_shape, mode="nearest")
    save_volume(normalized, out_path / "volume")
    if gt is not None:
        save_volume(gt, out_path / "gt")
    meta = {
        "organ": organ,
        "hu_window": list(profile.hu_window),
        "slab_range": list(slab_range) if slab_range else None,
        "resized_to": list(profile.target_shape.as_tuple()) if resize else None,
    }
    (out_path / "preprocess_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    click.echo(f"wrote normalized volume {normalized.shape.as_tuple()} to {out_path}")
    _write_manifest(out_path, "preprocess", {"in": str(in_path), "seed": seed, **meta}, started)


@main.command()
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True), help="Dense uint8-label volume header.")
@click.option("--margin", type=int, default=5, show_default=True, help="Box margin in pixels.")
@click.option("--split-lr", is_flag=True, default=False, show_default=True, help="Split paired organs at the median column.")
@click.option("--seed", type=int, default=0, show_default=True, help="Recorded for provenance; this command is deterministic.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory.")
@_guarded
def bbox(gt_path, margin, split_lr, seed, out):
    """Synthesize per-slice bounding boxes from dense ground truth."""
    started = time.time()
    out_path = _out_dir(out)
    gt = load_volume(gt_path)
    boxes = make_bounding_boxes(gt, margin_px=margin, split_lr=split_lr)
    save_box_set(boxes, out_path / "boxes.json")
    n = sum(len(g) for g in boxes.boxes.values())
    click.echo(f"wrote {n} box(es) over {len(boxes.boxes)} slice(s) to {out_path / 'boxes.json'}")
    config = {"gt": str(gt_path), "margin": margin, "split_lr": split_lr, "seed": seed}
    _write_manifest(out_path, "bbox", config, started)


@main.command()
@click.option("--vol", "vol_path", required=True, type=click.Path(exists=True), help="Normalized volume header.")
@click.option("--boxes", "boxes_path", required=True, type=click.Path(exists=True), help="Box set JSON.")
@click.option("--ks", default="2,3", show_default=True, help="Two k-means cluster counts.")
@click.option("--hole-area-max", type=int, default=10, show_default=True, help="Fill background components smaller than this.")
@click.option("--min-frac", type=float, default=0.01, show_default=True, help="Erase foreground components below this fraction of the largest.")
@click.option("--closing-radius", type=int, default=1, show_default=True, help="Square structuring element radius.")
@click.option("--restarts", type=int, default=5, show_default=True, help="k-means restarts per slice.")
@click.option("--max-iters", type=int, default=100, show_default=True, help="k-means iteration cap.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory.")
@_guarded
def pseudomask(vol_path, boxes_path, ks, hole_area_max, min_frac, closing_radius, restarts, max_iters, seed, out):
    """Generate a trinary pseudo mask from boxes via per-slice clustering."""
    started = time.time()
    out_path = _out_dir(out)
    vol = load_volume(vol_path)
    boxes = load_box_set(boxes_path)
    ks_pair = tuple(int(k) for k in ks.replace(",", " ").split())
    params = PseudoMaskParams(
        ks=ks_pair,
        hole_area_max=hole_area_max,
        fg_component_min_frac=min_frac,
        closing_radius=closing_radius,
        kmeans_restarts=restarts,
        kmeans_max_iters=max_iters,
        seed=seed,
    )
    mask, report = generate_pseudo_mask(vol, boxes, params)
    save_volume(mask.to_volume(vol.spacing_mm), out_path / "pseudomask")
    (out_path / "stage_report.json").write_text(json.dumps(report, indent=2) + "\n")
    warned = sum(1 for entry in report if entry["warnings"])
    click.echo(f"wrote pseudo mask to {out_path} ({len(report)} stage entries, {warned} with warnings)")
    config = {"vol": str(vol_path), "boxes": str(boxes_path), "seed": seed, **asdict(params)}
    _write_manifest(out_path, "pseudomask", config, started)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True),
              help='JSON {"cases":[{"id","image","labels"}]} of volumes + pseudo masks.')
@click.option("--train-config", "train_config_path", type=click.Path(exists=True), help="TrainConfig JSON.")
@click.option("--arch-config", "arch_config_path", type=click.Path(exists=True), help="ArchConfig JSON.")
@click.option("--folds", type=int, default=1, show_default=True, help="Cross-validation folds (1 = train on all cases).")
@click.option("--base-channels", type=int, default=8, show_default=True, help="Network width (ignored when --arch-config given).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory.")
@_guarded
def train(manifest_path, train_config_path, arch_config_path, folds, base_channels, seed, out):
    """Train network(s) with per-epoch label ensembling; one checkpoint per fold."""
    started = time.time()
    out_path = _out_dir(out)
    manifest = json.loads(Path(manifest_path).read_text())
    root = Path(manifest_path).parent
    cfg = TrainConfig.from_json(train_config_path) if train_config_path else TrainConfig()
    cfg = replace(cfg, seed=seed, folds=folds)
    arch = ArchConfig.load(arch_config_path) if arch_config_path else ArchConfig(base_channels=base_channels)
    entries = manifest["cases"]
    if not entries:
        raise ValueError("training manifest lists no cases")
    by_id = {}
    for entry in entries:
        vol = load_volume(root / entry["image"])
        labels = SoftLabelVolume.from_volume(load_volume(root / entry["labels"]))
        by_id[entry["id"]] = (vol, labels)
    all_ids = list(by_id)
    fold_val = make_folds(all_ids, folds, seed=seed) if folds >= 2 else [[]]
    summary = []
    for fold_idx, val_ids in enumerate(fold_val, start=1):
        train_ids = [cid for cid in all_ids if cid not in set(val_ids)]
        click.echo(f"fold {fold_idx}/{len(fold_val)}: training on {len(train_ids)} case(s)")
        result = run_train(
            [by_id[cid] for cid in train_ids], cfg, arch, case_ids=train_ids,
            log=lambda r: click.echo(
                f"  epoch {r['epoch']:3d} [{r['phase']}] loss={r['mean_loss']:.4f} lr={r['lr']:.2e}"
            ),
        )
        fold_dir = out_path / f"fold{fold_idx}"
        save_checkpoint(fold_dir, result)
        write_history_csv(fold_dir / "log.csv", result.history)
        (fold_dir / "fold.json").write_text(
            json.dumps({"train_ids": train_ids, "val_ids": list(val_ids)}, indent=2) + "\n"
        )
        summary.append({"fold": fold_idx, "final_loss": result.history[-1]["mean_loss"]})
    click.echo(f"wrote {len(fold_val)} checkpoint(s) to {out_path}")
    config = {"manifest": str(manifest_path), "seed": seed, "folds": folds,
              "train_config": asdict(cfg), "arch_config": asdict(arch), "folds_summary": summary}
    _write_manifest(out_path, "train", config, started)


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True), help="Checkpoint directory (a fold dir).")
@click.option("--vol", "vol_path", required=True, type=click.Path(exists=True), help="Normalized volume header.")
@click.option("--seed", type=int, default=0, show_default=True, help="Recorded for provenance; this command is deterministic.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory.")
@_guarded
def infer(checkpoint_path, vol_path, seed, out):
    """Predict a voxelwise probability map for one volume."""
    started = time.time()
    out_path = _out_dir(out)
    model, _ = load_checkpoint(checkpoint_path)
    vol = load_volume(vol_path)
    proba = run_infer(model, vol)
    save_volume(proba.to_volume(vol.spacing_mm), out_path / "pred")
    click.echo(f"wrote probability volume to {out_path / 'pred.json'}")
    config = {"checkpoint": str(checkpoint_path), "vol": str(vol_path), "seed": seed}
    _write_manifest(out_path, "infer", config, started)


@main.command("eval")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True),
              help='JSON {"cases":[{"id","pred","gt"}]} for multi-case scoring.')
@click.option("--pred", "pred_path", type=click.Path(exists=True), help="Single prediction volume header.")
@click.option("--gt", "gt_path", type=click.Path(exists=True), help="Single ground-truth volume header.")
@click.option("--threshold", type=float, default=0.5, show_default=True, help="Binarization threshold for soft predictions.")
@click.option("--seed", type=int, default=0, show_default=True, help="Recorded for provenance; this command is deterministic.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory.")
@_guarded
def evaluate(manifest_path, pred_path, gt_path, threshold, seed, out):
    """Score predictions against dense ground truth; emits a CSV report."""
    started = time.time()
    out_path = _out_dir(out)
    pairs = []
    if manifest_path:
        manifest = json.loads(Path(manifest_path).read_text())
        root = Path(manifest_path).parent
        for entry in manifest["cases"]:
            pairs.append((entry["id"], root / entry["pred"], root / entry["gt"]))
    elif pred_path and gt_path:
        pairs.append(("case", Path(pred_path), Path(gt_path)))
    else:
        raise ValueError("provide either --manifest or both --pred and --gt")
    scores = []
    for cid, ppath, gpath in pairs:
        pred = load_volume(ppath)
        if pred.dtype != "uint8-label":
            pred = binarize(pred, threshold)
        gt = load_volume(gpath)
        scores.append(score_case(pred, gt, case_id=cid))
    report = write_score_csv(out_path / "report.csv", scores)
    mean_dsc = float(np.mean([s.dsc for s in scores]))
    click.echo(f"scored {len(scores)} case(s), mean DSC {mean_dsc:.2f}; report at {report}")
    config = {"threshold": threshold, "cases": len(scores), "seed": seed}
    _write_manifest(out_path, "eval", config, started)


if __name__ == "__main__":
    main()
