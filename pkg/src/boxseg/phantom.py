"""Synthetic organ phantoms with exact dense ground truth.

A phantom is one or two ellipsoidal blobs of organ-like HU intensity on a
darker background, optionally with small spherical holes carved out (the
holes read as lesions: excluded from the ground truth and filled with
background intensity). Ellipsoid membership is analytic, so the ground
truth is exact and cheap. Generation is fully seed-driven.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .volume import Volume, VolumeShape, save_volume


@dataclass(frozen=True)
class PhantomSpec:
    shape: VolumeShape = VolumeShape(16, 64, 64)
    organ_intensity_hu: tuple[float, float] = (60.0, 10.0)
    background_intensity_hu: tuple[float, float] = (-80.0, 15.0)
    n_blobs: int = 1
    hole_probability: float = 0.0
    hole_radius_px: tuple[int, int] = (1, 3)
    noise_std_hu: float = 0.0
    seed: int = 0
    spacing_mm: tuple[float, float, float] = (5.0, 0.8, 0.8)

    def __post_init__(self):
        object.__setattr__(self, "shape", VolumeShape.from_any(self.shape))
        if self.n_blobs not in (1, 2):
            raise ValueError("n_blobs must be 1 or 2")
        if not (0.0 <= self.hole_probability <= 1.0):
            raise ValueError("hole_probability must lie in [0, 1]")
        if self.noise_std_hu < 0:
            raise ValueError("noise_std_hu must be >= 0")
        organ_mean, organ_std = self.organ_intensity_hu
        bg_mean, bg_std = self.background_intensity_hu
        worst = max(organ_std, bg_std)
        if abs(organ_mean - bg_mean) < 3.0 * worst:
            raise ValueError(
                "organ and background means must differ by at least 3x the larger std"
            )
        if any(dim % 8 for dim in self.shape.as_tuple()):
            raise ValueError("shape dims must be divisible by 8 for network compatibility")


def _ellipsoid_mask(shape: tuple[int, int, int], center, axes) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    cz, cy, cx = center
    az, ay, ax = axes
    return ((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _draw_blob(rng, shape, col_range, ax_frac):
    s, h, w = shape
    az = rng.uniform(max(0.24 * s, 1.5), max(0.34 * s, 2.0))
    ay = rng.uniform(max(0.28 * h, 2.0), max(0.40 * h, 2.5))
    ax = rng.uniform(max(ax_frac[0] * w, 2.0), max(ax_frac[1] * w, 2.5))
    lo_c = col_range[0] + ax + 0.5
    hi_c = col_range[1] - ax - 0.5
    lo_z, hi_z = az + 0.5, (s - 1) - az - 0.5
    lo_y, hi_y = ay + 0.5, (h - 1) - ay - 0.5
    if lo_c > hi_c or lo_z > hi_z or lo_y > hi_y:
        raise ValueError("blob cannot fit within margins; enlarge the phantom shape")
    center = (rng.uniform(lo_z, hi_z), rng.uniform(lo_y, hi_y), rng.uniform(lo_c, hi_c))
    return center, (az, ay, ax)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Return (image, ground truth); bit-identical for a fixed seed."""
    rng = np.random.default_rng(spec.seed & 0xFFFFFFFFFFFFFFFF)
    shape = spec.shape.as_tuple()
    s, h, w = shape

    blob_mask = np.zeros(shape, dtype=bool)
    blobs = []
    if spec.n_blobs == 1:
        blobs.append(_draw_blob(rng, shape, (0, w - 1), (0.22, 0.40)))
    else:
        # left and right blobs in separate column bands, >= 2 px apart
        mid = w // 2
        blobs.append(_draw_blob(rng, shape, (0, mid - 2), (0.12, 0.18)))
        blobs.append(_draw_blob(rng, shape, (mid + 2, w - 1), (0.12, 0.18)))
    for center, axes in blobs:
        blob_mask |= _ellipsoid_mask(shape, center, axes)

    holes = np.zeros(shape, dtype=bool)
    for center, axes in blobs:
        if rng.uniform() < spec.hole_probability:
            r = rng.integers(spec.hole_radius_px[0], spec.hole_radius_px[1] + 1)
            # keep the hole interior to the blob by shrinking the reach
            off = tuple(rng.uniform(-0.3, 0.3) * a for a in axes)
            hc = tuple(c + o for c, o in zip(center, off))
            holes |= _ellipsoid_mask(shape, hc, (r, r, r)) & blob_mask

    gt = blob_mask & ~holes
    organ_mean, organ_std = spec.organ_intensity_hu
    bg_mean, bg_std = spec.background_intensity_hu
    img = rng.normal(bg_mean, bg_std, size=shape) if bg_std > 0 else np.full(shape, bg_mean)
    organ = rng.normal(organ_mean, organ_std, size=shape) if organ_std > 0 else np.full(shape, organ_mean)
    img = np.where(gt, organ, img)
    if spec.noise_std_hu > 0:
        img = img + rng.normal(0.0, spec.noise_std_hu, size=shape)
    image = Volume.from_array(
        np.clip(np.rint(img), -32768, 32767).astype(np.int16), "int16-HU", spec.spacing_mm
    )
    labels = Volume.from_array(gt.astype(np.uint8), "uint8-label", spec.spacing_mm)
    return image, labels


def generate_corpus(n: int, spec: PhantomSpec, out_dir) -> dict:
    """Write n phantoms (seeds seed..seed+n-1) plus a manifest JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(n):
        case_spec = replace(spec, seed=spec.seed + i)
        image, gt = generate_phantom(case_spec)
        cid = f"phantom{case_spec.seed:04d}"
        image_path = save_volume(image, out_dir / f"{cid}_image")
        gt_path = save_volume(gt, out_dir / f"{cid}_gt")
        cases.append({"id": cid, "image": image_path.name, "gt": gt_path.name})
    manifest = {"cases": cases}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
