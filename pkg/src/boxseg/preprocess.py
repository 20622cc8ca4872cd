"""Intensity windowing, slab extraction, resizing, and box synthesis.

The preprocessing chain takes raw HU volumes to normalized network inputs:
window to an organ-specific HU interval, rescale to [0, 1], keep only the
slices the organ occupies, and optionally resize. Bounding-box annotations
are synthesized from dense ground truth by expanding per-slice bounding
rectangles by a pixel margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .volume import SliceBox, SliceBoxSet, Volume, VolumeShape


@dataclass(frozen=True)
class OrganProfile:
    """Per-organ preprocessing preset."""

    name: str
    hu_window: tuple[int, int]
    kmeans_ks: tuple[int, int]
    target_shape: VolumeShape
    split_lr: bool = False

    def __post_init__(self):
        low, high = self.hu_window
        if low >= high:
            raise ValueError(f"hu_window low must be < high, got {self.hu_window}")
        ks = tuple(int(k) for k in self.kmeans_ks)
        if len(ks) != 2 or len(set(ks)) != 2 or min(ks) < 2:
            raise ValueError(f"kmeans_ks must be two distinct counts >= 2, got {self.kmeans_ks}")


ORGAN_PROFILES = {
    "liver": OrganProfile("liver", (-60, 140), (3, 4), VolumeShape(40, 512, 512)),
    "spleen": OrganProfile("spleen", (-115, 185), (2, 3), VolumeShape(31, 512, 512)),
    "kidneys": OrganProfile("kidneys", (-95, 155), (2, 3), VolumeShape(40, 512, 512), split_lr=True),
}


def window_normalize(vol: Volume, window: tuple[float, float]) -> Volume:
    """Clamp HU values to ``window`` and rescale linearly to [0, 1].

    Intensities at or above the upper bound map to 1, at or below the lower
    bound to 0, and values in between to (v - low) / (high - low).
    """
    low, high = (float(w) for w in window)
    if low >= high:
        raise ValueError(f"degenerate window: low={low} must be < high={high}")
    if vol.dtype != "int16-HU":
        raise ValueError(f"window_normalize expects an int16-HU volume, got {vol.dtype!r}")
    scaled = (vol.data.astype(np.float64) - low) / (high - low)
    out = np.clip(scaled, 0.0, 1.0).astype(np.float32)
    return Volume.from_array(out, "float32-normalized", vol.spacing_mm)


def _occupied_slices(reference) -> np.ndarray:
    if isinstance(reference, SliceBoxSet):
        return np.array(sorted(reference.boxes), dtype=np.int64)
    if isinstance(reference, Volume):
        if reference.dtype != "uint8-label":
            raise ValueError("slab reference volume must be a uint8-label mask")
        return np.flatnonzero(reference.data.any(axis=(1, 2)))
    raise TypeError(f"reference must be a label Volume or SliceBoxSet, got {type(reference).__name__}")


def extract_organ_slab(vol: Volume, reference) -> tuple[Volume, tuple[int, int]]:
    """Crop to the contiguous slice range [first, last] touched by the organ.

    ``reference`` is either a dense label volume or a box set; the returned
    range allows re-embedding the slab into the original extent later.
    """
    occupied = _occupied_slices(reference)
    if occupied.size == 0:
        raise ValueError("no foreground present in slab reference")
    first, last = int(occupied[0]), int(occupied[-1])
    if last >= vol.shape.slices:
        raise ValueError(f"reference slice {last} outside volume with {vol.shape.slices} slices")
    slab = Volume.from_array(vol.data[first : last + 1], vol.dtype, vol.spacing_mm)
    return slab, (first, last)


def embed_slab(slab: Volume, slice_range: tuple[int, int], total_slices: int, fill=0) -> Volume:
    """Inverse of :func:`extract_organ_slab`: place the slab back at its range."""
    first, last = slice_range
    if last - first + 1 != slab.shape.slices:
        raise ValueError("slice_range extent does not match slab")
    if not (0 <= first <= last < total_slices):
        raise ValueError(f"slice_range {slice_range} outside 0..{total_slices - 1}")
    full = np.full((total_slices,) + slab.data.shape[1:], fill, dtype=slab.data.dtype)
    full[first : last + 1] = slab.data
    return Volume.from_array(full, slab.dtype, slab.spacing_mm)


def _axis_lerp(data: np.ndarray, axis: int, out_len: int) -> np.ndarray:
    """1D linear resample along ``axis`` (half-pixel-centres convention)."""
    in_len = data.shape[axis]
    if in_len == out_len:
        return data
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f, 0, in_len - 1).astype(np.int64)
    i1 = np.clip(i0f + 1, 0, in_len - 1).astype(np.int64)
    shape = [1] * data.ndim
    shape[axis] = out_len
    w = frac.reshape(shape)
    return np.take(data, i0, axis=axis) * (1.0 - w) + np.take(data, i1, axis=axis) * w


def _axis_nearest(data: np.ndarray, axis: int, out_len: int) -> np.ndarray:
    in_len = data.shape[axis]
    if in_len == out_len:
        return data
    idx = np.floor((np.arange(out_len) + 0.5) * (in_len / out_len)).astype(np.int64)
    idx = np.clip(idx, 0, in_len - 1)
    return np.take(data, idx, axis=axis)


def resize_volume(vol: Volume, target, mode: str = "trilinear") -> Volume:
    """Resample to ``target`` shape; trilinear for intensities, nearest for labels."""
    target = VolumeShape.from_any(target)
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"mode must be 'trilinear' or 'nearest', got {mode!r}")
    if mode == "trilinear" and vol.dtype == "uint8-label":
        raise ValueError("trilinear interpolation would invent label values; use mode='nearest'")
    if target.as_tuple() == vol.shape.as_tuple():
        return Volume.from_array(vol.data.copy(), vol.dtype, vol.spacing_mm)
    if mode == "nearest":
        out = vol.data
        for axis, n in enumerate(target.as_tuple()):
            out = _axis_nearest(out, axis, n)
    else:
        out = vol.data.astype(np.float64)
        for axis, n in enumerate(target.as_tuple()):
            out = _axis_lerp(out, axis, n)
        if vol.dtype == "int16-HU":
            out = np.rint(out)
        elif vol.dtype in ("float32-normalized", "float32-soft"):
            out = np.clip(out, 0.0, 1.0)
    return Volume.from_array(out, vol.dtype, vol.spacing_mm)


def _expand_clip(rows, cols, margin, n_rows, n_cols, col_lo=0, col_hi=None):
    col_hi = n_cols - 1 if col_hi is None else col_hi
    return (
        max(int(rows.min()) - margin, 0),
        max(int(cols.min()) - margin, col_lo),
        min(int(rows.max()) + margin, n_rows - 1),
        min(int(cols.max()) + margin, col_hi),
    )


def make_bounding_boxes(gt: Volume, margin_px: int = 5, split_lr: bool = False) -> SliceBoxSet:
    """Expand per-slice ground-truth bounding rectangles into box annotations.

    Each slice with foreground yields the tight bounding rectangle grown by
    ``margin_px`` on all four sides, clipped at the image border. With
    ``split_lr`` the foreground is first split at the median foreground
    column (paired-organ case) and one box is emitted per nonempty side;
    the boxes are additionally clipped at the split so they stay disjoint.
    """
    if gt.dtype != "uint8-label":
        raise ValueError(f"make_bounding_boxes expects a uint8-label volume, got {gt.dtype!r}")
    if margin_px < 0:
        raise ValueError("margin_px must be >= 0")
    n_rows, n_cols = gt.shape.rows, gt.shape.cols
    boxes: dict[int, list[SliceBox]] = {}
    for s in range(gt.shape.slices):
        rows, cols = np.nonzero(gt.data[s])
        if rows.size == 0:
            continue
        group = []
        if split_lr:
            split = int(np.floor(np.median(cols)))
            left = cols <= split
            right = ~left
            if left.any() and right.any():
                r0, c0, r1, c1 = _expand_clip(rows[left], cols[left], margin_px, n_rows, n_cols, col_hi=split)
                group.append(SliceBox(s, r0, c0, r1, c1))
                r0, c0, r1, c1 = _expand_clip(rows[right], cols[right], margin_px, n_rows, n_cols, col_lo=split + 1)
                group.append(SliceBox(s, r0, c0, r1, c1))
        if not group:
            r0, c0, r1, c1 = _expand_clip(rows, cols, margin_px, n_rows, n_cols)
            group.append(SliceBox(s, r0, c0, r1, c1))
        boxes[s] = group
    return SliceBoxSet(gt.shape, boxes)


class WindowNormalizer(BaseEstimator, TransformerMixin):
    """Stateless transformer wrapping :func:`window_normalize`.

    Parameters
    ----------
    low, high : HU window bounds; presets live in ``ORGAN_PROFILES``.
    """

    def __init__(self, low: float = -60.0, high: float = 140.0):
        self.low = low
        self.high = high

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        if isinstance(X, Volume):
            return window_normalize(X, (self.low, self.high))
        return [window_normalize(v, (self.low, self.high)) for v in X]
