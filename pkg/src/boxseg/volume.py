"""Voxel-grid data model, container I/O, and elementary grid queries.

A volume is a dense 3D scalar grid ordered (slice, row, col), C-contiguous,
with per-axis spacing in millimetres. On disk it is a JSON header next to a
raw little-endian blob; bounding-box annotations live in a standalone JSON
file. Both formats are documented on :func:`save_volume` and
:func:`save_box_set`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

#: dtype tag -> on-disk numpy dtype (explicitly little-endian where it matters)
DTYPE_NUMPY = {
    "int16-HU": np.dtype("<i2"),
    "float32-normalized": np.dtype("<f4"),
    "uint8-label": np.dtype("|u1"),
    "float32-soft": np.dtype("<f4"),
}

_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class VolumeShape:
    """Grid extents as (slices, rows, cols)."""

    slices: int
    rows: int
    cols: int

    def __post_init__(self):
        for name in ("slices", "rows", "cols"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.voxels > np.iinfo(np.intp).max:
            raise ValueError("voxel count exceeds addressable memory")

    @property
    def voxels(self) -> int:
        return int(self.slices) * int(self.rows) * int(self.cols)

    def as_tuple(self) -> tuple[int, int, int]:
        return (int(self.slices), int(self.rows), int(self.cols))

    @classmethod
    def from_any(cls, shape) -> "VolumeShape":
        if isinstance(shape, VolumeShape):
            return shape
        s, h, w = (int(x) for x in shape)
        return cls(s, h, w)


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar grid with dtype tag and spacing metadata.

    ``data`` is stored C-contiguous with shape (slices, rows, cols). Hard
    masks use values {0, 1}; the 255-foreground display convention of
    intermediate imagery is normalized to 1 at this layer.
    """

    shape: VolumeShape
    dtype: str
    spacing_mm: tuple[float, float, float]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.dtype not in DTYPE_NUMPY:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        arr = np.ascontiguousarray(self.data, dtype=DTYPE_NUMPY[self.dtype])
        if arr.shape != self.shape.as_tuple():
            raise ValueError(
                f"data shape {arr.shape} does not match header shape {self.shape.as_tuple()}"
            )
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing_mm must be three positive reals, got {self.spacing_mm!r}")
        if self.dtype in ("float32-normalized", "float32-soft"):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{self.dtype} values must lie in [0, 1]")
        elif self.dtype == "uint8-label":
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ValueError("uint8-label values must lie in {0, 1}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", spacing)

    @classmethod
    def from_array(cls, data, dtype: str, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume":
        data = np.asarray(data)
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got ndim={data.ndim}")
        return cls(VolumeShape(*data.shape), dtype, tuple(spacing_mm), data)


@dataclass(frozen=True)
class SoftLabelVolume:
    """Voxel grid of soft labels in [0, 1].

    Freshly generated pseudo masks contain only {0, 0.5, 1}; ensembled
    labels may hold any value in the interval.
    """

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"expected a 3D array, got ndim={arr.ndim}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("soft labels must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> VolumeShape:
        return VolumeShape(*self.data.shape)

    def to_volume(self, spacing_mm=(1.0, 1.0, 1.0)) -> Volume:
        return Volume.from_array(self.data.astype(np.float32), "float32-soft", spacing_mm)

    @classmethod
    def from_volume(cls, vol: Volume) -> "SoftLabelVolume":
        if vol.dtype not in ("float32-soft", "float32-normalized", "uint8-label"):
            raise ValueError(f"cannot view dtype {vol.dtype!r} as soft labels")
        return cls(vol.data.astype(np.float32))


@dataclass(frozen=True)
class SliceBox:
    """Axis-aligned box on one slice; pixel indices are inclusive."""

    slice_index: int
    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.slice_index < 0:
            raise ValueError("slice_index must be >= 0")
        if not (0 <= self.row_min <= self.row_max):
            raise ValueError(f"bad row extent [{self.row_min}, {self.row_max}]")
        if not (0 <= self.col_min <= self.col_max):
            raise ValueError(f"bad col extent [{self.col_min}, {self.col_max}]")

    def overlaps(self, other: "SliceBox") -> bool:
        return (
            self.row_min <= other.row_max
            and other.row_min <= self.row_max
            and self.col_min <= other.col_max
            and other.col_min <= self.col_max
        )

    def as_dict(self) -> dict:
        return {
            "row_min": int(self.row_min),
            "col_min": int(self.col_min),
            "row_max": int(self.row_max),
            "col_max": int(self.col_max),
        }


@dataclass(frozen=True)
class SliceBoxSet:
    """Per-slice bounding boxes (0, 1, or 2 per slice; 2 for paired organs)."""

    shape: VolumeShape
    boxes: dict[int, list[SliceBox]]

    def __post_init__(self):
        clean: dict[int, list[SliceBox]] = {}
        for key, group in self.boxes.items():
            key = int(key)
            group = list(group)
            if not group:
                continue
            if len(group) > 2:
                raise ValueError(f"slice {key}: at most 2 boxes per slice, got {len(group)}")
            if not (0 <= key < self.shape.slices):
                raise ValueError(f"slice index {key} outside shape {self.shape.as_tuple()}")
            for b in group:
                if b.slice_index != key:
                    raise ValueError(f"box slice_index {b.slice_index} under key {key}")
                if b.row_max >= self.shape.rows or b.col_max >= self.shape.cols:
                    raise ValueError(f"box {b} exceeds slice extent")
            if len(group) == 2 and group[0].overlaps(group[1]):
                raise ValueError(f"slice {key}: boxes must be disjoint")
            clean[key] = group
        object.__setattr__(self, "boxes", clean)

    def slices_with_boxes(self) -> list[int]:
        return sorted(self.boxes)


def save_volume(vol: Volume, path) -> Path:
    """Write ``<stem>.json`` + ``<stem>.raw``; returns the header path.

    Header fields: shape [S,H,W], dtype tag, spacing_mm [z,y,x], data_file.
    The raw file is little-endian scalars, slice-major row-major, no padding.
    """
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    header_path = path.with_suffix(".json")
    raw_path = path.with_suffix(".raw")
    header = {
        "shape": list(vol.shape.as_tuple()),
        "dtype": vol.dtype,
        "spacing_mm": list(vol.spacing_mm),
        "data_file": raw_path.name,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.ascontiguousarray(vol.data, dtype=DTYPE_NUMPY[vol.dtype]).tobytes())
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def load_volume(path) -> Volume:
    """Load a volume written by :func:`save_volume`; round-trips bit-exactly."""
    header_path = Path(path)
    if header_path.suffix != ".json":
        header_path = header_path.with_suffix(".json")
    if not header_path.exists():
        raise FileNotFoundError(f"volume header not found: {header_path}")
    header = json.loads(header_path.read_text())
    for key in ("shape", "dtype", "spacing_mm", "data_file"):
        if key not in header:
            raise ValueError(f"volume header missing field {key!r}")
    dtype = header["dtype"]
    if dtype not in DTYPE_NUMPY:
        raise ValueError(f"unknown dtype {dtype!r} in {header_path}")
    shape = VolumeShape.from_any(header["shape"])
    raw_path = header_path.parent / header["data_file"]
    if not raw_path.exists():
        raise FileNotFoundError(f"volume data file not found: {raw_path}")
    blob = raw_path.read_bytes()
    np_dtype = DTYPE_NUMPY[dtype]
    expected = shape.voxels * np_dtype.itemsize
    if len(blob) != expected:
        raise ValueError(
            f"length mismatch: {raw_path} holds {len(blob)} bytes, header implies {expected}"
        )
    data = np.frombuffer(blob, dtype=np_dtype).reshape(shape.as_tuple())
    return Volume(shape, dtype, tuple(header["spacing_mm"]), data)


def save_box_set(boxes: SliceBoxSet, path) -> Path:
    path = Path(path)
    payload = {
        "shape": list(boxes.shape.as_tuple()),
        "boxes": {
            str(k): [b.as_dict() for b in group] for k, group in sorted(boxes.boxes.items())
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def load_box_set(path) -> SliceBoxSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"box set not found: {path}")
    payload = json.loads(path.read_text())
    shape = VolumeShape.from_any(payload["shape"])
    boxes = {
        int(k): [SliceBox(slice_index=int(k), **b) for b in group]
        for k, group in payload["boxes"].items()
    }
    return SliceBoxSet(shape, boxes)


def binarize(vol, threshold: float = 0.5) -> Volume:
    """Threshold soft labels into a hard mask: output 1 iff value > threshold.

    The strict inequality sends fusion-ambiguous voxels (exactly 0.5) to
    background. Accepts a :class:`SoftLabelVolume` or a float-typed
    :class:`Volume`; spacing is preserved where available.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(vol, SoftLabelVolume):
        data, spacing = vol.data, (1.0, 1.0, 1.0)
    elif isinstance(vol, Volume):
        if vol.dtype not in ("float32-soft", "float32-normalized"):
            raise ValueError(f"binarize expects soft values, got dtype {vol.dtype!r}")
        data, spacing = vol.data, vol.spacing_mm
    else:
        raise TypeError(f"cannot binarize {type(vol).__name__}")
    return Volume.from_array((data > threshold).astype(np.uint8), "uint8-label", spacing)


def connected_components(mask: np.ndarray, connectivity: int = 8):
    """Label connected components of a binary 2D grid.

    Returns ``(labels, sizes)`` where 1-pixels receive dense component ids
    1..n in raster-scan order of first encounter, 0-pixels receive id 0, and
    ``sizes[i]`` is the pixel count of component i (``sizes[0]`` is 0).
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("expected a 2D grid")
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise ValueError("grid values must lie in {0, 1}")
    if connectivity == 4:
        structure = _STRUCT_4
    elif connectivity == 8:
        structure = _STRUCT_8
    else:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    raw, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return np.zeros(mask.shape, dtype=np.int32), np.zeros(1, dtype=np.int64)
    # enforce raster-scan id order regardless of the labelling backend
    flat = raw.ravel()
    first_seen = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first_seen, flat, np.arange(flat.size))
    order = np.argsort(first_seen[1:], kind="stable")  # old label-1..n ranked by first pixel
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=n + 1).astype(np.int64)
    sizes[0] = 0
    return labels, sizes
