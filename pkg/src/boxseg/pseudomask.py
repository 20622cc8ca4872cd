"""Dense pseudo masks from bounding-box annotations.

Per slice, pixels outside the box are zeroed and the slice is clustered by
intensity with k-means. The cluster with the second-largest area is taken
as foreground (the exterior zeros plus dark in-box pixels form the largest
cluster), then cleaned up morphologically: closing, filling of small
background components, and removal of small foreground components. The
chain runs for two values of k and the binary results are fused into a
trinary mask: 1 where both agree on foreground, 0 where both agree on
background, 0.5 where they disagree.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .volume import SliceBox, SliceBoxSet, SoftLabelVolume, Volume, connected_components


@dataclass(frozen=True)
class PseudoMaskParams:
    """Knobs of the mask-generation chain with their standard defaults."""

    ks: tuple[int, int] = (2, 3)
    hole_area_max: int = 10
    fg_component_min_frac: float = 0.01
    closing_radius: int = 1
    kmeans_restarts: int = 5
    kmeans_max_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        ks = tuple(int(k) for k in self.ks)
        if len(ks) != 2 or min(ks) < 2:
            raise ValueError(f"ks must be two cluster counts >= 2, got {self.ks}")
        if self.hole_area_max < 0:
            raise ValueError("hole_area_max must be >= 0")
        if not (0.0 <= self.fg_component_min_frac < 1.0):
            raise ValueError("fg_component_min_frac must lie in [0, 1)")
        if self.closing_radius < 0:
            raise ValueError("closing_radius must be >= 0")
        if self.kmeans_restarts < 1:
            raise ValueError("kmeans_restarts must be >= 1")
        object.__setattr__(self, "ks", ks)


@dataclass
class KMeansResult:
    k: int
    assignments: np.ndarray  # per-pixel cluster index grid
    centroids: np.ndarray  # mean intensity per cluster
    wcss: float


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])


def _kmeans_pp_init(values: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty(k, dtype=np.float64)
    centroids[0] = values[rng.integers(values.size)]
    d2 = (values - centroids[0]) ** 2
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = values[rng.integers(values.size)]
            continue
        idx = rng.choice(values.size, p=d2 / total)
        centroids[j] = values[idx]
        d2 = np.minimum(d2, (values - centroids[j]) ** 2)
    return centroids


def _lloyd(values: np.ndarray, centroids: np.ndarray, max_iters: int):
    k = centroids.size
    assign = None
    for _ in range(max_iters):
        d2 = (values[:, None] - centroids[None, :]) ** 2
        new_assign = np.argmin(d2, axis=1)
        counts = np.bincount(new_assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # relocate an empty cluster to the point farthest from its centroid
            worst = int(np.argmax(d2[np.arange(values.size), new_assign]))
            new_assign[worst] = j
            counts = np.bincount(new_assign, minlength=k)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        sums = np.bincount(assign, weights=values, minlength=k)
        centroids = sums / counts
    wcss = float(((values - centroids[assign]) ** 2).sum())
    return assign, centroids, wcss


def kmeans_slice(
    slice_img: np.ndarray,
    k: int,
    restarts: int = 5,
    max_iters: int = 100,
    seed: int = 0,
) -> KMeansResult:
    """Cluster slice intensities into k groups minimizing within-cluster
    sum of squares; k-means++ restarts, best restart by WCSS, seeded."""
    grid = np.asarray(slice_img, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("cannot cluster an empty slice")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    values = grid.ravel()
    if np.unique(values).size < k:
        raise ValueError(f"fewer distinct values than k={k}")
    best = None
    for r in range(restarts):
        rng = _rng(seed, r)
        init = _kmeans_pp_init(values, k, rng)
        assign, centroids, wcss = _lloyd(values, init, max_iters)
        if best is None or wcss < best[2]:
            best = (assign, centroids, wcss)
    assign, centroids, wcss = best
    return KMeansResult(k, assign.reshape(grid.shape).astype(np.int32), centroids, wcss)


def box_union_mask(shape: tuple[int, int], boxes) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for b in boxes:
        out[b.row_min : b.row_max + 1, b.col_min : b.col_max + 1] = True
    return out


def mask_outside_boxes(slice_img: np.ndarray, boxes) -> np.ndarray:
    """Zero every pixel outside the union of the boxes."""
    grid = np.asarray(slice_img)
    inside = box_union_mask(grid.shape, boxes)
    return np.where(inside, grid, 0)


def select_foreground(result: KMeansResult, boxes) -> np.ndarray:
    """Pick the cluster with the second-largest pixel count as foreground.

    Areas are counted over the whole slice (the exterior zeros belong to the
    largest cluster). Count ties resolve toward the higher-centroid cluster;
    the selected foreground is restricted to the box union.
    """
    counts = np.bincount(result.assignments.ravel(), minlength=result.k)
    centroids = result.centroids
    # largest cluster: max count, ties toward the darker cluster
    largest = min(range(result.k), key=lambda j: (-counts[j], centroids[j]))
    rest = [j for j in range(result.k) if j != largest]
    chosen = max(rest, key=lambda j: (counts[j], centroids[j]))
    fg = (result.assignments == chosen) & box_union_mask(result.assignments.shape, boxes)
    return fg.astype(np.uint8)


def morphological_closing(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Dilate then erode with a (2r+1)-square structuring element.

    Computed on a zero-padded copy so border behaviour matches closing on
    the unbounded plane; the result never loses input foreground.
    """
    mask = np.asarray(mask)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or not mask.any():
        return mask.astype(np.uint8).copy()
    se = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    pad = 2 * radius
    padded = np.pad(mask.astype(bool), pad)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
    return closed[pad:-pad, pad:-pad].astype(np.uint8)


def fill_holes(mask: np.ndarray, hole_area_max: int = 10) -> np.ndarray:
    """Relabel background components (4-connectivity) smaller than the
    threshold as foreground; larger ones stay."""
    mask = np.asarray(mask).astype(np.uint8)
    background = (mask == 0).astype(np.uint8)
    labels, sizes = connected_components(background, connectivity=4)
    if sizes.size == 1:
        return mask.copy()
    small = sizes < hole_area_max
    small[0] = False
    out = mask.copy()
    out[small[labels]] = 1
    return out


def remove_small_components(mask: np.ndarray, min_frac: float = 0.01) -> np.ndarray:
    """Erase foreground components (8-connectivity) smaller than ``min_frac``
    times the largest component's area."""
    if not (0.0 <= min_frac < 1.0):
        raise ValueError("min_frac must lie in [0, 1)")
    mask = np.asarray(mask).astype(np.uint8)
    labels, sizes = connected_components(mask, connectivity=8)
    if sizes.size == 1:
        return mask.copy()
    cutoff = min_frac * sizes[1:].max()
    kill = sizes < cutoff
    kill[0] = False
    out = mask.copy()
    out[kill[labels]] = 0
    return out


def fuse_masks(mask_a: np.ndarray, mask_b: np.ndarray) -> np.ndarray:
    """Combine two binary masks into {0, 0.5, 1}: agreement keeps the common
    label, disagreement yields 0.5."""
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return (a.astype(np.float32) + b.astype(np.float32)) / 2.0


def _mask_one_slice(slice_img: np.ndarray, boxlist, params: PseudoMaskParams, slice_index: int):
    tri = np.zeros(slice_img.shape, dtype=np.float32)
    entries = []
    base_seed = params.seed ^ slice_index
    for b_idx, box in enumerate(boxlist):
        masked = mask_outside_boxes(slice_img, [box])
        distinct = np.unique(masked).size
        per_k = []
        failed = None
        for k in params.ks:
            entry = {"slice": slice_index, "box": b_idx, "k": k, "cluster_sizes": [], "warnings": []}
            if distinct < k:
                failed = k
                entry["warnings"].append(
                    f"box has {distinct} distinct intensities < k={k}; emitting empty mask"
                )
                entries.append(entry)
                break
            res = kmeans_slice(
                masked, k, params.kmeans_restarts, params.kmeans_max_iters, seed=_seed_for(base_seed, b_idx, k)
            )
            entry["cluster_sizes"] = np.bincount(res.assignments.ravel(), minlength=k).tolist()
            m = select_foreground(res, [box])
            m = morphological_closing(m, params.closing_radius)
            m = fill_holes(m, params.hole_area_max)
            m = remove_small_components(m, params.fg_component_min_frac)
            per_k.append(m)
            entries.append(entry)
        if failed is None:
            tri = np.maximum(tri, fuse_masks(per_k[0], per_k[1]))
    return tri, entries


def _seed_for(base_seed: int, box_index: int, k: int) -> int:
    # stable per-(slice, box, k) stream; base_seed already mixes the slice index
    return (base_seed & 0xFFFFFFFFFFFFFFFF) * 1000003 + box_index * 131 + k


def default_n_jobs() -> int:
    """Worker cap from BOXSEG_THREADS (1 = serial, the default)."""
    try:
        return max(int(os.environ.get("BOXSEG_THREADS", "1")), 1)
    except ValueError:
        return 1


def generate_pseudo_mask(
    vol: Volume,
    boxes: SliceBoxSet,
    params: PseudoMaskParams | None = None,
    n_jobs: int | None = None,
):
    """Run the full per-slice chain and stack the results into a soft volume.

    Returns ``(mask, report)`` where the report carries one entry per
    (slice, box, k) with cluster sizes and warnings. Slices without a box
    come out all-zero; a box with fewer distinct intensities than k yields
    an all-zero contribution plus a warning. With two boxes on a slice each
    is processed independently and the trinary results are united with max.
    Deterministic: slices are seeded as ``params.seed XOR slice_index``.
    """
    params = params or PseudoMaskParams()
    if vol.dtype != "float32-normalized":
        raise ValueError(f"expected a float32-normalized volume, got {vol.dtype!r}")
    if boxes.shape.as_tuple() != vol.shape.as_tuple():
        raise ValueError(
            f"box set shape {boxes.shape.as_tuple()} does not match volume {vol.shape.as_tuple()}"
        )
    n_jobs = default_n_jobs() if n_jobs is None else max(int(n_jobs), 1)
    out = np.zeros(vol.shape.as_tuple(), dtype=np.float32)
    report: list[dict] = []
    todo = [(s, boxes.boxes[s]) for s in boxes.slices_with_boxes()]
    if n_jobs == 1:
        results = [_mask_one_slice(vol.data[s].astype(np.float64), group, params, s) for s, group in todo]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_mask_one_slice)(vol.data[s].astype(np.float64), group, params, s)
            for s, group in todo
        )
    for (s, _), (tri, entries) in zip(todo, results):
        out[s] = tri
        report.extend(entries)
    return SoftLabelVolume(out), report


class PseudoMaskGenerator(BaseEstimator, TransformerMixin):
    """Transformer from (volume, boxes) pairs to trinary pseudo masks.

    A thin estimator facade over :func:`generate_pseudo_mask` so the chain
    composes with scikit-learn tooling (``get_params`` / ``set_params`` /
    ``clone``). The stage report of the most recent ``transform`` call is
    kept on ``report_``.
    """

    def __init__(
        self,
        ks=(2, 3),
        hole_area_max: int = 10,
        fg_component_min_frac: float = 0.01,
        closing_radius: int = 1,
        kmeans_restarts: int = 5,
        kmeans_max_iters: int = 100,
        seed: int = 0,
        n_jobs: int | None = None,
    ):
        self.ks = ks
        self.hole_area_max = hole_area_max
        self.fg_component_min_frac = fg_component_min_frac
        self.closing_radius = closing_radius
        self.kmeans_restarts = kmeans_restarts
        self.kmeans_max_iters = kmeans_max_iters
        self.seed = seed
        self.n_jobs = n_jobs

    def _params(self) -> PseudoMaskParams:
        return PseudoMaskParams(
            ks=tuple(self.ks),
            hole_area_max=self.hole_area_max,
            fg_component_min_frac=self.fg_component_min_frac,
            closing_radius=self.closing_radius,
            kmeans_restarts=self.kmeans_restarts,
            kmeans_max_iters=self.kmeans_max_iters,
            seed=self.seed,
        )

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        single = isinstance(X, tuple) and len(X) == 2 and isinstance(X[0], Volume)
        pairs = [X] if single else list(X)
        masks, report = [], []
        for vol, boxes in pairs:
            mask, entries = generate_pseudo_mask(vol, boxes, self._params(), n_jobs=self.n_jobs)
            masks.append(mask)
            report.append(entries)
        self.report_ = report[0] if single else report
        return masks[0] if single else masks
