"""Full-pattern correction: distribute per-pixel inference over workers,
reassemble the predicted IIP map, threshold and vectorize it into a mask
pattern, enforce minimal geometry rules, and measure quality and scaling.

Every pixel is predicted independently from its own window with a fixed
batch size of one, so the assembled map is bitwise identical for any worker
count and any chunking of the pixel list.
"""

from __future__ import annotations

import csv
import multiprocessing
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import ModelParams, predict
from .errors import CoordError, DimMismatch, ParamError, ShapeError
from .grid import RasterGrid
from .iip import IipConfig, IipMap, bin_classes, class_value, threshold_iip
from .layout import (
    Bbox,
    LayoutPattern,
    polygon_area,
    polygon_min_edge,
    raster_region,
    rasterize,
    vectorize,
)
from .tiling import TilingConfig, compress_window


@dataclass
class WorkChunk:
    """Half-open index range [start, end) into the selected pixel list."""

    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ParamError(f"bad chunk [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class CleanupRules:
    min_area: float = 0.0
    min_edge: float = 0.0

    def __post_init__(self):
        if self.min_area < 0 or self.min_edge < 0:
            raise ParamError("cleanup thresholds must be >= 0")


@dataclass
class CorrectionConfig:
    tiling: TilingConfig
    iip: IipConfig
    workers: int = 1
    region_filter: list[Bbox] | None = None
    cleanup: CleanupRules = field(default_factory=CleanupRules)

    def __post_init__(self):
        if self.workers < 1:
            raise ParamError(f"workers must be >= 1, got {self.workers}")


@dataclass
class ConfusionMatrix:
    """counts[ref_class, pred_class] over evaluated pixels."""

    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise DimMismatch(f"confusion matrix must be square, got {c.shape}")
        if c.min() < 0:
            raise ParamError("confusion matrix counts must be >= 0")
        self.counts = c.astype(np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        t = self.total()
        return float(np.trace(self.counts) / t) if t else 0.0

    def within_one_accuracy(self) -> float:
        """Fraction of mass on the diagonal and its two neighbors."""
        t = self.total()
        if not t:
            return 0.0
        hit = sum(
            int(np.trace(self.counts, offset=k)) for k in (-1, 0, 1)
        )
        return hit / t


@dataclass
class ScalingReport:
    rows: list[dict]  # workers, wall_seconds, speedup, efficiency
    consistent: bool
    n_pixels: int


# ---------------------------------------------------------------------------
# Chunk planning
# ---------------------------------------------------------------------------

def plan_chunks(n_pixels: int, workers: int) -> list[WorkChunk]:
    """Balanced contiguous partition; sizes differ by at most one and empty
    chunks are omitted.
    """
    if n_pixels < 0:
        raise ParamError(f"n_pixels must be >= 0, got {n_pixels}")
    if workers < 1:
        raise ParamError(f"workers must be >= 1, got {workers}")
    base, extra = divmod(n_pixels, workers)
    chunks = []
    pos = 0
    for i in range(workers):
        size = base + (1 if i < extra else 0)
        if size == 0:
            continue
        chunks.append(WorkChunk(pos, pos + size))
        pos += size
    return chunks


# ---------------------------------------------------------------------------
# Deployment raster and pixel selection
# ---------------------------------------------------------------------------

def deployment_raster(target: LayoutPattern, tiling: TilingConfig) -> RasterGrid:
    """Rasterize the target over its bbox expanded by the interaction
    distance, so every processed pixel sees true dark field beyond the
    layout edge.
    """
    region = raster_region(target, tiling.interaction_distance)
    return rasterize(target, tiling.px_per_nm, region)


def _bbox_pixel_mask(g: RasterGrid, boxes: list[Bbox]) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside any box (closed
    bounds); every box must lie within the grid's area.
    """
    gx0, gy0, gx1, gy1 = g.bbox_nm()
    mask = np.zeros((g.height, g.width), dtype=bool)
    inv = 1.0 / g.px_per_nm
    xs = g.origin[0] + np.arange(g.width) * inv
    ys = g.origin[1] + np.arange(g.height) * inv
    for box in boxes:
        x0, y0, x1, y1 = box
        if x1 <= x0 or y1 <= y0:
            raise CoordError(f"degenerate region bbox {box}")
        if x0 < gx0 - 1e-9 or y0 < gy0 - 1e-9 or x1 > gx1 + 1e-9 or y1 > gy1 + 1e-9:
            raise CoordError(f"region bbox {box} outside grid area {g.bbox_nm()}")
        cols = (xs >= x0) & (xs <= x1)
        rows = (ys >= y0) & (ys <= y1)
        mask |= rows[:, None] & cols[None, :]
    return mask


def _selected_flat(g: RasterGrid, region_filter: list[Bbox] | None) -> np.ndarray:
    if region_filter is None:
        return np.arange(g.width * g.height, dtype=np.int64)
    mask = _bbox_pixel_mask(g, region_filter)
    return np.nonzero(mask.ravel())[0]


# ---------------------------------------------------------------------------
# Per-pixel inference
# ---------------------------------------------------------------------------

# Read-only state inherited by forked workers.
_SHARED: dict = {}


def _pad_raster(g: RasterGrid, tiling: TilingConfig) -> np.ndarray:
    r = tiling.window_radius
    padded = np.zeros((g.height + 2 * r, g.width + 2 * r), dtype=np.float32)
    padded[r : r + g.height, r : r + g.width] = g.values
    return padded


def _infer_range(args: tuple[int, int]) -> np.ndarray:
    """Predict class values for sel_flat[start:end]; one pixel at a time so
    results do not depend on how the range was cut.
    """
    start, end = args
    padded = _SHARED["padded"]
    sel = _SHARED["sel_flat"]
    tiling: TilingConfig = _SHARED["tiling"]
    model: ModelParams = _SHARED["model"]
    lut = _SHARED["class_values"]
    width = _SHARED["width"]
    side = tiling.window_side
    out = np.empty(end - start, dtype=np.float64)
    for j in range(start, end):
        flat = sel[j]
        y, x = divmod(int(flat), width)
        window = padded[y : y + side, x : x + side]
        img = compress_window(window, tiling)
        out[j - start] = lut[predict(model, img)]
    return out


def _infer(
    m: ModelParams,
    raster: RasterGrid,
    sel_flat: np.ndarray,
    tiling: TilingConfig,
    num_classes: int,
    workers: int,
) -> np.ndarray:
    _SHARED.clear()
    _SHARED.update(
        padded=_pad_raster(raster, tiling),
        sel_flat=sel_flat,
        tiling=tiling,
        model=m,
        class_values=np.array(
            [class_value(c, num_classes) for c in range(num_classes)]
        ),
        width=raster.width,
    )
    try:
        chunks = plan_chunks(sel_flat.size, workers)
        ranges = [(c.start, c.end) for c in chunks]
        if workers == 1 or len(ranges) <= 1:
            parts = [_infer_range(r) for r in ranges]
        else:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(processes=min(workers, len(ranges))) as pool:
                parts = pool.map(_infer_range, ranges, chunksize=1)
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.float64)
    finally:
        _SHARED.clear()


def predict_map(m: ModelParams, target: LayoutPattern, cfg: CorrectionConfig) -> IipMap:
    """Predicted IIP map over the deployment raster.

    Pixels outside cfg.region_filter (when given) stay 0.  The output is
    bitwise independent of cfg.workers.
    """
    if m.arch.input_side != cfg.tiling.output_side:
        raise ShapeError(
            f"model input {m.arch.input_side}px, tiling output "
            f"{cfg.tiling.output_side}px"
        )
    if m.arch.num_classes != cfg.iip.num_classes:
        raise ShapeError(
            f"model has {m.arch.num_classes} classes, config {cfg.iip.num_classes}"
        )
    raster = deployment_raster(target, cfg.tiling)
    sel_flat = _selected_flat(raster, cfg.region_filter)
    values = _infer(m, raster, sel_flat, cfg.tiling, cfg.iip.num_classes, cfg.workers)
    flat = np.zeros(raster.width * raster.height, dtype=np.float64)
    flat[sel_flat] = values
    grid = raster.with_values(flat.reshape(raster.height, raster.width))
    return IipMap(
        grid=grid,
        source_mask_checksum=target.checksum(),
        iik_checksum=cfg.iip.iik.checksum() if cfg.iip.iik is not None else "",
    )


def recorrect(
    prior: IipMap,
    target: LayoutPattern,
    region: list[Bbox],
    m2: ModelParams,
    cfg: CorrectionConfig,
) -> IipMap:
    """Re-run inference with m2 only on pixels inside the given regions and
    splice the new values into a copy of the prior map; everything outside
    is bitwise untouched.
    """
    if not region:
        return IipMap(
            grid=prior.grid.copy(),
            source_mask_checksum=prior.source_mask_checksum,
            iik_checksum=prior.iik_checksum,
        )
    if m2.arch.input_side != cfg.tiling.output_side:
        raise ShapeError(
            f"model input {m2.arch.input_side}px, tiling output "
            f"{cfg.tiling.output_side}px"
        )
    raster = deployment_raster(target, cfg.tiling)
    if raster.shape != prior.grid.shape:
        raise CoordError(
            f"prior map {prior.grid.shape} does not match deployment raster "
            f"{raster.shape}"
        )
    sel_flat = _selected_flat(raster, region)
    values = _infer(m2, raster, sel_flat, cfg.tiling, cfg.iip.num_classes, cfg.workers)
    flat = prior.grid.values.copy().ravel()
    flat[sel_flat] = values
    return IipMap(
        grid=prior.grid.with_values(flat.reshape(prior.grid.shape)),
        source_mask_checksum=prior.source_mask_checksum,
        iik_checksum=prior.iik_checksum,
    )


# ---------------------------------------------------------------------------
# Geometry cleanup and the end-to-end correction
# ---------------------------------------------------------------------------

def cleanup(p: LayoutPattern, min_area: float, min_edge: float) -> LayoutPattern:
    """Drop polygons below the area or edge-length floors (no repair)."""
    if min_area < 0 or min_edge < 0:
        raise ParamError("cleanup thresholds must be >= 0")
    keep = [
        poly
        for poly in p.polygons
        if polygon_area(poly) >= min_area and polygon_min_edge(poly) >= min_edge
    ]
    return LayoutPattern(keep, p.layer)


def correct(target: LayoutPattern, m: ModelParams, cfg: CorrectionConfig) -> LayoutPattern:
    """Predict the IIP map, threshold it, vectorize, and clean up: the
    corrected photomask pattern for the target.
    """
    iip_map = predict_map(m, target, cfg)
    mask = threshold_iip(iip_map, cfg.iip.threshold)
    return cleanup(vectorize(mask), cfg.cleanup.min_area, cfg.cleanup.min_edge)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _as_class_array(x, num_classes: int) -> np.ndarray:
    if isinstance(x, IipMap):
        return bin_classes(x.grid.values, num_classes)
    a = np.asarray(x)
    if np.issubdtype(a.dtype, np.integer):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ParamError("class ids outside [0, C)")
        return a
    return bin_classes(a, num_classes)


def confusion_matrix(pred, ref, num_classes: int) -> ConfusionMatrix:
    """Counts indexed [reference, predicted]; inputs may be IipMaps, class
    arrays, or [0,1] value arrays (binned).
    """
    p = _as_class_array(pred, num_classes)
    r = _as_class_array(ref, num_classes)
    if p.shape != r.shape:
        raise DimMismatch(f"pred {p.shape} vs ref {r.shape}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (r.ravel().astype(np.int64), p.ravel().astype(np.int64)), 1)
    return ConfusionMatrix(counts)


def iou(a: RasterGrid, b: RasterGrid) -> float:
    """Intersection over union of binary grids; 1.0 when both are empty."""
    if a.shape != b.shape:
        raise DimMismatch(f"grids {a.shape} vs {b.shape}")
    av, bv = a.values != 0, b.values != 0
    union = int(np.logical_or(av, bv).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(av, bv).sum() / union)


# ---------------------------------------------------------------------------
# Scaling benchmark
# ---------------------------------------------------------------------------

def bench_scaling(
    m: ModelParams,
    target: LayoutPattern,
    cfg: CorrectionConfig,
    worker_counts: list[int],
    repeats: int = 3,
) -> ScalingReport:
    """Time the inference stage at each worker count (median of repeats),
    gate on bitwise-equal outputs, and report speedup and efficiency
    relative to the single-worker run.
    """
    if not worker_counts or worker_counts[0] != 1:
        raise ParamError("worker_counts must start with 1 (the baseline)")
    raster = deployment_raster(target, cfg.tiling)
    sel_flat = _selected_flat(raster, cfg.region_filter)
    if sel_flat.size < 10_000:
        raise ParamError(
            f"benchmark workload has {sel_flat.size} pixels; need >= 10000"
        )
    rows = []
    baseline = None
    reference_values = None
    consistent = True
    for w in worker_counts:
        times = []
        values = None
        for _ in range(repeats):
            t0 = time.perf_counter()
            values = _infer(m, raster, sel_flat, cfg.tiling, cfg.iip.num_classes, w)
            times.append(time.perf_counter() - t0)
        wall = float(np.median(times))
        if reference_values is None:
            reference_values = values
            baseline = wall
        elif not np.array_equal(values, reference_values):
            consistent = False
        speedup = baseline / wall if wall > 0 else float("inf")
        rows.append(
            {
                "workers": w,
                "wall_seconds": wall,
                "speedup": speedup,
                "efficiency": speedup / w,
            }
        )
    return ScalingReport(rows=rows, consistent=consistent, n_pixels=int(sel_flat.size))


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def write_scaling_csv(report: ScalingReport, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["workers", "wall_seconds", "speedup", "efficiency"])
        for row in report.rows:
            w.writerow(
                [
                    row["workers"],
                    f"{row['wall_seconds']:.6f}",
                    f"{row['speedup']:.4f}",
                    f"{row['efficiency']:.4f}",
                ]
            )


def write_confusion_csv(cm: ConfusionMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for row in cm.counts:
            w.writerow([int(v) for v in row])
