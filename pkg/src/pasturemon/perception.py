"""LiDAR point clouds to heightmaps.

Plot geometry: the plot covers ``[0, width) x [0, height)`` metres; a mowed
perimeter band of width ``band`` surrounds it.  Heightmap row ``r`` spans
``y`` in ``[r*h, (r+1)*h)`` and column ``c`` spans ``x`` likewise, matching
the cell centres used by field synthesis.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

REPORT_PERCENTILES = (50, 75, 90, 95, 97.5, 99, 99.5)


class PerceptionError(ValueError):
    pass


class DegenerateGeometryError(PerceptionError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray                 # (n, 3) metres
    perimeter: np.ndarray | None = None  # (n,) bool, labels from the sampler

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise PerceptionError("point cloud contains non-finite coordinates")
        if self.perimeter is not None:
            self.perimeter = np.asarray(self.perimeter, dtype=bool).reshape(-1)
            if self.perimeter.shape[0] != self.points.shape[0]:
                raise PerceptionError("perimeter flags do not match point count")

    def __len__(self):
        return self.points.shape[0]

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.points[mask], None if self.perimeter is None else self.perimeter[mask])


@dataclass(frozen=True)
class Plane:
    """``A x + B y + z + D = 0``."""
    A: float
    B: float
    D: float
    centroid: tuple[float, float, float] | None = None

    def z(self, x, y):
        return -(self.A * np.asarray(x) + self.B * np.asarray(y) + self.D)


@dataclass(frozen=True)
class CropBox:
    plot: tuple[float, float, float, float]   # xmin, xmax, ymin, ymax
    outer: tuple[float, float, float, float]

    def __post_init__(self):
        for name, (x0, x1, y0, y1) in (("plot", self.plot), ("outer", self.outer)):
            if not (x0 < x1 and y0 < y1):
                raise PerceptionError(f"{name} box needs min < max on both axes")
        px0, px1, py0, py1 = self.plot
        ox0, ox1, oy0, oy1 = self.outer
        if not (ox0 < px0 and px1 < ox1 and oy0 < py0 and py1 < oy1):
            raise PerceptionError("plot box must lie strictly inside the outer box")

    @classmethod
    def around(cls, width: float, height: float, band: float) -> "CropBox":
        return cls((0.0, width, 0.0, height), (-band, width + band, -band, height + band))


def _inside(xy, box):
    x0, x1, y0, y1 = box
    return (xy[:, 0] >= x0) & (xy[:, 0] < x1) & (xy[:, 1] >= y0) & (xy[:, 1] < y1)


# ---------------------------------------------------------------- synthetic capture

def bilinear(truth, x, y, width: float, height: float):
    """Bilinear interpolation of ``truth`` (M, N) with nodes at cell centres; edge values beyond.

    Written as ``a + w (b - a)`` so that equal neighbours are reproduced exactly.
    """
    truth = np.asarray(truth, dtype=np.float64)
    M, N = truth.shape
    col = np.clip(np.asarray(x, dtype=np.float64) / (width / N) - 0.5, 0, N - 1)
    row = np.clip(np.asarray(y, dtype=np.float64) / (height / M) - 0.5, 0, M - 1)
    c0 = np.minimum(np.floor(col).astype(int), max(N - 2, 0))
    r0 = np.minimum(np.floor(row).astype(int), max(M - 2, 0))
    c1 = np.minimum(c0 + 1, N - 1)
    r1 = np.minimum(r0 + 1, M - 1)
    wc, wr = col - c0, row - r0
    top = truth[r0, c0] + wc * (truth[r0, c1] - truth[r0, c0])
    bot = truth[r1, c0] + wc * (truth[r1, c1] - truth[r1, c0])
    return top + wr * (bot - top)


def sample_point_cloud(truth, density: float, lidar_std: float = 4.0, dropout_frac: float = 0.0, rng=None, *,
                       width: float = 10.0, height: float = 10.0, band: float = 1.0,
                       ground: Plane = Plane(0.0, 0.0, 0.0)) -> PointCloud:
    """Uniform points over plot plus perimeter band.

    Plot points sit at ground + bilinear truth (mm) + noise; perimeter points
    at ground + noise.  ``lidar_std`` is in mm.  A ``dropout_frac`` share of
    points is removed to mimic occlusion.
    """
    if density < 0:
        raise PerceptionError("density must be non-negative")
    if not 0.0 <= dropout_frac < 1.0:
        raise PerceptionError("dropout_frac must lie in [0, 1)")
    rng = np.random.default_rng(rng)
    area = (width + 2 * band) * (height + 2 * band)
    n = int(round(density * area))
    x = rng.uniform(-band, width + band, n)
    y = rng.uniform(-band, height + band, n)
    noise = rng.normal(0.0, lidar_std, n) if lidar_std > 0 else np.zeros(n)
    keep = rng.random(n) >= dropout_frac
    in_plot = (x >= 0) & (x < width) & (y >= 0) & (y < height)
    mm = np.where(in_plot, bilinear(truth, np.clip(x, 0, width), np.clip(y, 0, height), width, height), 0.0)
    z = ground.z(x, y) + (mm + noise) / 1000.0
    pts = np.column_stack([x, y, z])[keep]
    return PointCloud(pts, ~in_plot[keep])


# ---------------------------------------------------------------- processing

def crop_box_filter(cloud: PointCloud, box: CropBox) -> tuple[PointCloud, PointCloud]:
    xy = cloud.points[:, :2]
    plot = _inside(xy, box.plot)
    perim = _inside(xy, box.outer) & ~plot
    return cloud.subset(plot), cloud.subset(perim)


def fit_ground_plane(perimeter: PointCloud) -> Plane:
    """Least-squares ``z = a x + b y + d`` in the centroid frame, solved by Cramer's rule."""
    P = perimeter.points
    if P.shape[0] < 3:
        raise DegenerateGeometryError(f"need at least 3 perimeter points, got {P.shape[0]}")
    c = P.mean(axis=0)
    x, y, z = (P - c).T
    sxx, syy, sxy = x @ x, y @ y, x @ y
    sxz, syz = x @ z, y @ z
    det = sxx * syy - sxy * sxy
    if abs(det) < 1e-12:
        raise DegenerateGeometryError(f"perimeter points are collinear (determinant {det:.3g})")
    a = (sxz * syy - sxy * syz) / det
    b = (sxx * syz - sxy * sxz) / det
    A, B = -a, -b
    D = -(A * c[0] + B * c[1] + c[2])
    return Plane(float(A), float(B), float(D), tuple(float(v) for v in c))


def point_heights(cloud: PointCloud, plane: Plane) -> np.ndarray:
    """Signed perpendicular distance to ``plane`` in mm, positive above it."""
    x, y, z = cloud.points.T
    norm = math.sqrt(plane.A ** 2 + plane.B ** 2 + 1.0)
    return (plane.A * x + plane.B * y + z + plane.D) / norm * 1000.0


def percentile_heights(heights, q: float) -> float:
    h = np.asarray(heights, dtype=np.float64)
    if h.size == 0:
        raise PerceptionError("no heights")
    if not 0.0 <= q <= 100.0:
        raise PerceptionError("percentile must lie in [0, 100]")
    return float(np.percentile(h, q))


def _statistic(name: str):
    name = name.lower()
    if name == "mean":
        return np.mean
    if name == "median":
        return np.median
    if name == "max":
        return np.max
    if name.startswith("p"):
        q = float(name[1:])
        if not 0.0 <= q <= 100.0:
            raise PerceptionError(f"bad percentile statistic {name!r}")
        return lambda v: np.percentile(v, q)
    raise PerceptionError(f"unknown statistic {name!r}")


def rasterize(xy, heights, rows: int, cols: int, *, width: float = 10.0, height: float = 10.0,
              statistic: str = "p95") -> np.ndarray:
    """Aggregate point heights per cell; empty cells take the nearest non-empty cell's value."""
    if rows < 1 or cols < 1:
        raise PerceptionError("raster needs rows, cols >= 1")
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    h = np.asarray(heights, dtype=np.float64).reshape(-1)
    if h.size == 0:
        raise PerceptionError("cannot rasterize an empty cloud")
    stat = _statistic(statistic)
    c = np.clip(np.floor(xy[:, 0] / (width / cols)).astype(int), 0, cols - 1)
    r = np.clip(np.floor(xy[:, 1] / (height / rows)).astype(int), 0, rows - 1)
    flat = r * cols + c
    order = np.argsort(flat, kind="stable")
    flat, h = flat[order], h[order]
    cells, starts = np.unique(flat, return_index=True)
    out = np.zeros(rows * cols)
    for cell, vals in zip(cells, np.split(h, starts[1:])):
        out[cell] = stat(vals)
    filled = np.zeros(rows * cols, dtype=bool)
    filled[cells] = True
    out, filled = out.reshape(rows, cols), filled.reshape(rows, cols)
    if not filled.all():
        _, (ri, ci) = ndimage.distance_transform_edt(~filled, return_indices=True)
        out = out[ri, ci]
    return out


def median_filter_3x3(m) -> np.ndarray:
    return ndimage.median_filter(np.asarray(m, dtype=np.float64), size=3, mode="nearest")


def flat_conv_3x3(m) -> np.ndarray:
    return ndimage.uniform_filter(np.asarray(m, dtype=np.float64), size=3, mode="nearest")


def denoise(m) -> np.ndarray:
    return flat_conv_3x3(median_filter_3x3(m))


# ---------------------------------------------------------------- pipeline

@dataclass
class PerceptionResult:
    heightmap: np.ndarray
    raw: np.ndarray
    plane: Plane
    n_plot: int
    n_perimeter: int
    heights: np.ndarray


def estimate_heightmap(cloud: PointCloud, box: CropBox, rows: int, cols: int, *, statistic: str = "p95",
                       filtered: bool = True) -> PerceptionResult:
    plot, perim = crop_box_filter(cloud, box)
    plane = fit_ground_plane(perim)
    h = point_heights(plot, plane)
    x0, x1, y0, y1 = box.plot
    xy = plot.points[:, :2] - [x0, y0]
    raw = rasterize(xy, h, rows, cols, width=x1 - x0, height=y1 - y0, statistic=statistic)
    return PerceptionResult(denoise(raw) if filtered else raw, raw, plane, len(plot), len(perim), h)


def format_report(res: PerceptionResult) -> str:
    p = res.plane
    lines = [
        f"plane A={p.A + 0.0:.12g} B={p.B + 0.0:.12g} C=1 D={p.D + 0.0:.12g}",
        f"plot_points={res.n_plot}",
        f"perimeter_points={res.n_perimeter}",
        "percentile height_mm",
    ]
    for q in REPORT_PERCENTILES:
        lines.append(f"{q:g} {percentile_heights(res.heights, q):.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- files

def write_point_cloud(path: str | os.PathLike, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        for i, (x, y, z) in enumerate(cloud.points.tolist()):
            if cloud.perimeter is None:
                fh.write(f"{x!r} {y!r} {z!r}\n")
            else:
                fh.write(f"{x!r} {y!r} {z!r} {int(cloud.perimeter[i])}\n")


def read_point_cloud(path: str | os.PathLike) -> PointCloud:
    pts, flags = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) not in (3, 4):
            raise PerceptionError(f"{path}:{ln}: expected 'x y z [p]'")
        pts.append([float(v) for v in parts[:3]])
        flags.append(parts[3] == "1" if len(parts) == 4 else None)
    has = [f is not None for f in flags]
    if any(has) and not all(has):
        raise PerceptionError(f"{path}: perimeter flag present on some lines only")
    return PointCloud(np.array(pts).reshape(-1, 3), np.array(flags, dtype=bool) if flags and all(has) else None)
