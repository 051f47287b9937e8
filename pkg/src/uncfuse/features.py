"""BEV rasterization of point clouds and RoI pooling from BEV and image grids.

The BEV grid covers the configured range gate at a fixed resolution with
C = n_slabs + 2 channels per cell: binary occupancy per vertical slab, the
maximum point height above the gate floor, and log(1 + point count).

RoI pooling divides a box's axis-aligned bounding rectangle into P x P
(or Q x Q) bins and mean-pools the cells whose centers fall inside each
bin. Axis-aligned pooling is intentional: the fusion input also receives
the exact 8-dim box encoding, so orientation is not lost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import FeatureConfig, WorldConfig
from .geometry import Box3D, CameraModel, corners_bev, project_to_image


@dataclass
class BevGrid:
    """Rasterized point cloud: cells (X, Y, C), metric origin and resolution."""

    cells: np.ndarray
    resolution: float
    x0: float
    y0: float

    @property
    def nx(self) -> int:
        return self.cells.shape[0]

    @property
    def ny(self) -> int:
        return self.cells.shape[1]

    @property
    def n_channels(self) -> int:
        return self.cells.shape[2]


def grid_shape(world: WorldConfig, feat: FeatureConfig):
    nx = int(round((world.x_max - world.x_min) / feat.resolution))
    ny = int(round((world.y_max - world.y_min) / feat.resolution))
    return nx, ny


def rasterize_bev(points, world: WorldConfig, feat: FeatureConfig) -> BevGrid:
    """Bin points into the BEV grid; out-of-gate points are dropped.

    Cell index is (floor((x - x0)/res), floor((y - y0)/res)). Channels:
    [occupancy slab 0 .. n_slabs-1, max height above z_min, log1p(count)].
    """
    nx, ny = grid_shape(world, feat)
    n_ch = feat.n_channels
    cells = np.zeros((nx, ny, n_ch), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return BevGrid(cells, feat.resolution, world.x_min, world.y_min)

    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    keep = ((x >= world.x_min) & (x < world.x_max)
            & (y >= world.y_min) & (y < world.y_max)
            & (z >= world.z_min) & (z <= world.z_max))
    x, y, z = x[keep], y[keep], z[keep]
    if len(x) == 0:
        return BevGrid(cells, feat.resolution, world.x_min, world.y_min)

    ix = np.floor((x - world.x_min) / feat.resolution).astype(np.int64)
    iy = np.floor((y - world.y_min) / feat.resolution).astype(np.int64)
    ix = np.clip(ix, 0, nx - 1)
    iy = np.clip(iy, 0, ny - 1)

    slab_h = (world.z_max - world.z_min) / feat.n_slabs
    iz = np.clip(np.floor((z - world.z_min) / slab_h).astype(np.int64), 0, feat.n_slabs - 1)
    cells[ix, iy, iz] = 1.0

    rel_z = z - world.z_min
    np.maximum.at(cells[:, :, feat.n_slabs], (ix, iy), rel_z)

    counts = np.zeros((nx, ny), dtype=np.float64)
    np.add.at(counts, (ix, iy), 1.0)
    cells[:, :, feat.n_slabs + 1] = np.log1p(counts)
    return BevGrid(cells, feat.resolution, world.x_min, world.y_min)


def _bin_slices(lo: float, hi: float, origin: float, res: float, n_bins: int, n_cells: int):
    """Index ranges of cells whose centers fall in each of n_bins over [lo, hi)."""
    width = (hi - lo) / n_bins
    out = []
    for i in range(n_bins):
        b_lo = lo + i * width
        b_hi = lo + (i + 1) * width
        k_min = math.ceil((b_lo - origin) / res - 0.5)
        k_max = math.ceil((b_hi - origin) / res - 0.5)
        out.append((max(k_min, 0), min(k_max, n_cells)))
    return out


def roi_pool_bev(grid: BevGrid, box: Box3D, p: int) -> np.ndarray:
    """(P, P, C) mean pool over the box footprint's bounding rectangle.

    Bins with no covered cell (outside the grid) are zero.
    """
    corners = corners_bev(box)
    x_lo, y_lo = corners.min(axis=0)
    x_hi, y_hi = corners.max(axis=0)
    xs = _bin_slices(x_lo, x_hi, grid.x0, grid.resolution, p, grid.nx)
    ys = _bin_slices(y_lo, y_hi, grid.y0, grid.resolution, p, grid.ny)
    patch = np.zeros((p, p, grid.n_channels), dtype=np.float64)
    for i, (ka, kb) in enumerate(xs):
        if kb <= ka:
            continue
        for j, (la, lb) in enumerate(ys):
            if lb <= la:
                continue
            patch[i, j] = grid.cells[ka:kb, la:lb].mean(axis=(0, 1))
    return patch


def roi_pool_image(raster: np.ndarray, box: Box3D, cam: CameraModel, q: int):
    """(Q, Q, C') mean pool over the box's projected image rectangle.

    Returns None when the box is out of the camera field of view. Bins
    narrower than a pixel fall back to the pixel containing the bin center,
    so small distant boxes still produce signal.
    """
    rect = project_to_image(box, cam)
    if rect is None:
        return None
    raster = np.asarray(raster, dtype=np.float64)
    h, w = raster.shape[0], raster.shape[1]
    xs = _bin_slices(rect.x0, rect.x1, 0.0, 1.0, q, w)
    ys = _bin_slices(rect.y0, rect.y1, 0.0, 1.0, q, h)
    bw = (rect.x1 - rect.x0) / q
    bh = (rect.y1 - rect.y0) / q
    patch = np.zeros((q, q, raster.shape[2]), dtype=np.float64)
    for j, (la, lb) in enumerate(ys):
        for i, (ka, kb) in enumerate(xs):
            if kb > ka and lb > la:
                patch[j, i] = raster[la:lb, ka:kb].mean(axis=(0, 1))
            else:
                # Sub-pixel bin inside the image: sample the center pixel.
                px = min(max(int(rect.x0 + (i + 0.5) * bw), 0), w - 1)
                py = min(max(int(rect.y0 + (j + 0.5) * bh), 0), h - 1)
                patch[j, i] = raster[py, px]
    return patch
