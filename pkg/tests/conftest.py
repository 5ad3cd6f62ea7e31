"""Shared test fixtures and numeric helpers."""
from __future__ import annotations

import numpy as np

from deformconv import conv, pointcloud, spatial
from deformconv.rng import DetRng


def random_cloud(rng: np.random.Generator, m: int, dim: int, extent: float = 1.0):
    positions = rng.uniform(-extent, extent, size=(m, 3))
    features = rng.normal(size=(m, dim))
    return pointcloud.PointCloud(positions=positions, features=features)


def random_filter(rng: np.random.Generator, k: int, spacing: float, d_in: int, d_out: int,
                  bias: bool = False) -> conv.DeformableFilter:
    grid = conv.grid_from_spacing(k, spacing)
    weights = rng.normal(size=(grid.num_anchors, d_in, d_out))
    b = rng.normal(size=d_out) if bias else None
    return conv.DeformableFilter(grid=grid, weights=weights, bias=b)


def neighbor_table(cloud: pointcloud.PointCloud, radius: float, cap: int) -> spatial.NeighborTable:
    index = spatial.build_index(cloud.positions, radius)
    return spatial.radius_neighbors(index, cloud.positions, radius, cap)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(b))) if b.size else 0.0, 1e-30)
    return float(np.max(np.abs(a - b))) / denom if a.size else 0.0


def fd_grad(fun, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        hi = fun()
        x[idx] = old - step
        lo = fun()
        x[idx] = old
        g[idx] = (hi - lo) / (2.0 * step)
        it.iternext()
    return g


def grad_rel(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def det_rng(seed: int) -> DetRng:
    return DetRng(seed)
