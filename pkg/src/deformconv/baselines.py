"""Reference methods the deformable operator is measured against.

Two baselines:

  * continuous filters parameterised by a small MLP over the offset
    (one weight per channel per pair, then a pointwise map), and
  * voxelise-extend-restrict: average features into a fixed voxel grid,
    then read each point's cell value back.

The voxel path is the contrast case: any displacement that stays inside
a cell is invisible to it, and shifting a cloud across cell boundaries
changes its output, while the deformable operator tracks both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conv, nn
from .pointcloud import PointCloud
from .rng import DetRng
from .spatial import NeighborTable, build_index, radius_neighbors


def _freeze(obj, name: str, value) -> None:
    object.__setattr__(obj, name, value)


@dataclass(frozen=True)
class MlpFilter:
    """Offset -> per-channel filter weight, as a tiny dense network.

    Input is the 3-vector offset; hidden layers use ReLU; the final
    layer is linear and emits one weight per input feature channel.
    ``layers`` holds (W, b) pairs applied left to right.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("MlpFilter needs at least one layer")
        prev = 3
        frozen = []
        for i, (w, b) in enumerate(self.layers):
            w = np.array(w, dtype=np.float64, copy=True)
            b = np.array(b, dtype=np.float64, copy=True).reshape(-1)
            if w.ndim != 2 or w.shape[0] != prev or b.shape[0] != w.shape[1]:
                raise ValueError(f"MLP layer {i}: bad shapes {w.shape}, {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"MLP layer {i}: non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            frozen.append((w, b))
            prev = w.shape[1]
        _freeze(self, "layers", tuple(frozen))

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]


def mlp_filter_init(hidden: list[int], out_dim: int, rng: DetRng) -> MlpFilter:
    """He-initialised MlpFilter with the given hidden widths."""
    dims = [3] + list(hidden) + [out_dim]
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(2.0 / a)
        w = rng.normals(a * b, 0.0, scale).reshape(a, b)
        layers.append((w, np.zeros(b)))
    return MlpFilter(tuple(layers))


def mlp_eval(filt: MlpFilter, offsets: np.ndarray) -> np.ndarray:
    """Evaluate the filter network on a batch of offsets: (P, out_dim)."""
    x = np.asarray(offsets, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"offsets must be (P, 3), got {x.shape}")
    n = len(filt.layers)
    for i, (w, b) in enumerate(filt.layers):
        x = x @ w + b
        if i < n - 1:
            x = np.maximum(x, 0.0)
    return x


def _mlp_tape(filt: MlpFilter, offsets: np.ndarray) -> list[np.ndarray]:
    """Forward pass keeping every pre-activation input for backprop."""
    acts = [np.asarray(offsets, dtype=np.float64)]
    n = len(filt.layers)
    for i, (w, b) in enumerate(filt.layers):
        x = acts[-1] @ w + b
        if i < n - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return acts


def _mlp_backward(
    filt: MlpFilter, acts: list[np.ndarray], upstream: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of the MLP parameters given d(loss)/d(output)."""
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(filt.layers)
    grad = upstream
    for i in range(len(filt.layers) - 1, -1, -1):
        w, _ = filt.layers[i]
        if i < len(filt.layers) - 1:
            grad = np.where(acts[i + 1] > 0, grad, 0.0)
        grads[i] = (acts[i].T @ grad, grad.sum(axis=0))
        grad = grad @ w.T
    return grads


def pcc_forward(
    cloud: PointCloud,
    neighbors: NeighborTable,
    filt: MlpFilter,
    pointwise: np.ndarray,
) -> np.ndarray:
    """Continuous-filter convolution with MLP-parameterised weights:

    h(y) = pointwise^T sum_{x in N(y)} w_mlp(y - x) * f(x)

    (elementwise product over channels inside the sum)."""
    pw = np.asarray(pointwise, dtype=np.float64)
    f = cloud.features
    if filt.out_dim != f.shape[1]:
        raise ValueError(
            f"filter emits {filt.out_dim} channel weights, features have {f.shape[1]}"
        )
    if pw.ndim != 2 or pw.shape[0] != f.shape[1]:
        raise ValueError(f"pointwise must be ({f.shape[1]}, D), got {pw.shape}")
    w = mlp_eval(filt, neighbors.offsets)  # (P, D')
    pair_vals = w * f[neighbors.indices]
    m = np.zeros((neighbors.num_queries, f.shape[1]))
    counts = neighbors.counts
    valid = np.flatnonzero(counts > 0)
    if neighbors.num_pairs:
        m[valid] = np.add.reduceat(pair_vals, neighbors.starts[:-1][valid], axis=0)
    return m @ pw


class PccLayer(nn.Layer):
    """Trainable continuous-filter conv layer (MLP filter + pointwise)."""

    kind = "pcc"

    def __init__(self, radius: float, cap: int, filt: MlpFilter, pointwise, bias):
        self.radius = float(radius)
        self.cap = int(cap)
        self.mlp_params = [np.array(a, dtype=np.float64) for wb in filt.layers for a in wb]
        self.pointwise = np.array(pointwise, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        self.g_mlp = [np.zeros_like(a) for a in self.mlp_params]
        self.gp = np.zeros_like(self.pointwise)
        self.gb = np.zeros_like(self.bias)
        self._feats = None

    def _filter(self) -> MlpFilter:
        pairs = tuple(
            (self.mlp_params[2 * i], self.mlp_params[2 * i + 1])
            for i in range(len(self.mlp_params) // 2)
        )
        return MlpFilter(pairs)

    def params(self):
        return self.mlp_params + [self.pointwise, self.bias]

    def grads(self):
        return self.g_mlp + [self.gp, self.gb]

    def out_channels(self, in_channels: int) -> int:
        if in_channels != self.pointwise.shape[0]:
            raise ValueError(
                f"layer expects {self.pointwise.shape[0]} channels, got {in_channels}"
            )
        return self.pointwise.shape[1]

    def forward(self, feats, ctx):
        self._feats = feats
        table = ctx.table_for(self.radius, self.cap)
        filt = self._filter()
        w = mlp_eval(filt, table.offsets)
        pair_vals = w * feats[table.indices]
        m = np.zeros((table.num_queries, feats.shape[1]))
        counts = table.counts
        valid = np.flatnonzero(counts > 0)
        if table.num_pairs:
            m[valid] = np.add.reduceat(pair_vals, table.starts[:-1][valid], axis=0)
        self._m = m
        self._w = w
        return m @ self.pointwise + self.bias

    def backward(self, upstream, ctx):
        table = ctx.table_for(self.radius, self.cap)
        feats = self._feats
        self.gp += self._m.T @ upstream
        self.gb += upstream.sum(axis=0)
        grad_m = upstream @ self.pointwise.T  # (Q, D')
        counts = table.counts
        qid = np.repeat(np.arange(table.num_queries, dtype=np.int64), counts)
        gm_pairs = grad_m[qid]  # (P, D')
        fn = feats[table.indices]
        grad_f = np.zeros_like(feats)
        np.add.at(grad_f, table.indices, self._w * gm_pairs)
        filt = self._filter()
        acts = _mlp_tape(filt, table.offsets)
        for i, (gw, gb) in enumerate(_mlp_backward(filt, acts, fn * gm_pairs)):
            self.g_mlp[2 * i] += gw
            self.g_mlp[2 * i + 1] += gb
        return grad_f


@dataclass(frozen=True)
class VoxelGrid:
    """Dense voxelisation of a cloud: mean feature and count per cell.

    Cells are cubes of side ``pitch`` anchored at absolute multiples of
    the pitch (cell of a point = floor(position / pitch)), so the grid
    is fixed in space rather than attached to the cloud. ``origin`` is
    the world position of the corner of cell (0,0,0) of the stored
    array; empty cells hold zeros.
    """

    origin: np.ndarray  # (3,) float64
    pitch: float
    features: np.ndarray  # (nx, ny, nz, D')
    counts: np.ndarray  # (nx, ny, nz) int64

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64, copy=True).reshape(3)
        f = np.array(self.features, dtype=np.float64, copy=True)
        c = np.array(self.counts, dtype=np.int64, copy=True)
        if f.ndim != 4 or c.shape != f.shape[:3]:
            raise ValueError("features must be (nx,ny,nz,D') with matching counts")
        if not (self.pitch > 0 and np.isfinite(self.pitch)):
            raise ValueError("pitch must be positive and finite")
        o.setflags(write=False)
        f.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "counts", c)

    def cell_of(self, positions: np.ndarray) -> np.ndarray:
        return np.floor((positions - self.origin) / self.pitch).astype(np.int64)


def voxelize_extend(cloud: PointCloud, pitch: float, margin: int = 1) -> VoxelGrid:
    """Average the cloud's features into a world-anchored voxel grid.

    The stored array covers the occupied cell range plus ``margin``
    empty cells on every side (so slightly displaced clouds still fall
    inside the same grid).
    """
    if not (pitch > 0 and np.isfinite(pitch)):
        raise ValueError("pitch must be positive and finite")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    cells = np.floor(cloud.positions / pitch).astype(np.int64)
    cmin = cells.min(axis=0) - margin
    cmax = cells.max(axis=0) + margin
    dims = cmax - cmin + 1
    total = int(dims[0]) * int(dims[1]) * int(dims[2])
    if total > 100_000_000:
        raise ValueError(f"voxel grid would hold {total} cells; pitch too small")
    rel = cells - cmin
    flat = (rel[:, 0] * dims[1] + rel[:, 1]) * dims[2] + rel[:, 2]
    d = cloud.feature_dim
    sums = np.zeros((total, d))
    np.add.at(sums, flat, cloud.features)
    counts = np.bincount(flat, minlength=total).astype(np.int64)
    feats = np.zeros_like(sums)
    occupied = counts > 0
    feats[occupied] = sums[occupied] / counts[occupied, None]
    return VoxelGrid(
        origin=cmin.astype(np.float64) * pitch,
        pitch=float(pitch),
        features=feats.reshape(int(dims[0]), int(dims[1]), int(dims[2]), d),
        counts=counts.reshape(int(dims[0]), int(dims[1]), int(dims[2])),
    )


def restrict(grid: VoxelGrid, cloud: PointCloud) -> np.ndarray:
    """Read each point's cell value back from the grid: (M, D').

    A point whose cell lies outside the stored array is an error: the
    grid does not extend to it.
    """
    cells = grid.cell_of(cloud.positions)
    dims = np.array(grid.features.shape[:3], dtype=np.int64)
    bad = np.any((cells < 0) | (cells >= dims), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"point {i} at {cloud.positions[i].tolist()} falls outside the voxel grid"
        )
    return grid.features[cells[:, 0], cells[:, 1], cells[:, 2]]


class VoxelSmoothLayer(nn.Layer):
    """Voxelise-extend-restrict as a (parameter-free) layer.

    Every point receives the mean feature of its cell; the adjoint
    spreads each cell's incoming gradient uniformly back over the
    points of that cell.
    """

    kind = "voxel"

    def __init__(self, pitch: float):
        if not (pitch > 0 and np.isfinite(pitch)):
            raise ValueError("pitch must be positive and finite")
        self.pitch = float(pitch)
        self._inv = None
        self._counts = None

    def forward(self, feats, ctx):
        cells = np.floor(ctx.cloud.positions / self.pitch).astype(np.int64)
        _, inv = np.unique(cells, axis=0, return_inverse=True)
        counts = np.bincount(inv).astype(np.float64)
        sums = np.zeros((counts.shape[0], feats.shape[1]))
        np.add.at(sums, inv, feats)
        self._inv, self._counts = inv, counts
        return sums[inv] / counts[inv, None]

    def backward(self, upstream, ctx):
        inv, counts = self._inv, self._counts
        sums = np.zeros((counts.shape[0], upstream.shape[1]))
        np.add.at(sums, inv, upstream)
        return sums[inv] / counts[inv, None]


@dataclass(frozen=True)
class SubvoxelReport:
    """Output deltas after a within-cell displacement of one point."""

    voxel_path_diff: float
    deform_path_diff: float


def subvoxel_discrimination(pitch: float, displacement: float, seed: int) -> SubvoxelReport:
    """Move one point inside its voxel; measure what each method notices.

    Builds a random cloud, picks a point that can move +x by
    ``displacement`` without leaving its cell, and compares outputs on
    the original and displaced clouds:

      * voxel path: voxelise at ``pitch`` then restrict (diff is 0, the
        cell contents never change),
      * deformable path: random filter with anchor spacing = pitch
        (diff is nonzero, the offsets moved).

    Raises if the displacement cannot avoid a boundary crossing.
    """
    if not (pitch > 0 and np.isfinite(pitch)):
        raise ValueError("pitch must be positive and finite")
    if displacement < 0 or displacement >= pitch:
        raise ValueError("displacement must lie in [0, pitch)")
    rng = DetRng(seed)
    m, d = 64, 2
    # Domain scales with pitch so points land within each other's filter
    # support (per-axis reach 2 * pitch for the k=3 grid below); a sparse
    # cloud would let the deformable path miss the displacement entirely.
    half = 2.0 * pitch
    pos = rng.uniforms(3 * m, -half, half).reshape(m, 3)
    feats = rng.uniforms(m * d, -1.0, 1.0).reshape(m, d)
    base = PointCloud(pos, feats)

    # headroom to the +x face of each point's cell
    room = pitch - (pos[:, 0] - pitch * np.floor(pos[:, 0] / pitch))
    target = int(np.argmax(room))
    if displacement >= room[target]:
        raise ValueError(
            f"displacement {displacement} crosses a cell boundary for every point"
        )
    moved_pos = pos.copy()
    moved_pos[target, 0] += displacement
    moved = PointCloud(moved_pos, feats)

    grid_a = voxelize_extend(base, pitch)
    grid_b = voxelize_extend(moved, pitch)
    vox_a = restrict(grid_a, base)
    vox_b = restrict(grid_b, moved)
    voxel_diff = float(np.max(np.abs(vox_a - vox_b))) if vox_a.size else 0.0

    grid = conv.grid_from_spacing(3, pitch)
    radius = conv.default_radius(grid)
    weights = rng.normals(grid.num_anchors * d * d).reshape(grid.num_anchors, d, d)
    filt = conv.DeformableFilter(grid, weights)
    out = []
    for cl in (base, moved):
        table = radius_neighbors(build_index(cl.positions, radius), cl.positions, radius, 16)
        out.append(conv.forward(cl, table, filt))
    deform_diff = float(np.max(np.abs(out[0] - out[1])))
    return SubvoxelReport(voxel_path_diff=voxel_diff, deform_path_diff=deform_diff)
