"""Deformable filter convolution over 3D point neighbourhoods.

A filter stores one weight matrix per node of a small k x k x k lattice
(the anchor grid). Evaluating the filter at an arbitrary continuous
offset "deforms" it: the weight there is the trilinear blend of the
(at most eight) surrounding anchor matrices. Convolving a point cloud
then sums deformed-filter responses over each query point's metric
neighbourhood:

    h(y) = sum_{x in N(y)} ghat(y - x)^T f(x) + bias,
    ghat(z) = sum_{anchors p} w(z, p) * g(p),

with w the product of per-axis hat functions of width equal to the
anchor spacing. Because the offsets y - x move continuously with the
points, the operator responds to sub-cell displacements that any fixed
voxelisation rounds away, while remaining exactly translation and
permutation equivariant.

Two implementations are kept side by side:

  * forward / backward: the production path. Only the <= 8 anchors that
    enclose each offset are touched.
  * oracle_forward: a deliberately naive full scan over all k^3 anchors
    for every pair. It exists to cross-check the fast path and is used
    by tests and the benchmark command.

All arithmetic is float64. Summation over a neighbourhood follows the
stored pair order, so repeated runs are bit-identical.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud
from .spatial import NeighborTable


def _freeze(obj, name: str, arr: np.ndarray) -> None:
    arr.setflags(write=False)
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True)
class AnchorGrid:
    """Cubic lattice of k^3 anchor positions centred on the origin.

    Anchors sit at (i, j, l) * unit for integer i, j, l in
    [-(k-1)/2, (k-1)/2]; k must be odd so the centre anchor is the
    origin itself. ``unit`` is the per-axis anchor spacing in meters and
    doubles as the hat-function width, so neighbouring anchors blend
    seamlessly (their hats sum to one between them).

    Linear anchor index convention, used for every (k^3, ...) weight
    array in this module:

        index(i, j, l) = ((i + h) * k + (j + h)) * k + (l + h),
        h = (k - 1) // 2        (l varies fastest)
    """

    k: int
    unit: np.ndarray  # (3,) float64, > 0

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be odd and >= 1, got {self.k}")
        u = np.array(self.unit, dtype=np.float64, copy=True).reshape(3)
        if not np.all(np.isfinite(u)) or np.any(u <= 0):
            raise ValueError("unit spacings must be positive and finite")
        _freeze(self, "unit", u)

    @property
    def half(self) -> int:
        return (self.k - 1) // 2

    @property
    def num_anchors(self) -> int:
        return self.k ** 3

    def anchor_index(self, i: int, j: int, l: int) -> int:
        h = self.half
        if max(abs(i), abs(j), abs(l)) > h:
            raise ValueError(f"anchor ({i},{j},{l}) outside lattice of half-width {h}")
        return ((i + h) * self.k + (j + h)) * self.k + (l + h)

    def anchor_positions(self) -> np.ndarray:
        """(k^3, 3) anchor coordinates, rows in linear-index order."""
        h = self.half
        rng = np.arange(-h, h + 1, dtype=np.float64)
        ii, jj, ll = np.meshgrid(rng, rng, rng, indexing="ij")
        lattice = np.stack([ii.ravel(), jj.ravel(), ll.ravel()], axis=1)
        return lattice * self.unit

    def support_radius(self) -> float:
        """Distance beyond which every deformed weight is exactly zero.

        A hat centred on the outermost anchor (h * unit per axis) dies
        at (h + 1) * unit, so offsets past the corner reach
        ||(h + 1) * unit|| contribute nothing.
        """
        reach = (self.half + 1) * self.unit
        return float(np.sqrt(reach[0] ** 2 + reach[1] ** 2 + reach[2] ** 2))


def grid_from_spacing(k: int, spacing) -> AnchorGrid:
    """AnchorGrid from a scalar or per-axis spacing."""
    u = np.asarray(spacing, dtype=np.float64)
    if u.ndim == 0:
        u = np.full(3, float(u))
    return AnchorGrid(k=k, unit=u)


@dataclass(frozen=True)
class DeformableFilter:
    """Full filter: one (in_dim, out_dim) weight matrix per anchor."""

    grid: AnchorGrid
    weights: np.ndarray  # (k^3, in_dim, out_dim)
    bias: np.ndarray | None = None  # (out_dim,)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 3 or w.shape[0] != self.grid.num_anchors:
            raise ValueError(
                f"weights must be ({self.grid.num_anchors}, in, out), got {w.shape}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain non-finite values")
        _freeze(self, "weights", w)
        if self.bias is not None:
            b = np.array(self.bias, dtype=np.float64, copy=True).reshape(-1)
            if b.shape[0] != w.shape[2]:
                raise ValueError(f"bias must be ({w.shape[2]},), got {b.shape}")
            if not np.all(np.isfinite(b)):
                raise ValueError("bias contains non-finite values")
            _freeze(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class SeparableFilter:
    """Factorised filter: per-anchor per-channel spatial weights plus a
    shared pointwise channel map. Equivalent to a DeformableFilter whose
    anchor matrices are rank-one per channel:
    weights[p, c, d] = spatial[p, c] * pointwise[c, d]."""

    grid: AnchorGrid
    spatial: np.ndarray  # (k^3, in_dim)
    pointwise: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray | None = None  # (out_dim,)

    def __post_init__(self):
        s = np.array(self.spatial, dtype=np.float64, copy=True)
        if s.ndim != 2 or s.shape[0] != self.grid.num_anchors:
            raise ValueError(
                f"spatial must be ({self.grid.num_anchors}, in), got {s.shape}"
            )
        p = np.array(self.pointwise, dtype=np.float64, copy=True)
        if p.ndim != 2 or p.shape[0] != s.shape[1]:
            raise ValueError(f"pointwise must be ({s.shape[1]}, out), got {p.shape}")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(p))):
            raise ValueError("filter parameters contain non-finite values")
        _freeze(self, "spatial", s)
        _freeze(self, "pointwise", p)
        if self.bias is not None:
            b = np.array(self.bias, dtype=np.float64, copy=True).reshape(-1)
            if b.shape[0] != p.shape[1]:
                raise ValueError(f"bias must be ({p.shape[1]},), got {b.shape}")
            if not np.all(np.isfinite(b)):
                raise ValueError("bias contains non-finite values")
            _freeze(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.spatial.shape[1]

    @property
    def out_dim(self) -> int:
        return self.pointwise.shape[1]


@dataclass(frozen=True)
class ConvLayerSpec:
    """Geometry of one convolution: anchor grid, search radius, cap.

    The radius must cover the grid's support radius, otherwise points
    the filter could still see would be cut off by the search. The
    density-normalisation exponent is pinned to 1 (plain sum over the
    neighbourhood); it is recorded here as a named constant rather than
    a tunable.
    """

    DENSITY_NORMALISATION = 1.0

    grid: AnchorGrid
    radius: float
    cap: int

    def __post_init__(self):
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise ValueError("radius must be positive and finite")
        support = self.grid.support_radius()
        if self.radius < support:
            raise ValueError(
                f"radius {self.radius} smaller than filter support {support}"
            )
        if self.cap < 1:
            raise ValueError("cap must be >= 1")


def default_radius(grid: AnchorGrid) -> float:
    """Smallest search radius that keeps the whole filter support."""
    return grid.support_radius()


def trilinear_weight(offset, anchor, unit) -> float:
    """Interpolation weight between one offset and one anchor.

    Product over the three axes of the hat function
    max(1 - |offset_d - anchor_d| / unit_d, 0). Equals 1 exactly at the
    anchor, 0 at and beyond one spacing away per axis. Over any offset,
    the weights of all anchors of an enclosing lattice cell sum to 1.
    """
    o = np.asarray(offset, dtype=np.float64).reshape(3)
    a = np.asarray(anchor, dtype=np.float64).reshape(3)
    u = np.asarray(unit, dtype=np.float64).reshape(3)
    w = 1.0
    for d in range(3):
        w *= max(1.0 - abs(o[d] - a[d]) / u[d], 0.0)
    return w


def _hat_all(offsets: np.ndarray, grid: AnchorGrid) -> np.ndarray:
    """(N, k^3) trilinear weights of every offset against every anchor."""
    anchors = grid.anchor_positions()
    t = 1.0 - np.abs(offsets[:, None, :] - anchors[None, :, :]) / grid.unit
    np.maximum(t, 0.0, out=t)
    return t[:, :, 0] * t[:, :, 1] * t[:, :, 2]


def enclosing_anchors(z, grid: AnchorGrid) -> list[tuple[int, float]]:
    """The anchors with nonzero trilinear weight at offset z.

    Returns (linear index, weight) pairs in ascending index order; at
    most 8 (fewer near the lattice boundary, none once z is a full
    spacing outside the lattice hull on some axis). Weights match
    trilinear_weight exactly.
    """
    zz = np.asarray(z, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(zz)):
        raise ValueError("offset contains non-finite values")
    h = grid.half
    per_axis: list[list[tuple[int, float]]] = []
    for d in range(3):
        u = float(grid.unit[d])
        base = int(np.floor(zz[d] / u))
        axis = []
        for i in range(base - 1, base + 3):
            if -h <= i <= h:
                w = max(1.0 - abs(zz[d] - i * u) / u, 0.0)
                if w > 0.0:
                    axis.append((i, w))
        per_axis.append(axis)
    out = []
    for i, wi in per_axis[0]:
        for j, wj in per_axis[1]:
            for l, wl in per_axis[2]:
                out.append((grid.anchor_index(i, j, l), wi * wj * wl))
    return out


def interpolate_filter(z, filt: DeformableFilter) -> np.ndarray:
    """Deformed weight matrix ghat(z): (in_dim, out_dim)."""
    out = np.zeros((filt.in_dim, filt.out_dim))
    for idx, w in enclosing_anchors(z, filt.grid):
        out += w * filt.weights[idx]
    return out


def _corner_gather(offsets: np.ndarray, grid: AnchorGrid) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised enclosing-anchor lookup for a batch of offsets.

    Returns (ids, w), both (P, 8): the linear anchor index and trilinear
    weight of each of the 8 lattice corners around each offset, corners
    ordered by ascending (i, j, l). Corners outside the lattice carry
    weight exactly 0 (their id is clamped into range so it is safe to
    gather with). Per-axis weights use the same formula as
    trilinear_weight, so nonzero weights agree with it bit-for-bit.
    """
    p = offsets.shape[0]
    u = grid.unit
    h = grid.half
    k = grid.k
    base = np.floor(offsets / u).astype(np.int64)  # (P,3) lower lattice corner
    # per axis: hat weight and validity of the lower/upper lattice plane
    axis_w = np.empty((2, p, 3))
    axis_idx = np.empty((2, p, 3), dtype=np.int64)
    for side in range(2):
        corner = base + side
        inside = (corner >= -h) & (corner <= h)
        safe = np.where(inside, corner, 0)
        wd = 1.0 - np.abs(offsets - safe * u) / u
        np.maximum(wd, 0.0, out=wd)
        wd[~inside] = 0.0
        axis_w[side] = wd
        axis_idx[side] = safe
    ids = np.empty((p, 8), dtype=np.int64)
    w = np.empty((p, 8), dtype=np.float64)
    for c in range(8):
        b0, b1, b2 = (c >> 2) & 1, (c >> 1) & 1, c & 1
        w[:, c] = axis_w[b0, :, 0] * axis_w[b1, :, 1] * axis_w[b2, :, 2]
        ids[:, c] = (
            (axis_idx[b0, :, 0] + h) * k + (axis_idx[b1, :, 1] + h)
        ) * k + (axis_idx[b2, :, 2] + h)
    return ids, w


def _anchor_sums(
    features: np.ndarray,
    nbr: np.ndarray,
    ids: np.ndarray,
    w: np.ndarray,
    counts: np.ndarray,
    num_anchors: int,
) -> np.ndarray:
    """Weighted per-(query, anchor) feature sums for one query block:

        S[q, a, i] = sum over pairs of q and corners hitting anchor a of
                     trilinear weight * f_i(neighbour)

    Built with bincount per channel, which accumulates in ascending
    (pair, corner) order, i.e. ascending query, then stored neighbour
    order; bit-identical across runs. Everything the forward pass and
    the weight gradient need reduces to contractions of S.
    """
    p = nbr.shape[0]
    d_in = features.shape[1]
    q = counts.shape[0]
    qid_local = np.repeat(np.arange(q, dtype=np.int64), counts)
    keys = (qid_local[:, None] * num_anchors + ids).ravel()
    fn = features[nbr]  # (P, in)
    vals = w[:, :, None] * fn[:, None, :]  # (P, 8, in)
    flat = vals.reshape(p * 8, d_in)
    total = q * num_anchors
    s = np.empty((total, d_in))
    for i in range(d_in):
        s[:, i] = np.bincount(keys, weights=flat[:, i], minlength=total)
    return s.reshape(q, num_anchors, d_in)


def _query_blocks(starts: np.ndarray, pair_budget: int):
    """Split queries into consecutive blocks of at most pair_budget pairs
    (a block always holds at least one query)."""
    q = starts.shape[0] - 1
    q0 = 0
    while q0 < q:
        q1 = int(np.searchsorted(starts, starts[q0] + pair_budget, side="left"))
        q1 = max(q1, q0 + 1)
        q1 = min(q1, q)
        yield q0, q1
        q0 = q1


def _check_forward_args(features: np.ndarray, neighbors: NeighborTable, in_dim: int):
    if features.ndim != 2:
        raise ValueError(f"features must be (M, D'), got {features.shape}")
    if features.shape[1] != in_dim:
        raise ValueError(
            f"filter expects {in_dim} input channels, features have {features.shape[1]}"
        )
    if neighbors.num_pairs and int(neighbors.indices.max()) >= features.shape[0]:
        raise ValueError("neighbor table refers to points beyond the feature rows")


def forward_features(
    features: np.ndarray,
    neighbors: NeighborTable,
    filt: DeformableFilter,
    threads: int = 1,
) -> np.ndarray:
    """Fast-path convolution on a raw feature matrix.

    Per query block: gather the <= 8 enclosing anchors of every pair,
    accumulate the per-(query, anchor) weighted feature sums S, then
    contract against the anchor weight matrices in one tensordot:
    h[q] = sum_{a,i} S[q, a, i] * weights[a, i, :] (+ bias).
    """
    features = np.asarray(features, dtype=np.float64)
    _check_forward_args(features, neighbors, filt.in_dim)
    q = neighbors.num_queries
    out = np.zeros((q, filt.out_dim))
    starts = neighbors.starts
    all_counts = np.diff(starts)
    d_in = filt.in_dim
    budget = max(512, 4_000_000 // max(1, filt.grid.num_anchors * d_in))

    def run_block(block):
        q0, q1 = block
        p0, p1 = int(starts[q0]), int(starts[q1])
        if p0 == p1:
            return
        offs = neighbors.offsets[p0:p1]
        nbr = neighbors.indices[p0:p1]
        ids, w = _corner_gather(offs, filt.grid)
        s = _anchor_sums(features, nbr, ids, w, all_counts[q0:q1], filt.grid.num_anchors)
        out[q0:q1] = np.tensordot(s, filt.weights, axes=([1, 2], [0, 1]))

    blocks = list(_query_blocks(starts, budget))
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_block, blocks))
    else:
        for block in blocks:
            run_block(block)
    if filt.bias is not None:
        out += filt.bias
    return out


def forward(
    cloud: PointCloud,
    neighbors: NeighborTable,
    filt: DeformableFilter,
    threads: int = 1,
) -> np.ndarray:
    """Convolve a cloud's features; one output row per query."""
    return forward_features(cloud.features, neighbors, filt, threads=threads)


def oracle_forward_features(
    features: np.ndarray, neighbors: NeighborTable, filt: DeformableFilter
) -> np.ndarray:
    """Reference convolution: full scan over all k^3 anchors per pair.

    No enclosing-cell shortcut and no shared segment machinery with the
    fast path; kept simple on purpose so it can arbitrate.
    """
    features = np.asarray(features, dtype=np.float64)
    _check_forward_args(features, neighbors, filt.in_dim)
    out = np.zeros((neighbors.num_queries, filt.out_dim))
    for i in range(neighbors.num_queries):
        idx, offs = neighbors.neighbors_of(i)
        if idx.shape[0] == 0:
            continue
        hats = _hat_all(offs, filt.grid)  # (n, k^3)
        deformed = np.tensordot(hats, filt.weights, axes=(1, 0))  # (n, in, out)
        out[i] = np.einsum("nio,ni->o", deformed, features[idx])
    if filt.bias is not None:
        out += filt.bias
    return out


def oracle_forward(
    cloud: PointCloud, neighbors: NeighborTable, filt: DeformableFilter
) -> np.ndarray:
    return oracle_forward_features(cloud.features, neighbors, filt)


def backward_features(
    features: np.ndarray,
    neighbors: NeighborTable,
    filt: DeformableFilter,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(upstream * forward) w.r.t. features, weights, bias.

    grad_features[x] collects ghat(y - x) @ upstream[y] over every query
    y that saw x; grad_weights[p] collects w(pair, p) * f(x) outer
    upstream[y]; grad_bias is the column sum of upstream. Accumulation
    runs in ascending query order, then stored neighbour order, then
    corner order, so repeated runs are bit-identical.
    """
    features = np.asarray(features, dtype=np.float64)
    _check_forward_args(features, neighbors, filt.in_dim)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (neighbors.num_queries, filt.out_dim):
        raise ValueError(
            f"upstream must be ({neighbors.num_queries}, {filt.out_dim}), got {up.shape}"
        )
    d_in = filt.in_dim
    num_anchors = filt.grid.num_anchors
    grad_f = np.zeros_like(features)
    grad_w = np.zeros_like(filt.weights)
    grad_b = up.sum(axis=0)
    starts = neighbors.starts
    counts = np.diff(starts)
    m = features.shape[0]
    budget = max(512, 4_000_000 // max(1, num_anchors * d_in))
    for q0, q1 in _query_blocks(starts, budget):
        p0, p1 = int(starts[q0]), int(starts[q1])
        if p0 == p1:
            continue
        offs = neighbors.offsets[p0:p1]
        nbr = neighbors.indices[p0:p1]
        ids, w = _corner_gather(offs, filt.grid)
        blk_counts = counts[q0:q1]
        s = _anchor_sums(features, nbr, ids, w, blk_counts, num_anchors)
        up_blk = up[q0:q1]
        # dL/dW[a,i,o] = sum_q S[q,a,i] * up[q,o]
        grad_w += np.tensordot(s, up_blk, axes=(0, 0))
        # dL/df(x)_i = sum over pairs seeing x of ghat(y-x)[i,:] . up[y]
        u = np.einsum("aio,qo->qai", filt.weights, up_blk)  # (q, A, in)
        qid_local = np.repeat(
            np.arange(q1 - q0, dtype=np.int64), blk_counts
        )
        gather = u.reshape(-1, d_in)[(qid_local[:, None] * num_anchors + ids).ravel()]
        pair_gf = (w.reshape(-1)[:, None] * gather).reshape(-1, 8, d_in).sum(axis=1)
        for i in range(d_in):
            grad_f[:, i] += np.bincount(nbr, weights=pair_gf[:, i], minlength=m)
    return grad_f, grad_w, grad_b


def backward(
    cloud: PointCloud,
    neighbors: NeighborTable,
    filt: DeformableFilter,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return backward_features(cloud.features, neighbors, filt, upstream)


def _spatial_aggregate(
    features: np.ndarray, neighbors: NeighborTable, sf: SeparableFilter
) -> np.ndarray:
    """Per-channel spatial stage of the separable form:
    m[y, c] = sum_{x in N(y)} ghat1_c(y - x) * f_c(x)."""
    q = neighbors.num_queries
    m = np.zeros((q, sf.in_dim))
    starts = neighbors.starts
    all_counts = np.diff(starts)
    num_anchors = sf.grid.num_anchors
    budget = max(512, 4_000_000 // max(1, num_anchors * sf.in_dim))
    for q0, q1 in _query_blocks(starts, budget):
        p0, p1 = int(starts[q0]), int(starts[q1])
        if p0 == p1:
            continue
        offs = neighbors.offsets[p0:p1]
        nbr = neighbors.indices[p0:p1]
        ids, w = _corner_gather(offs, sf.grid)
        s = _anchor_sums(features, nbr, ids, w, all_counts[q0:q1], num_anchors)
        m[q0:q1] = np.einsum("qai,ai->qi", s, sf.spatial)
    return m


def forward_separable_features(
    features: np.ndarray, neighbors: NeighborTable, sf: SeparableFilter
) -> np.ndarray:
    """Separable convolution: spatial aggregation, then pointwise map."""
    features = np.asarray(features, dtype=np.float64)
    _check_forward_args(features, neighbors, sf.in_dim)
    m = _spatial_aggregate(features, neighbors, sf)
    out = m @ sf.pointwise
    if sf.bias is not None:
        out += sf.bias
    return out


def forward_separable(
    cloud: PointCloud, neighbors: NeighborTable, sf: SeparableFilter
) -> np.ndarray:
    return forward_separable_features(cloud.features, neighbors, sf)


def backward_separable_features(
    features: np.ndarray,
    neighbors: NeighborTable,
    sf: SeparableFilter,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients for the separable form: (features, spatial, pointwise, bias)."""
    features = np.asarray(features, dtype=np.float64)
    _check_forward_args(features, neighbors, sf.in_dim)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (neighbors.num_queries, sf.out_dim):
        raise ValueError(
            f"upstream must be ({neighbors.num_queries}, {sf.out_dim}), got {up.shape}"
        )
    m = _spatial_aggregate(features, neighbors, sf)
    grad_pointwise = m.T @ up
    grad_b = up.sum(axis=0)
    grad_m = up @ sf.pointwise.T  # (q, in)
    grad_f = np.zeros_like(features)
    grad_s = np.zeros_like(sf.spatial)
    starts = neighbors.starts
    counts = np.diff(starts)
    num_anchors = sf.grid.num_anchors
    d_in = sf.in_dim
    n_pts = features.shape[0]
    budget = max(512, 4_000_000 // max(1, num_anchors * d_in))
    for q0, q1 in _query_blocks(starts, budget):
        p0, p1 = int(starts[q0]), int(starts[q1])
        if p0 == p1:
            continue
        offs = neighbors.offsets[p0:p1]
        nbr = neighbors.indices[p0:p1]
        blk_counts = counts[q0:q1]
        ids, w = _corner_gather(offs, sf.grid)
        s = _anchor_sums(features, nbr, ids, w, blk_counts, num_anchors)
        gm_blk = grad_m[q0:q1]
        # dL/dspatial[a,i] = sum_q S[q,a,i] * grad_m[q,i]
        grad_s += np.einsum("qai,qi->ai", s, gm_blk)
        qid_local = np.repeat(np.arange(q1 - q0, dtype=np.int64), blk_counts)
        # ghat1 of each pair, then chain through grad_m
        gsp = (w[:, :, None] * sf.spatial[ids]).sum(axis=1)  # (p, in)
        pair_gf = gsp * gm_blk[qid_local]
        for i in range(d_in):
            grad_f[:, i] += np.bincount(nbr, weights=pair_gf[:, i], minlength=n_pts)
    return grad_f, grad_s, grad_pointwise, grad_b


def backward_separable(
    cloud: PointCloud,
    neighbors: NeighborTable,
    sf: SeparableFilter,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return backward_separable_features(cloud.features, neighbors, sf, upstream)
