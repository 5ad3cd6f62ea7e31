"""Small network toolkit for point clouds: layers, loss, Adam, metrics.

Everything here is plain numpy with hand-written backward passes. A
LayerStack processes one cloud at a time (clouds vary in size); training
iterates clouds in a seeded random order and steps Adam every
``batch_size`` clouds with the accumulated gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import conv
from .conv import ConvLayerSpec, DeformableFilter, SeparableFilter
from .pointcloud import CLASSIFICATION, SEGMENTATION, Dataset, PointCloud
from .rng import DetRng
from .spatial import NeighborTable, build_index, radius_neighbors


class LayerContext:
    """Per-cloud state shared by the layers of one forward/backward pass.

    Caches neighbour tables keyed by (radius, cap) so several conv
    layers with the same geometry share one search, and so a table can
    be reused across epochs when the context is kept around.
    """

    def __init__(self, cloud: PointCloud, threads: int = 1):
        self.cloud = cloud
        self.threads = threads
        self._tables: dict[tuple[float, int], NeighborTable] = {}

    def preset(self, table: NeighborTable) -> "LayerContext":
        self._tables[(table.radius, table.cap)] = table
        return self

    def table_for(self, radius: float, cap: int) -> NeighborTable:
        key = (radius, cap)
        if key not in self._tables:
            index = build_index(self.cloud.positions, radius)
            self._tables[key] = radius_neighbors(
                index, self.cloud.positions, radius, cap
            )
        return self._tables[key]


class Layer:
    """Base layer: forward/backward plus flat parameter access."""

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def zero_grads(self) -> None:
        for g in self.grads():
            g[...] = 0.0

    def out_channels(self, in_channels: int) -> int:
        return in_channels

    def forward(self, feats: np.ndarray, ctx: LayerContext) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray, ctx: LayerContext) -> np.ndarray:
        raise NotImplementedError


class DeformConvLayer(Layer):
    kind = "deformable"

    def __init__(self, spec: ConvLayerSpec, weights: np.ndarray, bias: np.ndarray):
        self.spec = spec
        self.weights = np.array(weights, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        self.gw = np.zeros_like(self.weights)
        self.gb = np.zeros_like(self.bias)
        self._feats: np.ndarray | None = None

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.gw, self.gb]

    def out_channels(self, in_channels: int) -> int:
        if in_channels != self.weights.shape[1]:
            raise ValueError(
                f"layer expects {self.weights.shape[1]} channels, got {in_channels}"
            )
        return self.weights.shape[2]

    def _filter(self) -> DeformableFilter:
        return DeformableFilter(self.spec.grid, self.weights, self.bias)

    def forward(self, feats, ctx):
        self._feats = feats
        table = ctx.table_for(self.spec.radius, self.spec.cap)
        return conv.forward_features(feats, table, self._filter(), threads=ctx.threads)

    def backward(self, upstream, ctx):
        table = ctx.table_for(self.spec.radius, self.spec.cap)
        gf, gw, gb = conv.backward_features(self._feats, table, self._filter(), upstream)
        self.gw += gw
        self.gb += gb
        return gf


class SeparableConvLayer(Layer):
    kind = "separable"

    def __init__(
        self,
        spec: ConvLayerSpec,
        spatial: np.ndarray,
        pointwise: np.ndarray,
        bias: np.ndarray,
    ):
        self.spec = spec
        self.spatial = np.array(spatial, dtype=np.float64)
        self.pointwise = np.array(pointwise, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        self.gs = np.zeros_like(self.spatial)
        self.gp = np.zeros_like(self.pointwise)
        self.gb = np.zeros_like(self.bias)
        self._feats: np.ndarray | None = None

    def params(self):
        return [self.spatial, self.pointwise, self.bias]

    def grads(self):
        return [self.gs, self.gp, self.gb]

    def out_channels(self, in_channels: int) -> int:
        if in_channels != self.spatial.shape[1]:
            raise ValueError(
                f"layer expects {self.spatial.shape[1]} channels, got {in_channels}"
            )
        return self.pointwise.shape[1]

    def _filter(self) -> SeparableFilter:
        return SeparableFilter(self.spec.grid, self.spatial, self.pointwise, self.bias)

    def forward(self, feats, ctx):
        self._feats = feats
        table = ctx.table_for(self.spec.radius, self.spec.cap)
        return conv.forward_separable_features(feats, table, self._filter())

    def backward(self, upstream, ctx):
        table = ctx.table_for(self.spec.radius, self.spec.cap)
        gf, gs, gp, gb = conv.backward_separable_features(
            self._feats, table, self._filter(), upstream
        )
        self.gs += gs
        self.gp += gp
        self.gb += gb
        return gf


class LinearLayer(Layer):
    kind = "linear"

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.array(weights, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        self.gw = np.zeros_like(self.weights)
        self.gb = np.zeros_like(self.bias)
        self._feats: np.ndarray | None = None

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.gw, self.gb]

    def out_channels(self, in_channels: int) -> int:
        if in_channels != self.weights.shape[0]:
            raise ValueError(
                f"layer expects {self.weights.shape[0]} channels, got {in_channels}"
            )
        return self.weights.shape[1]

    def forward(self, feats, ctx):
        self._feats = feats
        return feats @ self.weights + self.bias

    def backward(self, upstream, ctx):
        self.gw += self._feats.T @ upstream
        self.gb += upstream.sum(axis=0)
        return upstream @ self.weights.T


class ReluLayer(Layer):
    kind = "relu"

    def __init__(self):
        self._mask: np.ndarray | None = None

    def forward(self, feats, ctx):
        self._mask = feats > 0
        return np.where(self._mask, feats, 0.0)

    def backward(self, upstream, ctx):
        return np.where(self._mask, upstream, 0.0)


class GlobalMaxPoolLayer(Layer):
    """(M, C) -> (1, C) channel-wise max; classification heads only."""

    kind = "pool"

    def __init__(self):
        self._argmax: np.ndarray | None = None
        self._rows: int = 0

    def forward(self, feats, ctx):
        # first occurrence wins on ties, which keeps backward deterministic
        self._argmax = np.argmax(feats, axis=0)
        self._rows = feats.shape[0]
        return feats[self._argmax, np.arange(feats.shape[1])][None, :]

    def backward(self, upstream, ctx):
        grad = np.zeros((self._rows, upstream.shape[1]))
        grad[self._argmax, np.arange(upstream.shape[1])] = upstream[0]
        return grad


class ComposeLayer(Layer):
    """Several layers applied in order, presented as one."""

    kind = "compose"

    def __init__(self, inner: list[Layer]):
        self.inner = inner

    def params(self):
        return [p for l in self.inner for p in l.params()]

    def grads(self):
        return [g for l in self.inner for g in l.grads()]

    def out_channels(self, in_channels: int) -> int:
        c = in_channels
        for l in self.inner:
            c = l.out_channels(c)
        return c

    def forward(self, feats, ctx):
        for l in self.inner:
            feats = l.forward(feats, ctx)
        return feats

    def backward(self, upstream, ctx):
        for l in reversed(self.inner):
            upstream = l.backward(upstream, ctx)
        return upstream


class ConcatSkipLayer(Layer):
    """Wraps another layer; output is [input channels | wrapped output]."""

    kind = "skip"

    def __init__(self, inner: Layer):
        self.inner = inner
        self._in_channels: int = 0

    def params(self):
        return self.inner.params()

    def grads(self):
        return self.inner.grads()

    def out_channels(self, in_channels: int) -> int:
        return in_channels + self.inner.out_channels(in_channels)

    def forward(self, feats, ctx):
        self._in_channels = feats.shape[1]
        return np.concatenate([feats, self.inner.forward(feats, ctx)], axis=1)

    def backward(self, upstream, ctx):
        split = self._in_channels
        return upstream[:, :split] + self.inner.backward(upstream[:, split:], ctx)


class LayerStack:
    """Ordered layers mapping a cloud's features to logits.

    Segmentation stacks emit one row per point; classification stacks
    contain exactly one global max pool and emit a single row.
    """

    def __init__(self, layers: list[Layer], task: str):
        if task not in (CLASSIFICATION, SEGMENTATION):
            raise ValueError(f"unknown task {task!r}")
        pools = sum(1 for l in _flatten(layers) if isinstance(l, GlobalMaxPoolLayer))
        if task == CLASSIFICATION and pools != 1:
            raise ValueError("classification stacks need exactly one global pool")
        if task == SEGMENTATION and pools != 0:
            raise ValueError("segmentation stacks cannot contain a global pool")
        self.layers = layers
        self.task = task

    def parameters(self) -> list[np.ndarray]:
        return [p for l in self.layers for p in l.params()]

    def gradients(self) -> list[np.ndarray]:
        return [g for l in self.layers for g in l.grads()]

    def zero_grads(self) -> None:
        for l in self.layers:
            l.zero_grads()

    def check_channels(self, in_channels: int) -> int:
        c = in_channels
        for l in self.layers:
            c = l.out_channels(c)
        return c

    def forward(self, cloud: PointCloud, ctx: LayerContext) -> np.ndarray:
        feats = cloud.features
        for l in self.layers:
            feats = l.forward(feats, ctx)
        return feats

    def backward(self, upstream: np.ndarray, ctx: LayerContext) -> np.ndarray:
        grad = upstream
        for l in reversed(self.layers):
            grad = l.backward(grad, ctx)
        return grad


def _flatten(layers: list[Layer]):
    for l in layers:
        yield l
        if isinstance(l, ConcatSkipLayer):
            yield from _flatten([l.inner])
        elif isinstance(l, ComposeLayer):
            yield from _flatten(l.inner)


def spec_param_shapes(spec: dict) -> list[tuple[int, ...]]:
    """Parameter array shapes of one layer-spec dict, in storage order."""
    kind = spec["type"]
    if kind == "deformable":
        k3 = spec["k"] ** 3
        return [(k3, spec["in"], spec["out"]), (spec["out"],)]
    if kind == "separable":
        k3 = spec["k"] ** 3
        return [(k3, spec["in"]), (spec["in"], spec["out"]), (spec["out"],)]
    if kind == "linear":
        return [(spec["in"], spec["out"]), (spec["out"],)]
    if kind in ("relu", "pool"):
        return []
    raise ValueError(f"unknown layer type {kind!r}")


def spec_param_count(specs: list[dict]) -> int:
    return sum(
        int(np.prod(shape)) for s in specs for shape in spec_param_shapes(s)
    )


def _conv_spec(spec: dict) -> ConvLayerSpec:
    grid = conv.grid_from_spacing(spec["k"], spec["a"])
    radius = spec["r"] if spec.get("r") is not None else conv.default_radius(grid)
    return ConvLayerSpec(grid=grid, radius=float(radius), cap=spec["cap"])


def _init_params(spec: dict, rng: DetRng) -> list[np.ndarray]:
    """Seeded parameter init; scaled so unit-variance inputs stay near
    unit variance through a capped neighbourhood sum plus ReLU."""
    kind = spec["type"]
    if kind == "deformable":
        k3, d_in, d_out = spec["k"] ** 3, spec["in"], spec["out"]
        scale = np.sqrt(2.0 / (d_in * spec["cap"]))
        w = rng.normals(k3 * d_in * d_out, 0.0, scale).reshape(k3, d_in, d_out)
        return [w, np.zeros(d_out)]
    if kind == "separable":
        k3, d_in, d_out = spec["k"] ** 3, spec["in"], spec["out"]
        s = rng.normals(k3 * d_in, 0.0, np.sqrt(2.0 / spec["cap"])).reshape(k3, d_in)
        p = rng.normals(d_in * d_out, 0.0, np.sqrt(1.0 / d_in)).reshape(d_in, d_out)
        return [s, p, np.zeros(d_out)]
    if kind == "linear":
        d_in, d_out = spec["in"], spec["out"]
        w = rng.normals(d_in * d_out, 0.0, np.sqrt(2.0 / d_in)).reshape(d_in, d_out)
        return [w, np.zeros(d_out)]
    return []


def build_stack(
    specs: list[dict],
    task: str,
    rng: DetRng | None = None,
    flat: np.ndarray | None = None,
) -> LayerStack:
    """Construct a LayerStack from layer-spec dicts.

    Parameters come either from a seeded init (``rng``) or from a flat
    float64 vector (``flat``, e.g. a checkpoint payload); exactly one
    must be given.
    """
    if (rng is None) == (flat is None):
        raise ValueError("pass exactly one of rng or flat")
    cursor = 0
    layers: list[Layer] = []
    for spec in specs:
        shapes = spec_param_shapes(spec)
        if rng is not None:
            params = _init_params(spec, rng)
        else:
            params = []
            for shape in shapes:
                size = int(np.prod(shape))
                if cursor + size > flat.shape[0]:
                    raise ValueError("parameter vector too short for layer specs")
                params.append(flat[cursor : cursor + size].reshape(shape))
                cursor += size
        kind = spec["type"]
        if kind == "deformable":
            layer: Layer = DeformConvLayer(_conv_spec(spec), params[0], params[1])
        elif kind == "separable":
            layer = SeparableConvLayer(_conv_spec(spec), params[0], params[1], params[2])
        elif kind == "linear":
            layer = LinearLayer(params[0], params[1])
        elif kind == "relu":
            layer = ReluLayer()
        elif kind == "pool":
            layer = GlobalMaxPoolLayer()
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        if spec.get("skip"):
            layer = ConcatSkipLayer(layer)
        layers.append(layer)
    if flat is not None and cursor != flat.shape[0]:
        raise ValueError(
            f"parameter vector holds {flat.shape[0]} values, specs need {cursor}"
        )
    return LayerStack(layers, task)


def flatten_params(stack: LayerStack) -> np.ndarray:
    """All stack parameters as one float64 vector (storage order)."""
    parts = [p.ravel() for p in stack.parameters()]
    return np.concatenate(parts) if parts else np.empty(0)


def stack_forward(
    stack: LayerStack,
    cloud: PointCloud,
    neighbors: NeighborTable | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Run a stack on one cloud. A provided neighbour table is reused by
    every conv layer whose (radius, cap) matches it; other geometries
    trigger their own searches."""
    ctx = LayerContext(cloud, threads=threads)
    if neighbors is not None:
        ctx.preset(neighbors)
    return stack.forward(cloud, ctx)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross entropy and its gradient w.r.t. the logits.

    loss = mean_i (-log softmax(logits_i)[labels_i])
    grad = (softmax - onehot) / rows
    """
    z = np.asarray(logits, dtype=np.float64)
    lab = np.asarray(labels)
    if z.ndim != 2:
        raise ValueError(f"logits must be (N, C), got {z.shape}")
    if lab.shape != (z.shape[0],):
        raise ValueError(f"labels must be ({z.shape[0]},), got {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValueError("labels must be integers")
    if np.any(lab < 0) or np.any(lab >= z.shape[1]):
        raise ValueError("label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    p = expz / denom
    rows = z.shape[0]
    picked = shifted[np.arange(rows), lab]
    loss = float(np.mean(np.log(denom[:, 0]) - picked))
    grad = p.copy()
    grad[np.arange(rows), lab] -= 1.0
    grad /= rows
    return loss, grad


_BETA1 = 0.9
_BETA2 = 0.999
_EPS = 1e-8


@dataclass
class OptimizerState:
    """Adam accumulators for one parameter list, plus hyperparameters."""

    lr: float
    weight_decay: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def init_adam(params: list[np.ndarray], lr: float, weight_decay: float = 0.0) -> OptimizerState:
    if lr <= 0:
        raise ValueError("lr must be positive")
    if weight_decay < 0:
        raise ValueError("weight_decay must be >= 0")
    return OptimizerState(
        lr=lr,
        weight_decay=weight_decay,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(
    state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]
) -> OptimizerState:
    """One Adam update, in place on the parameter arrays.

    Decoupled weight decay: parameters are shrunk by lr * weight_decay
    before the moment-based step, so the decay never enters m or v.
    Moments use bias correction; the denominator is sqrt(v_hat) + eps.
    """
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("params/grads do not match optimizer state")
    state.step += 1
    t = state.step
    c1 = 1.0 - _BETA1 ** t
    c2 = 1.0 - _BETA2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("parameter/gradient shape mismatch")
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= _BETA1
        m += (1.0 - _BETA1) * g
        v *= _BETA2
        v += (1.0 - _BETA2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + _EPS)
    return state


@dataclass(frozen=True)
class MetricsReport:
    """Accuracy plus per-class and mean intersection-over-union."""

    accuracy: float
    per_class_iou: dict[int, float]
    miou: float
    count: int  # predictions scored (points or clouds)


def metrics_from_predictions(
    preds: np.ndarray, labels: np.ndarray, num_classes: int
) -> MetricsReport:
    """Confusion-matrix metrics. Classes absent from both predictions
    and labels are left out of the IoU average."""
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if preds.shape[0] == 0:
        raise ValueError("cannot score zero predictions")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    accuracy = float(np.trace(confusion)) / preds.shape[0]
    per_class: dict[int, float] = {}
    for c in range(num_classes):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        denom = tp + fp + fn
        if denom > 0:
            per_class[c] = float(tp) / float(denom)
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MetricsReport(accuracy, per_class, miou, preds.shape[0])


def _targets(cloud: PointCloud, task: str) -> np.ndarray:
    if task == CLASSIFICATION:
        return cloud.labels[:1]
    return cloud.labels


def evaluate(
    stack: LayerStack, dataset: Dataset, threads: int = 1,
    contexts: list[LayerContext] | None = None,
) -> MetricsReport:
    """Score a stack on a dataset: per-cloud votes for classification,
    per-point predictions pooled over all clouds for segmentation."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.task != stack.task:
        raise ValueError(
            f"dataset task {dataset.task!r} does not match stack task {stack.task!r}"
        )
    preds_all, labels_all = [], []
    for i, cloud in enumerate(dataset.clouds):
        ctx = contexts[i] if contexts is not None else LayerContext(cloud, threads)
        logits = stack.forward(cloud, ctx)
        preds_all.append(np.argmax(logits, axis=1))
        labels_all.append(_targets(cloud, dataset.task))
    return metrics_from_predictions(
        np.concatenate(preds_all), np.concatenate(labels_all), dataset.num_classes
    )


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float
    miou: float


def train_stack(
    stack: LayerStack,
    train_set: Dataset,
    *,
    lr: float,
    weight_decay: float,
    epochs: int,
    batch_size: int,
    rng: DetRng,
    threads: int = 1,
    eval_set: Dataset | None = None,
    stop_accuracy: float | None = None,
) -> list[EpochLog]:
    """Adam training loop over whole clouds.

    Per epoch: visit clouds in a fresh seeded order, accumulate
    gradients, step every batch_size clouds (and once more for a
    trailing partial batch), then score the epoch. Scoring runs on
    eval_set when given, else on the training set; when stop_accuracy is
    set, training stops early once the score reaches it.
    """
    if len(train_set) == 0:
        raise ValueError("cannot train on an empty dataset")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    first = train_set.clouds[0]
    out_dim = stack.check_channels(first.feature_dim)
    if out_dim != train_set.num_classes:
        raise ValueError(
            f"stack emits {out_dim} channels but dataset has {train_set.num_classes} classes"
        )
    state = init_adam(stack.parameters(), lr=lr, weight_decay=weight_decay)
    contexts = [LayerContext(c, threads) for c in train_set.clouds]
    eval_ctx = (
        [LayerContext(c, threads) for c in eval_set.clouds] if eval_set else None
    )
    logs: list[EpochLog] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        stack.zero_grads()
        pending = 0
        for pos in order:
            cloud = train_set.clouds[int(pos)]
            ctx = contexts[int(pos)]
            logits = stack.forward(cloud, ctx)
            loss, grad = cross_entropy(logits, _targets(cloud, train_set.task))
            losses.append(loss)
            stack.backward(grad, ctx)
            pending += 1
            if pending == batch_size:
                adam_step(state, stack.parameters(), stack.gradients())
                stack.zero_grads()
                pending = 0
        if pending:
            adam_step(state, stack.parameters(), stack.gradients())
            stack.zero_grads()
        scored = evaluate(
            stack,
            eval_set if eval_set is not None else train_set,
            threads,
            contexts=eval_ctx if eval_set is not None else contexts,
        )
        logs.append(EpochLog(epoch, float(np.mean(losses)), scored.accuracy, scored.miou))
        if stop_accuracy is not None and scored.accuracy >= stop_accuracy:
            break
    return logs
