"""Command line interface.

    deformconv gen-data          --config run.cfg
    deformconv train             --config run.cfg [--seed N] [--out DIR] [--threads N]
    deformconv eval              --config run.cfg ...
    deformconv bench             --config run.cfg ...
    deformconv export-filters    --config run.cfg ...
    deformconv compare-baselines --config run.cfg ...

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed dataset/checkpoint files).

Every run is a pure function of config + seed: outputs (logs, reports,
checkpoints, generated data) are byte-identical across repeated runs.
Benchmark timings are the one deliberate exception.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from statistics import median

import numpy as np

from . import baselines, conv, nn
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .pointcloud import (
    CLASSIFICATION,
    Dataset,
    PointCloud,
    SEGMENTATION,
    TASKS,
    XyzFormatError,
    load_xyz,
    save_xyz,
    synth_dataset,
)
from .rng import DetRng
from .spatial import build_index, radius_neighbors


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(x: float) -> str:
    return "%.17g" % x


# ---------------------------------------------------------------- data


def _write_manifest(path, rows, task: str, num_classes: int) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"# dfc-manifest task={task} classes={num_classes}\n")
        fh.write("file,label,split\n")
        for name, label, split in rows:
            fh.write(f"{name},{label},{split}\n")


def _read_manifest(path):
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = [l.rstrip("\n") for l in fh]
    except OSError as exc:
        raise XyzFormatError(f"cannot read manifest {path}: {exc}") from None
    if len(lines) < 3:
        raise XyzFormatError(f"{path}: manifest too short")
    # header tokens: '#', 'dfc-manifest', 'task=..', 'classes=..'
    head = lines[0].split()
    if (
        len(head) != 4
        or head[0] != "#"
        or head[1] != "dfc-manifest"
        or not head[2].startswith("task=")
        or not head[3].startswith("classes=")
    ):
        raise XyzFormatError(f"{path}:1: bad manifest header")
    task = head[2][5:]
    if task not in TASKS:
        raise XyzFormatError(f"{path}:1: unknown task {task!r}")
    try:
        num_classes = int(head[3][8:])
    except ValueError:
        raise XyzFormatError(f"{path}:1: bad class count") from None
    if lines[1] != "file,label,split":
        raise XyzFormatError(f"{path}:2: expected 'file,label,split'")
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise XyzFormatError(f"{path}:{lineno}: expected 3 fields")
        rows.append((parts[0], parts[1], parts[2]))
    if not rows:
        raise XyzFormatError(f"{path}: manifest lists no clouds")
    return task, num_classes, rows


def _load_dir_datasets(data_dir) -> dict[str, Dataset]:
    task, num_classes, rows = _read_manifest(os.path.join(data_dir, "manifest.csv"))
    by_split: dict[str, list[PointCloud]] = {}
    for name, _label, split in rows:
        cloud = load_xyz(os.path.join(data_dir, name))
        by_split.setdefault(split, []).append(cloud)
    return {
        split: Dataset(clouds, num_classes=num_classes, task=task)
        for split, clouds in by_split.items()
    }


def _synth_split(cfg: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    kind = cfg.get_str("data.kind")
    n_train = cfg.get_int("data.train")
    n_test = cfg.get_int("data.test")
    points = cfg.get_int("data.points")
    noise = cfg.get_float("data.noise", 0.0)
    full = synth_dataset(kind, n_train + n_test, points, noise, seed)
    train = Dataset(full.clouds[:n_train], full.num_classes, full.task)
    test = Dataset(full.clouds[n_train:], full.num_classes, full.task)
    return train, test


def _datasets(cfg: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    """(train, test) from data.dir if set, else synthesised in memory."""
    if cfg.has("data.dir"):
        splits = _load_dir_datasets(cfg.get_str("data.dir"))
        if "train" not in splits or "test" not in splits:
            raise XyzFormatError("manifest must provide train and test splits")
        return splits["train"], splits["test"]
    return _synth_split(cfg, seed)


# ------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    data_dir = cfg.get_str("data.dir")
    seed = args.seed if args.seed is not None else cfg.get_int("seed")
    n_train = cfg.get_int("data.train")
    n_test = cfg.get_int("data.test")
    kind = cfg.get_str("data.kind")
    points = cfg.get_int("data.points")
    noise = cfg.get_float("data.noise", 0.0)
    full = synth_dataset(kind, n_train + n_test, points, noise, seed)
    os.makedirs(data_dir, exist_ok=True)
    rows = []
    for i, cloud in enumerate(full.clouds):
        name = f"cloud_{i:04d}.xyz"
        save_xyz(cloud, os.path.join(data_dir, name))
        label = int(cloud.labels[0]) if full.task == CLASSIFICATION else -1
        split = "train" if i < n_train else "test"
        rows.append((name, label, split))
    _write_manifest(
        os.path.join(data_dir, "manifest.csv"), rows, full.task, full.num_classes
    )
    print(f"wrote {len(full.clouds)} clouds ({n_train} train, {n_test} test) to {data_dir}")
    return 0


def _build_stack_from_config(cfg: RunConfig, task: str, rng: DetRng) -> nn.LayerStack:
    specs = cfg.layer_specs()
    try:
        return nn.build_stack(specs, task, rng=rng)
    except ValueError as exc:
        raise ConfigError(f"bad layer configuration: {exc}") from None


def cmd_train(cfg: RunConfig, args) -> int:
    seed = args.seed if args.seed is not None else cfg.get_int("seed")
    out_dir = args.out if args.out else cfg.get_str("out")
    task = cfg.get_str("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    train_set, test_set = _datasets(cfg, seed)
    if train_set.task != task:
        raise ConfigError(
            f"config task {task!r} does not match dataset task {train_set.task!r}"
        )
    rng = DetRng(seed)
    stack = _build_stack_from_config(cfg, task, rng)
    try:
        stack.check_channels(train_set.clouds[0].feature_dim)
    except ValueError as exc:
        raise ConfigError(f"bad layer configuration: {exc}") from None
    logs = nn.train_stack(
        stack,
        train_set,
        lr=cfg.get_float("opt.lr"),
        weight_decay=cfg.get_float("opt.weight_decay", 0.0),
        epochs=cfg.get_int("opt.epochs"),
        batch_size=cfg.get_int("opt.batch", 1),
        rng=rng,
        threads=args.threads,
    )
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.csv")
    with open(log_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("epoch,loss,accuracy,miou\n")
        for row in logs:
            fh.write(
                f"{row.epoch},{_fmt(row.loss)},{_fmt(row.accuracy)},{_fmt(row.miou)}\n"
            )
    ckpt = Checkpoint(
        task=task,
        seed=seed,
        num_classes=train_set.num_classes,
        layer_specs=cfg.layer_specs(),
        params=nn.flatten_params(stack),
    )
    ckpt_path = os.path.join(out_dir, "checkpoint.dfc")
    save_checkpoint(ckpt, ckpt_path)
    for row in logs:
        print(
            f"epoch {row.epoch} loss {row.loss:.6f} "
            f"accuracy {row.accuracy:.6f} miou {row.miou:.6f}"
        )
    report = nn.evaluate(stack, test_set, threads=args.threads)
    print(f"test accuracy {report.accuracy:.6f} miou {report.miou:.6f}")
    print(f"saved {ckpt_path}")
    return 0


def _metric_rows(report: nn.MetricsReport) -> list[tuple[str, float]]:
    rows = [("accuracy", report.accuracy), ("miou", report.miou)]
    for c in sorted(report.per_class_iou):
        rows.append((f"iou_{c}", report.per_class_iou[c]))
    return rows


def cmd_eval(cfg: RunConfig, args) -> int:
    seed = args.seed if args.seed is not None else cfg.get_int("seed")
    out_dir = args.out if args.out else cfg.get_str("out")
    ckpt = load_checkpoint(cfg.get_str("eval.checkpoint"))
    stack = ckpt.build_stack()
    train_set, test_set = _datasets(cfg, seed)
    split = cfg.get_str("eval.split", "test")
    if split == "train":
        dataset = train_set
    elif split == "test":
        dataset = test_set
    elif split == "all":
        dataset = Dataset(
            train_set.clouds + test_set.clouds, train_set.num_classes, train_set.task
        )
    else:
        raise ConfigError(f"eval.split must be train, test, or all, got {split!r}")
    if dataset.task != ckpt.task:
        raise CheckpointError(
            f"checkpoint task {ckpt.task!r} does not match dataset task {dataset.task!r}"
        )
    if dataset.num_classes != ckpt.num_classes:
        raise CheckpointError(
            f"checkpoint expects {ckpt.num_classes} classes, dataset has {dataset.num_classes}"
        )
    report = nn.evaluate(stack, dataset, threads=args.threads)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "metrics.csv")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("metric,value\n")
        for name, value in _metric_rows(report):
            fh.write(f"{name},{_fmt(value)}\n")
    for name, value in _metric_rows(report):
        print(f"{name} {value:.6f}")
    print(f"saved {path}")
    return 0


def _parse_bench_sizes(raw: str) -> list[tuple[int, int, int]]:
    sizes = []
    for tok in raw.replace(",", " ").split():
        parts = tok.replace("x", ":").split(":")
        if len(parts) != 3:
            raise ConfigError(f"bench.sizes entry {tok!r} must be M:K:k")
        try:
            m, cap, k = (int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"bench.sizes entry {tok!r} must be integers") from None
        if m < 1 or cap < 1 or k < 1 or k % 2 == 0:
            raise ConfigError(f"bench.sizes entry {tok!r} out of range")
        sizes.append((m, cap, k))
    if not sizes:
        raise ConfigError("bench.sizes lists no entries")
    return sizes


def _bench_cloud(m: int, cap: int, radius: float, rng: DetRng, dim: int) -> PointCloud:
    # cube sized so a radius ball holds about `cap` points on average
    density = cap / (4.0 / 3.0 * np.pi * radius**3)
    side = (m / density) ** (1.0 / 3.0)
    pos = rng.uniforms(3 * m, 0.0, side).reshape(m, 3)
    feats = rng.uniforms(m * dim, -1.0, 1.0).reshape(m, dim)
    return PointCloud(pos, feats)


def cmd_bench(cfg: RunConfig, args) -> int:
    seed = args.seed if args.seed is not None else cfg.get_int("seed")
    out_dir = args.out if args.out else cfg.get_str("out")
    sizes = _parse_bench_sizes(cfg.get_str("bench.sizes", "10000:16:7 100000:16:3"))
    reps = cfg.get_int("bench.reps", 5)
    if reps < 5:
        raise ConfigError("bench.reps must be >= 5 (medians need repetitions)")
    spacing = 0.2
    dim = 4
    rows = []
    for si, (m, cap, k) in enumerate(sizes):
        rng = DetRng(seed).spawn(si)
        grid = conv.grid_from_spacing(k, spacing)
        radius = conv.default_radius(grid)
        cloud = _bench_cloud(m, cap, radius, rng, dim)
        table = radius_neighbors(
            build_index(cloud.positions, radius), cloud.positions, radius, cap
        )
        weights = 0.5 * rng.normals(grid.num_anchors * dim * dim).reshape(
            grid.num_anchors, dim, dim
        )
        filt = conv.DeformableFilter(grid, weights)
        fast = conv.forward(cloud, table, filt, threads=args.threads)
        slow = conv.oracle_forward(cloud, table, filt)
        scale = max(float(np.max(np.abs(slow))), 1e-300)
        rel = float(np.max(np.abs(fast - slow))) / scale
        if rel > 1e-12:
            raise ValueError(
                f"fast path disagrees with reference (rel {rel:.3e}) at M={m} K={cap} k={k}"
            )
        t_fast, t_slow = [], []
        for _ in range(reps):
            t0 = time.perf_counter()
            conv.forward(cloud, table, filt, threads=args.threads)
            t_fast.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            conv.oracle_forward(cloud, table, filt)
            t_slow.append(time.perf_counter() - t0)
        ns_fast = median(t_fast) / m * 1e9
        ns_slow = median(t_slow) / m * 1e9
        rows.append(("forward", m, cap, k, ns_fast))
        rows.append(("oracle_forward", m, cap, k, ns_slow))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "bench.csv")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("op,M,K,k,ns_per_point\n")
        for op, m, cap, k, ns in rows:
            fh.write(f"{op},{m},{cap},{k},{ns:.1f}\n")
    for op, m, cap, k, ns in rows:
        print(f"{op:>15s} M={m:<7d} K={cap:<3d} k={k}: {ns:12.1f} ns/point")
    print(f"saved {path}")
    return 0


def cmd_export_filters(cfg: RunConfig, args) -> int:
    out_dir = args.out if args.out else cfg.get_str("out")
    ckpt = load_checkpoint(cfg.get_str("export.checkpoint"))
    idx = cfg.get_int("export.layer")
    if idx < 0 or idx >= len(ckpt.layer_specs):
        raise ConfigError(
            f"export.layer {idx} out of range (checkpoint has {len(ckpt.layer_specs)} layers)"
        )
    spec = ckpt.layer_specs[idx]
    if spec["type"] not in ("deformable", "separable"):
        raise ConfigError(
            f"layer {idx} has type {spec['type']!r}; only conv filters can be exported"
        )
    # locate this layer's parameters inside the flat payload
    offset = 0
    for earlier in ckpt.layer_specs[:idx]:
        offset += sum(int(np.prod(s)) for s in nn.spec_param_shapes(earlier))
    shapes = nn.spec_param_shapes(spec)
    size0 = int(np.prod(shapes[0]))
    weights = ckpt.params[offset : offset + size0].reshape(shapes[0])

    grid = conv.grid_from_spacing(spec["k"], spec["a"])
    positions = grid.anchor_positions()
    h = grid.half
    if spec["type"] == "deformable":
        cols = [f"w_{c}_{d}" for c in range(spec["in"]) for d in range(spec["out"])]
        flat = weights.reshape(grid.num_anchors, -1)
    else:
        cols = [f"w_{c}" for c in range(spec["in"])]
        flat = weights
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "filters.csv")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("i,j,l,x,y,z," + ",".join(cols) + "\n")
        a = 0
        for i in range(-h, h + 1):
            for j in range(-h, h + 1):
                for l in range(-h, h + 1):
                    pos = positions[a]
                    vals = ",".join(_fmt(v) for v in flat[a])
                    fh.write(
                        f"{i},{j},{l},{_fmt(pos[0])},{_fmt(pos[1])},{_fmt(pos[2])},{vals}\n"
                    )
                    a += 1
    print(f"exported layer {idx} ({spec['type']}, k={spec['k']}) to {path}")
    return 0


def import_filters(path):
    """Read a filters.csv back: (lattice (A,3) int, positions (A,3),
    weights (A, C)). Inverse of cmd_export_filters for testing."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [l.rstrip("\n") for l in fh if l.strip()]
    header = lines[0].split(",")
    if header[:6] != ["i", "j", "l", "x", "y", "z"]:
        raise ValueError(f"{path}: unexpected filter export header")
    lattice, positions, weights = [], [], []
    for line in lines[1:]:
        parts = line.split(",")
        lattice.append([int(v) for v in parts[:3]])
        positions.append([float(v) for v in parts[3:6]])
        weights.append([float(v) for v in parts[6:]])
    return (
        np.asarray(lattice, dtype=np.int64),
        np.asarray(positions),
        np.asarray(weights),
    )


def _resolve_conv_geometry(spec: dict) -> tuple[float, int]:
    grid = conv.grid_from_spacing(spec["k"], spec["a"])
    radius = spec["r"] if spec.get("r") is not None else conv.default_radius(grid)
    return float(radius), int(spec["cap"])


def _build_pcc_stack(
    specs: list[dict], task: str, hidden: list[int], rng: DetRng
) -> nn.LayerStack:
    layers: list[nn.Layer] = []
    for spec in specs:
        kind = spec["type"]
        if kind in ("deformable", "separable"):
            radius, cap = _resolve_conv_geometry(spec)
            d_in, d_out = spec["in"], spec["out"]
            filt = baselines.mlp_filter_init(hidden, d_in, rng)
            pointwise = rng.normals(d_in * d_out, 0.0, np.sqrt(1.0 / d_in)).reshape(
                d_in, d_out
            )
            layer: nn.Layer = baselines.PccLayer(
                radius, cap, filt, pointwise, np.zeros(d_out)
            )
        else:
            layer = nn.build_stack([dict(spec, skip=0)], SEGMENTATION, rng=rng).layers[0]
        if spec.get("skip"):
            layer = nn.ConcatSkipLayer(layer)
        layers.append(layer)
    return nn.LayerStack(layers, task)


def _build_voxel_stack(
    specs: list[dict], task: str, pitch: float, rng: DetRng
) -> nn.LayerStack:
    layers: list[nn.Layer] = []
    for spec in specs:
        kind = spec["type"]
        if kind in ("deformable", "separable"):
            d_in, d_out = spec["in"], spec["out"]
            w = rng.normals(d_in * d_out, 0.0, np.sqrt(2.0 / d_in)).reshape(d_in, d_out)
            layer: nn.Layer = nn.ComposeLayer(
                [baselines.VoxelSmoothLayer(pitch), nn.LinearLayer(w, np.zeros(d_out))]
            )
        else:
            layer = nn.build_stack([dict(spec, skip=0)], SEGMENTATION, rng=rng).layers[0]
        if spec.get("skip"):
            layer = nn.ConcatSkipLayer(layer)
        layers.append(layer)
    return nn.LayerStack(layers, task)


def cmd_compare_baselines(cfg: RunConfig, args) -> int:
    seed = args.seed if args.seed is not None else cfg.get_int("seed")
    out_dir = args.out if args.out else cfg.get_str("out")
    task = cfg.get_str("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    train_set, test_set = _datasets(cfg, seed)
    specs = cfg.layer_specs()
    hidden = cfg.int_list("pcc.hidden", [8, 8])
    pitch = cfg.get_float("voxel.pitch", 0.2)
    sub_pitch = cfg.get_float("subvoxel.pitch", 0.2)
    sub_disp = cfg.get_float("subvoxel.displacement", 0.05)
    sub = baselines.subvoxel_discrimination(sub_pitch, sub_disp, seed)

    try:
        stacks = {
            "deformable": nn.build_stack(specs, task, rng=DetRng(seed).spawn(1)),
            "pcc": _build_pcc_stack(specs, task, hidden, DetRng(seed).spawn(2)),
            "voxel": _build_voxel_stack(specs, task, pitch, DetRng(seed).spawn(3)),
        }
    except ValueError as exc:
        raise ConfigError(f"bad layer configuration: {exc}") from None

    results = []
    for mi, (name, stack) in enumerate(stacks.items()):
        nn.train_stack(
            stack,
            train_set,
            lr=cfg.get_float("opt.lr"),
            weight_decay=cfg.get_float("opt.weight_decay", 0.0),
            epochs=cfg.get_int("opt.epochs"),
            batch_size=cfg.get_int("opt.batch", 1),
            rng=DetRng(seed).spawn(10 + mi),
            threads=args.threads,
        )
        report = nn.evaluate(stack, test_set, threads=args.threads)
        results.append((name, report.accuracy, report.miou))

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "compare.csv")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("method,accuracy,miou,voxel_path_diff,deform_path_diff\n")
        for name, acc, miou in results:
            fh.write(
                f"{name},{_fmt(acc)},{_fmt(miou)},"
                f"{_fmt(sub.voxel_path_diff)},{_fmt(sub.deform_path_diff)}\n"
            )
    for name, acc, miou in results:
        print(f"{name:>10s}: accuracy {acc:.6f} miou {miou:.6f}")
    print(
        f"sub-voxel displacement {sub_disp:g} m at pitch {sub_pitch:g} m: "
        f"voxel diff {sub.voxel_path_diff:.3e}, deformable diff {sub.deform_path_diff:.3e}"
    )
    print(f"saved {path}")
    return 0


# ---------------------------------------------------------------- main


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-filters": cmd_export_filters,
    "compare-baselines": cmd_compare_baselines,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="deformconv", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to key = value config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument(
            "--threads", type=int, default=1, help="worker threads for forward passes"
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (XyzFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
