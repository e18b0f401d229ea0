"""Command line entry point: ``traversim <stage> [options]``.

Stages read and write a fixed run directory::

    <out>/world/        world.json, obstacles.json, preview.png
    <out>/dataset/      manifest.json, samples/, episodes/, collect.json
    <out>/checkpoints/  <arch>.json, <arch>.history.csv, best.json, ablation.csv
    <out>/maps/         map.ply, summary.json, local.ply, topdown.png
    <out>/paths/        path.json, path.ply, explore.json, costmap.png
    <out>/report.csv    one row per reported metric (pipeline only)

Every invocation writes the resolved configuration to ``<out>/config.json``;
passing that file back with ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import report, seeding
from .cloud import Footprint
from .datagen import CollectConfig, Dataset, augment, build_dataset, collect
from .datagen.labels import imu_feature
from .datagen.samples import build_map_sequence, rescan_episode
from .gridder import DEFAULT_BOUNDS, export_colored, fuse_overlaps, infer_map, make_grid, write_summary
from .io import atomic_write_bytes, read_ply_table
from .planner import build_costmap, explore_step, export_path, nearest_passable, plan_astar
from .simworld import Episode, World, WorldConfig, build_world
from .traversenet import ABLATION_ARCHS, ArchConfig, evaluate, load_checkpoint, run_ablation, save_checkpoint
from .traversenet.train import splits_of, write_history

STAGES = ("worldgen", "collect", "augment", "train", "eval", "infer", "plan", "pipeline")

# world used when no config says otherwise: small enough to sample densely
PIPELINE_WORLD = {"domain_m": 300.0, "obstacle_density_per_km2": 1500.0, "max_slope": 0.8}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class MissingArtifact(StageError):
    def __init__(self, stage: str, path: Path, hint: str = ""):
        msg = f"missing artifact {path}" + (f" ({hint})" if hint else "")
        super().__init__(stage, msg)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    world: dict = field(default_factory=lambda: dict(PIPELINE_WORLD))
    collect: dict = field(default_factory=lambda: {"episodes": 40, "max_time": 75.0})
    parallel: int = 1
    test_ratio: float = 0.2
    augment_fraction: float = 0.5
    arch: str = "all"
    epochs: int = 300
    batch_size: int = 32
    grid: str = "overlapping"
    stride: float = 0.25
    grid_bounds: list = field(default_factory=lambda: [list(DEFAULT_BOUNDS[0]), list(DEFAULT_BOUNDS[1])])
    min_points: int = 3
    infer_episode: int | None = None
    infer_window: float = 20.0
    cell: float = 0.25
    block_threshold: float = 0.9
    cost_weight: float = 5.0
    horizon: float = 4.0
    goal: list | None = None

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def collect_config(self) -> CollectConfig:
        return CollectConfig.from_dict(self.collect)

    def archs(self) -> list[ArchConfig]:
        if self.arch.strip().lower() == "all":
            return list(ABLATION_ARCHS)
        return [ArchConfig.parse(a) for a in self.arch.split(",")]


def arch_slug(arch: ArchConfig) -> str:
    return re.sub(r"[^a-z0-9]+", "-", arch.label.lower()).strip("-")


class Run:
    """Paths of one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)

    world = property(lambda self: self.root / "world")
    dataset = property(lambda self: self.root / "dataset")
    checkpoints = property(lambda self: self.root / "checkpoints")
    maps = property(lambda self: self.root / "maps")
    paths = property(lambda self: self.root / "paths")

    def require(self, stage: str, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingArtifact(stage, path, hint)
        return path

    def load_world(self, stage: str) -> World:
        path = self.require(stage, self.world / "world.json", "run worldgen first")
        return build_world(WorldConfig.load(path))

    def load_dataset(self, stage: str) -> Dataset:
        self.require(stage, self.dataset / "manifest.json", "run collect first")
        return Dataset.load(self.dataset)


def _say(msg: str) -> None:
    print(msg, flush=True)


def _write_json(path: Path, doc) -> None:
    atomic_write_bytes(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


def stage_worldgen(run: Run) -> dict:
    cfg = WorldConfig.from_dict({**run.cfg.world, "seed": seeding.derive_seed(run.cfg.seed, seeding.WORLD)})
    world = build_world(cfg)
    cfg.save(run.world / "world.json")
    _write_json(run.world / "obstacles.json", [o.to_dict() for o in world.obstacles])
    report.world_preview(world, run.world / "preview.png")
    _say(f"worldgen: {cfg.domain_m:g} m domain, {len(world.obstacles)} obstacles -> {run.world}")
    return {"obstacles": len(world.obstacles)}


def stage_collect(run: Run) -> dict:
    world = run.load_world("collect")
    ccfg = run.cfg.collect_config()
    seed = run.cfg.seed

    def progress(done, total):
        if done == total or done % 10 == 0:
            _say(f"collect: {done}/{total} episodes")

    episodes, samples, stats = collect(world, ccfg, seed, run.cfg.parallel, progress)
    if not samples:
        raise StageError("collect", "episodes produced no samples")
    if run.dataset.exists():
        shutil.rmtree(run.dataset)
    ds = build_dataset(samples, run.cfg.test_ratio, seeding.derive_seed(seed, seeding.SPLIT),
                       {"collect": ccfg.to_dict(), "seed": seed, "world": world.config.to_dict()})
    ds.save(run.dataset)
    for ep in episodes:
        ep.to_jsonl(run.dataset / "episodes" / f"ep{ep.episode_id:04d}.jsonl")
    _write_json(run.dataset / "collect.json", stats)
    report.label_histogram([s.label for s in ds.samples.values()], run.dataset / "labels.png")
    _say(f"collect: {len(samples)} samples from {len(episodes)} episodes "
         f"(train {len(ds.train)}, test {len(ds.test)})")
    return {"samples": len(samples), "train": len(ds.train), "test": len(ds.test)}


def stage_augment(run: Run) -> dict:
    ds = run.load_dataset("augment")
    if ds.augmented:
        raise StageError("augment", "dataset is already augmented")
    n_before = len(ds.train)
    aug = augment(ds, run.cfg.augment_fraction, seeding.derive_seed(run.cfg.seed, seeding.AUGMENT))
    aug.save(run.dataset)
    _say(f"augment: train split {n_before} -> {len(aug.train)} samples")
    return {"train_augmented": len(aug.train), "samples_total": len(aug)}


def stage_train(run: Run) -> dict:
    ds = run.load_dataset("train")
    archs = run.cfg.archs()
    cfg = run.cfg

    def progress(arch, row):
        if row["epoch"] == cfg.epochs or row["epoch"] % 10 == 0:
            _say(f"train: {arch.label} epoch {row['epoch']}/{cfg.epochs} "
                 f"loss {row['train_loss']:.4f} test MAE {row['test_mae']:.4f}")

    result = run_ablation(ds, archs, seeding.derive_seed(cfg.seed, seeding.TRAIN), cfg.epochs, cfg.batch_size,
                          progress)
    run.checkpoints.mkdir(parents=True, exist_ok=True)
    best, best_mae = None, np.inf
    for row in result.rows:
        arch = next(a for a in archs if a.label == row["architecture"])
        slug = arch_slug(arch)
        meta = {"epochs": cfg.epochs, "seed": cfg.seed, "test_mae": row["test_mae"], "batch_size": cfg.batch_size}
        save_checkpoint(run.checkpoints / f"{slug}.json", result.params[arch.label], meta)
        write_history(run.checkpoints / f"{slug}.history.csv", result.histories[arch.label])
        if row["test_mae"] < best_mae:
            best, best_mae = slug, row["test_mae"]
    shutil.copyfile(run.checkpoints / f"{best}.json", run.checkpoints / "best.json")
    result.write_csv(run.checkpoints / "ablation.csv")
    report.training_curves(result.histories, run.checkpoints / "training.png")
    report.ablation_bars(result.rows, run.checkpoints / "ablation.png")
    sys.stdout.write(result.to_csv())
    return {"rows": result.rows, "best": best}


def stage_eval(run: Run, checkpoint: str | None) -> dict:
    path = Path(checkpoint) if checkpoint else run.checkpoints / "best.json"
    if not path.is_absolute() and not path.exists() and (run.checkpoints / path).exists():
        path = run.checkpoints / path
    run.require("eval", path, "run train first")
    params = load_checkpoint(path)
    ds = run.load_dataset("eval")
    _, test = splits_of(ds, params.arch.points_per_sample)
    if test is None or len(test) == 0:
        raise StageError("eval", "dataset has an empty test split")
    value = evaluate(params, test)
    _say(f"test MAE: {value:.3f}")
    return {"test_mae": value, "architecture": params.arch.label}


def _pick_episode(run: Run, ds: Dataset | None) -> int:
    if run.cfg.infer_episode is not None:
        return run.cfg.infer_episode
    if ds is not None and ds.test:
        return min(ds.samples[s].episode_id for s in ds.test)
    return 0


def stage_infer(run: Run, checkpoint: str | None) -> dict:
    world = run.load_world("infer")
    path = Path(checkpoint) if checkpoint else run.checkpoints / "best.json"
    params = load_checkpoint(run.require("infer", path, "run train first"))
    ds = Dataset.load(run.dataset) if (run.dataset / "manifest.json").exists() else None
    ep_id = _pick_episode(run, ds)
    ep_path = run.require("infer", run.dataset / "episodes" / f"ep{ep_id:04d}.jsonl", "run collect first")
    episode = Episode.from_jsonl(ep_path, episode_id=ep_id)
    ccfg = run.cfg.collect_config()
    lidar = ccfg.episode_config().lidar
    seed = seeding.derive_seed(run.cfg.seed, seeding.INFER, ep_id)
    t_end = float(episode.times[-1])
    scans = rescan_episode(episode, world, lidar, ccfg.scan_period, seed)
    episode.scans = [s for s in scans if s.time >= t_end - run.cfg.infer_window]
    local_map = None
    for _, local_map in build_map_sequence(episode, ccfg.prior_sigma, seed):
        pass
    if local_map is None:
        raise StageError("infer", f"episode {ep_id} has no scans to map")
    local = local_map.crop_local()
    imu = imu_feature(episode, t_end, ccfg.window).vector if params.arch.uses_imu else None
    grid = make_grid(run.cfg.grid_bounds, Footprint(tuple(ccfg.footprint)), run.cfg.grid, run.cfg.stride)
    tmap = infer_map(params, local, grid, imu, run.cfg.min_points, seed)
    if run.cfg.grid == "overlapping":
        tmap = fuse_overlaps(tmap)
    run.maps.mkdir(parents=True, exist_ok=True)
    export_colored(tmap, local, run.maps / "map.ply")
    write_summary(tmap, run.maps / "summary.json")
    local_map.export(run.maps / "local.ply")
    report.map_topdown(local.points, tmap.point_costs(), run.maps / "topdown.png",
                       f"episode {ep_id}, {tmap.mode}, {len(tmap)} boxes")
    _say(f"infer: episode {ep_id}, {len(local)} points, {len(tmap)} boxes "
         f"({tmap.n_discarded} discarded) -> {run.maps / 'map.ply'}")
    summary = tmap.summary()
    return {"episode": ep_id, "n_boxes": summary["n_boxes"], "n_discarded": summary["n_discarded"],
            "mean_cost": float(np.nanmean(tmap.costs)) if len(tmap) else float("nan")}


def stage_plan(run: Run, map_path: str | None) -> dict:
    path = Path(map_path) if map_path else run.maps / "map.ply"
    table, _ = read_ply_table(run.require("plan", path, "run infer first"))
    if "cost" not in table:
        raise StageError("plan", f"{path} has no per-point cost column")
    pts = np.column_stack([table["x"], table["y"], table["z"]]).astype(np.float64)
    lo, hi = run.cfg.grid_bounds
    costmap = build_costmap(pts, table["cost"].astype(np.float64), run.cfg.cell, ((lo[0], lo[1]), (hi[0], hi[1])))
    cfg = run.cfg
    start = nearest_passable(costmap, (0.0, 0.0), cfg.block_threshold)
    run.paths.mkdir(parents=True, exist_ok=True)
    if start is None:
        export_path(None, run.paths / "path.json", meta={"reason": "no passable cell"})
        _say("plan: halt, no passable cell in the costmap")
        return {"status": "halt"}
    start_xy = costmap.center_of(start)
    decision = explore_step(costmap, start_xy, 0.0, cfg.horizon, 15.0, cfg.block_threshold, cfg.cost_weight)
    explore_doc = {
        "start": list(start_xy),
        "halt": decision.halt,
        "goal": None if decision.goal is None else list(decision.goal),
        "candidates": [
            {"angle_offset_deg": c["angle_offset_deg"], "goal": list(c["goal"]),
             "cost": c["cost"] if np.isfinite(c["cost"]) else None,
             "score": c["score"] if np.isfinite(c["score"]) else None}
            for c in decision.candidates
        ],
    }
    _write_json(run.paths / "explore.json", explore_doc)
    if cfg.goal is not None:
        goal_cell = costmap.cell_of(cfg.goal)
        try:
            path_ = plan_astar(costmap, start, goal_cell, cfg.block_threshold, cfg.cost_weight)
        except ValueError as exc:
            raise StageError("plan", str(exc)) from exc
        mode = "goal"
    else:
        path_ = decision.path
        mode = "explore"
    export_path(path_, run.paths / "path.json", run.paths / "path.ply", meta={"mode": mode})
    report.costmap_figure(costmap, run.paths / "costmap.png", [path_], start_xy, f"{mode} plan")
    if path_ is None:
        _say(f"plan: {mode}: no path")
        return {"status": "no path" if mode == "goal" else "halt"}
    _say(f"plan: {mode} path with {len(path_.cells)} cells, length {path_.length:.2f} m, "
         f"cost {path_.total_cost:.3f}")
    return {"status": "ok", "length": path_.length, "total_cost": path_.total_cost}


def report_rows(results: dict) -> list[tuple[str, str, str]]:
    rows = []
    for stage in STAGES:
        res = results.get(stage)
        if not res:
            continue
        if stage == "train":
            for r in res["rows"]:
                for key in ("test_mae", "mean_baseline_mae", "train_mae_peak"):
                    rows.append((stage, f"{r['architecture']} {key}", f"{r[key]:.4f}"))
            rows.append((stage, "best", res["best"]))
            continue
        for key, value in res.items():
            rows.append((stage, key, f"{value:.4f}" if isinstance(value, float) else str(value)))
    return rows


def staged(stage: str, fn, *args):
    """Run one stage, tagging any failure with the stage name."""
    try:
        return fn(*args)
    except StageError:
        raise
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        raise StageError(stage, f"error: {exc}") from exc


def stage_pipeline(run: Run) -> dict:
    results = {}
    for name, fn, args in (
        ("worldgen", stage_worldgen, ()), ("collect", stage_collect, ()), ("augment", stage_augment, ()),
        ("train", stage_train, ()), ("eval", stage_eval, (None,)), ("infer", stage_infer, (None,)),
        ("plan", stage_plan, (None,)),
    ):
        results[name] = staged(name, fn, run, *args)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("stage", "metric", "value"))
    w.writerows(report_rows(results))
    atomic_write_bytes(run.root / "report.csv", buf.getvalue().encode())
    _say(f"pipeline: report -> {run.root / 'report.csv'}")
    return results


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="traversim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory")
    common.add_argument("--episodes", type=int)
    common.add_argument("--max-time", type=float, help="episode cap in seconds")
    common.add_argument("--parallel", type=int)
    common.add_argument("--label-mode", choices=("raw", "normalized"))
    common.add_argument("--arch", help="'all', an ablation label such as 'M-F IMU+XYZ+N', or fusion:features")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--grid", choices=("tiled", "overlapping"))
    common.add_argument("--stride", type=float)
    common.add_argument("--block-threshold", type=float)
    common.add_argument("--cost-weight", type=float)
    common.add_argument("--horizon", type=float)
    helps = {
        "worldgen": "generate the world", "collect": "run episodes and build the dataset",
        "augment": "append augmented copies to the train split", "train": "train architectures, write checkpoints",
        "eval": "print the test MAE of a checkpoint", "infer": "infer a traversability map for one episode",
        "plan": "plan on an inferred map", "pipeline": "run every stage with one seed",
    }
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("eval", "infer"):
            p.add_argument("--checkpoint", help="checkpoint JSON (default <out>/checkpoints/best.json)")
        if name == "infer":
            p.add_argument("--episode", type=int, help="episode id (default: first test episode)")
        if name == "plan":
            p.add_argument("--map", help="colored map PLY with a cost column (default <out>/maps/map.ply)")
            p.add_argument("--goal", type=float, nargs=2, metavar=("X", "Y"),
                           help="plan to this goal instead of exploring")
    return parser


def resolve_config(args) -> RunConfig:
    data = {}
    source = Path(args.config) if args.config else None
    if source is None and args.out and (Path(args.out) / "config.json").exists():
        # a later stage on an existing run picks up that run's settings
        source = Path(args.out) / "config.json"
    if source is not None:
        data = json.loads(source.read_text())
        data.pop("command", None)
    cfg = RunConfig.from_dict(data)
    collect_keys = {"episodes": "episodes", "max_time": "max_time", "label_mode": "label_mode"}
    for attr, key in collect_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.collect = {**cfg.collect, key: value}
    for attr in ("seed", "out", "parallel", "arch", "epochs", "batch_size", "grid", "stride", "block_threshold",
                 "cost_weight", "horizon"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "episode", None) is not None:
        cfg.infer_episode = args.episode
    if getattr(args, "goal", None) is not None:
        cfg.goal = list(args.goal)
    cfg.collect_config()  # validate early
    cfg.archs()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = args.command
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError) as exc:
        print(f"traversim {stage}: error: bad config: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg)
    run.root.mkdir(parents=True, exist_ok=True)
    _write_json(run.root / "config.json", {"command": stage, **cfg.to_dict()})
    _say(f"{stage}: config -> {run.root / 'config.json'}")
    handlers = {
        "worldgen": (stage_worldgen,), "collect": (stage_collect,), "augment": (stage_augment,),
        "train": (stage_train,), "eval": (stage_eval, args.__dict__.get("checkpoint")),
        "infer": (stage_infer, args.__dict__.get("checkpoint")), "plan": (stage_plan, args.__dict__.get("map")),
        "pipeline": (stage_pipeline,),
    }
    fn, *extra = handlers[stage]
    try:
        staged(stage, fn, run, *extra)
    except StageError as exc:
        print(f"traversim {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
