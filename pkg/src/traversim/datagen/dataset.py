"""Episode collection, dataset assembly, augmentation and episode-level splits."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import seeding
from ..cloud import Footprint, add_gaussian_noise, voxel_downsample
from ..geometry import Pose
from ..io import atomic_write_bytes
from ..simworld.lidar import LidarConfig
from ..simworld.robot import EpisodeConfig, Episode, RobotConfig, footprint_collides, place_robot, run_episode
from ..simworld.world import World, WorldConfig, build_world
from .samples import Sample, extract_samples, read_sample, write_sample

MANIFEST = "manifest.json"
AUG_VOXEL = (0.05, 0.25)
AUG_SIGMA = 0.05


@dataclass
class Dataset:
    samples: dict[str, Sample]
    train: list[str]
    test: list[str]
    augmented: dict[str, str] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for sid in (*self.train, *self.test):
            if sid not in self.samples:
                raise ValueError(f"split references unknown sample {sid!r}")
        train_eps = {self.samples[s].episode_id for s in self.train}
        test_eps = {self.samples[s].episode_id for s in self.test}
        if train_eps & test_eps:
            raise ValueError(f"episodes {sorted(train_eps & test_eps)} appear in both splits")
        for aug, src in self.augmented.items():
            if self.samples[aug].source_id != src:
                raise ValueError(f"augmented sample {aug!r} does not reference its source {src!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return [self.samples[s] for s in getattr(self, name)]

    def manifest(self) -> dict:
        return {
            "train": list(self.train),
            "test": list(self.test),
            "augmented": dict(sorted(self.augmented.items())),
            "config": self.config,
        }

    def save(self, directory) -> Path:
        """Write every sample plus ``manifest.json``; returns the manifest path."""
        directory = Path(directory)
        sample_dir = directory / "samples"
        sample_dir.mkdir(parents=True, exist_ok=True)
        for sid in sorted(self.samples):
            write_sample(self.samples[sid], sample_dir)
        path = directory / MANIFEST
        atomic_write_bytes(path, (json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n").encode())
        return path

    @classmethod
    def load(cls, directory) -> Dataset:
        directory = Path(directory)
        path = directory / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"dataset manifest not found: {path}")
        manifest = json.loads(path.read_text())
        samples = {}
        for ply in sorted((directory / "samples").glob("*.ply")):
            s = read_sample(ply)
            samples[s.sample_id] = s
        wanted = set(manifest["train"]) | set(manifest["test"])
        missing = sorted(wanted - set(samples))
        if missing:
            raise FileNotFoundError(f"dataset is missing sample files for {missing[:5]}")
        samples = {k: v for k, v in samples.items() if k in wanted}
        return cls(samples, manifest["train"], manifest["test"], manifest.get("augmented", {}),
                   manifest.get("config", {}))


def split_by_episode(samples, test_ratio: float = 0.2, seed: int = 0) -> Dataset:
    """Assign whole episodes to test (seeded order) until it holds ``test_ratio`` of the samples."""
    samples = list(samples)
    if not 0.0 <= test_ratio < 1.0:
        raise ValueError("test_ratio must lie in [0, 1)")
    by_id = {s.sample_id: s for s in samples}
    if len(by_id) != len(samples):
        raise ValueError("duplicate sample ids")
    episodes = sorted({s.episode_id for s in samples})
    if len(episodes) < 2:
        raise ValueError("need samples from at least 2 episodes to split")
    order = np.random.default_rng(seeding.derive_seed(seed, seeding.SPLIT)).permutation(episodes)
    counts = {e: 0 for e in episodes}
    for s in samples:
        counts[s.episode_id] += 1
    target = test_ratio * len(samples)
    test_eps: set[int] = set()
    n_test = 0
    for e in order[:-1]:  # always leave one episode for training
        if n_test >= target - 1e-9:
            break
        test_eps.add(int(e))
        n_test += counts[int(e)]
    ids = sorted(by_id)
    train = [i for i in ids if by_id[i].episode_id not in test_eps]
    test = [i for i in ids if by_id[i].episode_id in test_eps]
    return Dataset(by_id, train, test, {}, {"test_ratio": test_ratio, "split_seed": seed})


def _aug_id(source: str, taken) -> str:
    base = f"{source}_aug"
    if base not in taken:
        return base
    k = 2
    while f"{base}{k}" in taken:
        k += 1
    return f"{base}{k}"


def augment(dataset: Dataset, fraction: float = 0.5, seed: int = 0) -> Dataset:
    """Add one perturbed copy for ``floor(fraction * n_train)`` randomly chosen train samples.

    Each copy is voxel-downsampled with a voxel drawn from U(0.05, 0.25) m
    and then jittered with 0.05 m Gaussian noise.  Labels and IMU features are
    copied; the test split is left alone.
    """
    if len(dataset) == 0:
        raise ValueError("cannot augment an empty dataset")
    if fraction < 0:
        raise ValueError("fraction must be non-negative")
    rng = np.random.default_rng(seeding.derive_seed(seed, seeding.AUGMENT))
    n = len(dataset.train)
    k = math.floor(fraction * n + 1e-9)
    chosen = sorted(rng.choice(n, size=k, replace=False).tolist()) if k else []
    samples = dict(dataset.samples)
    augmented = dict(dataset.augmented)
    new_ids = []
    for j in chosen:
        src = samples[dataset.train[j]]
        voxel = float(rng.uniform(*AUG_VOXEL))
        cloud = voxel_downsample(src.cloud, voxel)
        cloud = add_gaussian_noise(cloud, AUG_SIGMA, int(rng.integers(2**31)))
        sid = _aug_id(src.sample_id, samples)
        samples[sid] = Sample(sid, cloud, src.imu, src.label, src.episode_id, src.timestamp, src.pose,
                              src.sample_id)
        augmented[sid] = src.sample_id
        new_ids.append(sid)
    config = {**dataset.config, "augment": {"fraction": fraction, "seed": seed,
                                            "voxel_range": list(AUG_VOXEL), "sigma": AUG_SIGMA}}
    return Dataset(samples, list(dataset.train) + new_ids, list(dataset.test), augmented, config)


@dataclass
class CollectConfig:
    episodes: int = 40
    max_time: float = 180.0
    # share of episodes spawned facing a sampled obstacle (hard negatives)
    targeted_fraction: float = 0.3
    target_distance: tuple[float, float] = (4.0, 15.0)
    spacing: float = 1.0
    window: float = 3.0
    label_mode: str = "raw"
    prior_sigma: float = 0.05
    scan_period: float = 1.0
    lidar_rings: int = 32
    lidar_azimuth_steps: int = 256
    lidar_range: float = 12.0
    footprint: tuple[float, float, float] = (1.0, 0.67, 1.0)

    @classmethod
    def from_dict(cls, data: dict) -> CollectConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown collect config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.target_distance = tuple(cfg.target_distance)
        cfg.footprint = tuple(cfg.footprint)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_distance"] = list(self.target_distance)
        d["footprint"] = list(self.footprint)
        return d

    def episode_config(self) -> EpisodeConfig:
        lidar = LidarConfig(rings=self.lidar_rings, azimuth_steps=self.lidar_azimuth_steps, max_range=self.lidar_range)
        return EpisodeConfig(max_time=self.max_time, scan_period=self.scan_period, lidar=lidar)


def _inside(world: World, x: float, y: float, margin: float) -> bool:
    return abs(x) <= world.half - margin and abs(y) <= world.half - margin


def spawn_pose(world: World, cfg: CollectConfig, index: int, seed: int) -> tuple[Pose, bool]:
    """Start pose for episode ``index``; the bool says whether it aims at an obstacle."""
    rng = seeding.derive_rng(seed, seeding.EPISODE, index, 0)
    rcfg = RobotConfig()
    travel = cfg.max_time * rcfg.speed * rcfg.slip_cap + 2.0
    margin = cfg.lidar_range + 2.0
    n_targeted = int(round(cfg.targeted_fraction * cfg.episodes))
    # spread targeted episodes evenly through the index range
    targeted = n_targeted > 0 and (index * n_targeted) // cfg.episodes != ((index + 1) * n_targeted) // cfg.episodes
    tall = [o for o in world.obstacles if o.height_above_ground > rcfg.clearance]
    if targeted and tall:
        for _ in range(200):
            obs = tall[int(rng.integers(len(tall)))]
            yaw = float(rng.uniform(-math.pi, math.pi))
            d = float(rng.uniform(*cfg.target_distance)) + obs.radius_xy
            x = obs.center[0] - d * math.cos(yaw)
            y = obs.center[1] - d * math.sin(yaw)
            if not _inside(world, x, y, margin):
                continue
            pose = place_robot(world, x, y, yaw, rcfg)
            if not footprint_collides(world, pose, rcfg):
                return pose, True
    for _ in range(1000):
        yaw = float(rng.uniform(-math.pi, math.pi))
        x, y = rng.uniform(-world.half + margin, world.half - margin, size=2)
        ex, ey = x + travel * math.cos(yaw), y + travel * math.sin(yaw)
        if not _inside(world, ex, ey, margin):
            continue
        pose = place_robot(world, float(x), float(y), yaw, rcfg)
        if not footprint_collides(world, pose, rcfg):
            return pose, False
    raise RuntimeError("could not find a collision-free spawn pose; world too small or too cluttered")


_WORLD_CACHE: dict[str, World] = {}


def _world_for(world_cfg: dict) -> World:
    key = json.dumps(world_cfg, sort_keys=True)
    if key not in _WORLD_CACHE:
        _WORLD_CACHE.clear()
        _WORLD_CACHE[key] = build_world(WorldConfig.from_dict(world_cfg))
    return _WORLD_CACHE[key]


def collect_episode(world: World, cfg: CollectConfig, index: int, seed: int) -> tuple[Episode, list[Sample], bool]:
    """Run episode ``index`` and cut its samples; deterministic in (world, cfg, index, seed)."""
    pose, targeted = spawn_pose(world, cfg, index, seed)
    episode = run_episode(world, pose, cfg.episode_config(), seeding.derive_seed(seed, seeding.EPISODE, index, 1),
                          episode_id=index)
    samples = extract_samples(
        episode, world, Footprint(cfg.footprint), cfg.spacing, cfg.window, cfg.label_mode, cfg.prior_sigma,
        seeding.derive_seed(seed, seeding.EXTRACT, index),
    )
    return episode, samples, targeted


def _collect_worker(args):
    world_cfg, cfg_dict, index, seed = args
    cfg = CollectConfig.from_dict(cfg_dict)
    episode, samples, targeted = collect_episode(_world_for(world_cfg), cfg, index, seed)
    episode.scans = []  # scans are bulky and not needed downstream
    return episode, samples, targeted


def collect(world: World, cfg: CollectConfig = CollectConfig(), seed: int = 0, parallel: int = 1,
            progress=None) -> tuple[list[Episode], list[Sample], dict]:
    """Run ``cfg.episodes`` episodes, optionally over ``parallel`` worker processes.

    Results are ordered by episode index, so the output does not depend on
    the worker count.
    """
    if cfg.episodes < 1:
        raise ValueError("need at least one episode")
    jobs = [(world.config.to_dict(), cfg.to_dict(), i, seed) for i in range(cfg.episodes)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = []
            for r in pool.map(_collect_worker, jobs):
                results.append(r)
                if progress:
                    progress(len(results), len(jobs))
    else:
        _WORLD_CACHE.clear()
        _WORLD_CACHE[json.dumps(world.config.to_dict(), sort_keys=True)] = world
        results = []
        for job in jobs:
            results.append(_collect_worker(job))
            if progress:
                progress(len(results), len(jobs))
    episodes = [r[0] for r in results]
    samples = [s for r in results for s in r[1]]
    stats = {
        "episodes": len(episodes),
        "targeted": [r[0].episode_id for r in results if r[2]],
        "final_status": {str(e.episode_id): e.final_status for e in episodes},
        "samples": len(samples),
    }
    return episodes, samples, stats


def build_dataset(samples, test_ratio: float = 0.2, seed: int = 0, config: dict | None = None) -> Dataset:
    ds = split_by_episode(samples, test_ratio, seed)
    if config:
        ds.config.update(config)
    return ds
