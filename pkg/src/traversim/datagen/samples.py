"""Labelled footprint samples: extraction from episodes and on-disk format."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..cloud import Footprint, PointCloud, crop_box, estimate_features, in_box_mask, to_frame
from ..geometry import Pose
from ..io import CloudFormatError, atomic_write_bytes, cloud_from_table, ply_bytes, read_ply_table
from ..mapping import LocalMap
from ..simworld.lidar import LidarConfig, simulate_scan
from ..simworld.robot import MOVING, Episode, Scan
from ..simworld.world import World
from .labels import DEFAULT_WINDOW, ImuFeature, actual_distance, imu_feature, nominal_distance, traversability_label

_NAME = re.compile(r"^(?P<id>ep\d{4,}_t\d{7,}(?:_aug\d*)?)_l(?P<label>\d\.\d{3})$")


def make_sample_id(episode_id: int, t: float) -> str:
    return f"ep{episode_id:04d}_t{int(round(t * 1000)):07d}"


@dataclass(frozen=True)
class Sample:
    sample_id: str
    cloud: PointCloud          # footprint crop, metric, crop (heading) frame
    imu: ImuFeature
    label: float
    episode_id: int
    timestamp: float
    pose: Pose                 # robot pose in the world/map frame
    source_id: str | None = None

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValueError("sample cloud must be non-empty")
        label = round(float(self.label), 3)
        if not 0.0 <= label <= 1.0:
            raise ValueError(f"label {self.label} outside [0, 1]")
        object.__setattr__(self, "label", label)

    @property
    def stem(self) -> str:
        return f"{self.sample_id}_l{self.label:.3f}"


def write_sample(sample: Sample, directory) -> Path:
    """Write ``<stem>.ply`` and ``<stem>.imu.txt``; returns the PLY path."""
    directory = Path(directory)
    comments = [
        f"episode {sample.episode_id}",
        f"timestamp {sample.timestamp!r}",
        "pose " + " ".join(repr(v) for v in sample.pose.to_list()),
    ]
    if sample.source_id:
        comments.append(f"source {sample.source_id}")
    ply = directory / f"{sample.stem}.ply"
    atomic_write_bytes(ply, ply_bytes(sample.cloud, binary=True, comments=comments))
    sidecar = directory / f"{sample.stem}.imu.txt"
    atomic_write_bytes(sidecar, (" ".join(repr(float(v)) for v in sample.imu.vector) + "\n").encode())
    return ply


def _parse_stem(path: Path) -> tuple[str, float]:
    name = path.name
    for suffix in (".imu.txt", ".ply"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    m = _NAME.match(name)
    if not m:
        raise CloudFormatError(f"{path}: file name does not encode sample id and label")
    return m.group("id"), float(m.group("label"))


def read_sample(path) -> Sample:
    path = Path(path)
    sample_id, label = _parse_stem(path)
    stem = f"{sample_id}_l{label:.3f}"
    ply = path.with_name(stem + ".ply")
    sidecar = path.with_name(stem + ".imu.txt")
    table, comments = read_ply_table(ply)
    cloud = cloud_from_table(table)
    meta = {}
    for c in comments:
        key, _, rest = c.partition(" ")
        meta[key] = rest
    try:
        episode_id = int(meta["episode"])
    except (KeyError, ValueError) as exc:
        raise CloudFormatError(f"{ply}: missing or bad 'episode' comment") from exc
    try:
        timestamp = float(meta["timestamp"])
    except (KeyError, ValueError) as exc:
        raise CloudFormatError(f"{ply}: missing or bad 'timestamp' comment") from exc
    try:
        pose = Pose.from_list(float(v) for v in meta["pose"].split())
    except (KeyError, ValueError) as exc:
        raise CloudFormatError(f"{ply}: missing or bad 'pose' comment") from exc
    if not sidecar.exists():
        raise CloudFormatError(f"{sidecar}: missing IMU sidecar")
    tokens = sidecar.read_text().split()
    if len(tokens) != 13:
        raise CloudFormatError(f"{sidecar}: expected 13 IMU values, found {len(tokens)}")
    try:
        imu = ImuFeature.from_vector([float(v) for v in tokens])
    except ValueError as exc:
        raise CloudFormatError(f"{sidecar}: bad IMU values ({exc})") from exc
    return Sample(sample_id, cloud, imu, label, episode_id, timestamp, pose, meta.get("source"))


def rescan_episode(episode: Episode, world: World, lidar: LidarConfig, period: float = 1.0,
                   seed: int = 0) -> list[Scan]:
    """Re-simulate scans along a recorded trajectory (for dumps without scans)."""
    scans = []
    rng = np.random.default_rng(np.random.SeedSequence([seed, episode.episode_id, 0x5C]))
    next_t = episode.times[0]
    for i, t in enumerate(episode.times):
        if t + 1e-9 < next_t:
            continue
        pose = episode.pose_at(i)
        cloud = simulate_scan(world, pose.compose(episode.sensor_offset), lidar, int(rng.integers(2**31)))
        scans.append(Scan(float(t), pose, cloud))
        next_t = t + period
    return scans


@dataclass(frozen=True)
class ExtractConfig:
    footprint: Footprint = Footprint()
    spacing: float = 1.0
    window: float = DEFAULT_WINDOW
    label_mode: str = "raw"
    prior_sigma: float = 0.05


def build_map_sequence(episode: Episode, prior_sigma: float, seed: int):
    """Yield (scan index, LocalMap) as scans are integrated with noisy priors."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, episode.episode_id, 0x3A]))
    local = LocalMap(sensor_offset=episode.sensor_offset)
    for k, scan in enumerate(episode.scans):
        noise = rng.normal(0.0, prior_sigma, size=3) if prior_sigma > 0 else np.zeros(3)
        prior = Pose(scan.pose.position + noise, scan.pose.orientation)
        local.integrate(scan.cloud, prior, scan.time)
        yield k, local


FEATURE_MARGIN = 0.3


def crop_with_features(cloud: PointCloud, frame: Pose, footprint: Footprint, margin: float = FEATURE_MARGIN,
                       k: int = 16) -> PointCloud:
    """Footprint crop whose normals/curvature come from a slightly larger neighbourhood.

    Estimating features on the padded crop keeps the box boundary from
    distorting the neighbourhoods of edge points.
    """
    padded = crop_box(cloud, frame, Footprint(tuple(e + 2.0 * margin for e in footprint.extents)))
    if len(padded) < 3:
        return crop_box(cloud, frame, footprint)
    feats = estimate_features(padded, k=min(k, len(padded)))
    return feats.subset(in_box_mask(feats.points, frame, footprint.half))


def _sample_at(episode: Episode, i: int, local: LocalMap, cfg: ExtractConfig) -> Sample | None:
    pose = episode.pose_at(i)
    frame = pose.heading_frame()
    crop = crop_with_features(local.cloud, frame, cfg.footprint)
    if len(crop) == 0:
        return None
    t0 = float(episode.times[i])
    d_n = nominal_distance(episode.wheel_radius, episode.w1[i], episode.w2[i], cfg.window)
    d_a = actual_distance(episode, t0, cfg.window)
    label = traversability_label(d_n, d_a, cfg.label_mode)
    return Sample(
        make_sample_id(episode.episode_id, t0), to_frame(crop, frame), imu_feature(episode, t0, cfg.window),
        label, episode.episode_id, t0, pose,
    )


def extract_samples(episode: Episode, world: World | None = None, footprint: Footprint = Footprint(),
                    spacing: float = 1.0, window: float = DEFAULT_WINDOW, label_mode: str = "raw",
                    prior_sigma: float = 0.05, seed: int = 0,
                    lidar: LidarConfig | None = None) -> list[Sample]:
    """Walk an episode and cut labelled footprint samples from the rolling local map.

    A sample is emitted whenever the robot has covered ``spacing`` meters since
    the previous one and at least ``window`` seconds have passed.  A stuck or
    tipped episode additionally yields one sample at its final record.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    cfg = ExtractConfig(footprint, spacing, window, label_mode, prior_sigma)
    if not episode.scans:
        if world is None:
            raise ValueError("episode has no scans; pass the world to re-simulate them")
        episode = replace(episode, scans=rescan_episode(episode, world, lidar or LidarConfig(
            rings=32, azimuth_steps=256, max_range=12.0), seed=seed))
    scan_times = np.array([s.time for s in episode.scans])
    maps = build_map_sequence(episode, prior_sigma, seed)
    local = None
    n_done = 0
    samples: list[Sample] = []
    travelled = 0.0
    t_start = float(episode.times[0])
    last_i = len(episode.times) - 1
    for i in range(len(episode.times)):
        t = float(episode.times[i])
        while n_done < len(scan_times) and scan_times[n_done] <= t + 1e-9:
            _, local = next(maps)
            n_done += 1
        if i > 0:
            travelled += float(np.linalg.norm(episode.positions[i] - episode.positions[i - 1]))
        if local is None:
            continue
        if travelled >= spacing - 1e-9 and t - t_start >= window - 1e-9:
            s = _sample_at(episode, i, local, cfg)
            if s is not None:
                samples.append(s)
                travelled = 0.0
    if episode.statuses[-1] != MOVING and local is not None and episode.times[-1] - t_start >= window - 1e-9:
        if not samples or samples[-1].timestamp != float(episode.times[last_i]):
            s = _sample_at(episode, last_i, local, cfg)
            if s is not None:
                samples.append(s)
    return samples
