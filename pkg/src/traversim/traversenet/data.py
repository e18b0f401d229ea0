"""Turning samples into fixed-size network inputs."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from ..cloud import PointCloud, estimate_features, normalize_unit_sphere, resample_fixed
from .arch import FEATURE_COLUMNS, ArchConfig

FEATURE_K = 16


def point_block(cloud: PointCloud, n_points: int, seed: int) -> np.ndarray:
    """(n_points, 7) block of [x y z nx ny nz curvature] in the unit sphere.

    Normals and curvature are taken from the cloud when present, otherwise
    estimated on the metric crop; coordinates are normalized after resampling.
    """
    m = len(cloud)
    if cloud.has_features:
        feats = cloud
    elif m >= 3:
        feats = estimate_features(cloud, k=min(FEATURE_K, m))
    else:
        normals = np.tile([0.0, 0.0, 1.0], (m, 1))
        feats = PointCloud(cloud.points, normals, np.zeros(m))
    sampled = resample_fixed(feats, n_points, seed)
    unit, _, _ = normalize_unit_sphere(sampled)
    return np.column_stack([unit.points, unit.normals, unit.curvature]).astype(np.float32)


def sample_seed(sample_id: str, seed: int = 0) -> int:
    return (zlib.crc32(sample_id.encode()) ^ (seed * 0x9E3779B1)) & 0x7FFFFFFF


@dataclass
class Prepared:
    ids: list[str]
    blocks: np.ndarray   # (S, n, 7) float32
    imu: np.ndarray      # (S, 13)
    labels: np.ndarray   # (S,)

    def __len__(self) -> int:
        return len(self.ids)

    def points_for(self, arch: ArchConfig) -> np.ndarray:
        return self.blocks[:, :, FEATURE_COLUMNS[arch.point_features]]

    def subset(self, index) -> Prepared:
        index = np.asarray(index)
        return Prepared([self.ids[i] for i in index], self.blocks[index], self.imu[index], self.labels[index])


def prepare(samples, n_points: int = 256, seed: int = 0) -> Prepared:
    """Resample, normalize and featurize samples into arrays."""
    samples = list(samples)
    blocks = np.zeros((len(samples), n_points, 7), dtype=np.float32)
    for i, s in enumerate(samples):
        blocks[i] = point_block(s.cloud, n_points, sample_seed(s.sample_id, seed))
    imu = np.array([s.imu.vector for s in samples], dtype=np.float32).reshape(len(samples), 13)
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return Prepared([s.sample_id for s in samples], blocks, imu, labels)
