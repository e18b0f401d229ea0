"""Point cloud container and the per-point operations every stage shares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose

DEFAULT_FOOTPRINT = (1.0, 0.67, 1.0)


def _freeze(arr):
    if arr is not None:
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable set of 3D points with optional unit normals and curvature."""

    points: np.ndarray
    normals: np.ndarray | None = None
    curvature: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(pts)
        normals = self.normals
        if normals is not None:
            normals = np.array(normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != n:
                raise ValueError(f"normals length {len(normals)} != points length {n}")
            norms = np.linalg.norm(normals, axis=1)
            if n and np.max(np.abs(norms - 1.0)) > 1e-6:
                raise ValueError("normals must be unit vectors")
        curv = self.curvature
        if curv is not None:
            curv = np.array(curv, dtype=np.float64).reshape(-1)
            if len(curv) != n:
                raise ValueError(f"curvature length {len(curv)} != points length {n}")
        object.__setattr__(self, "points", _freeze(pts))
        object.__setattr__(self, "normals", _freeze(normals))
        object.__setattr__(self, "curvature", _freeze(curv))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_features(self) -> bool:
        return self.normals is not None and self.curvature is not None

    def subset(self, index) -> PointCloud:
        return PointCloud(
            self.points[index],
            None if self.normals is None else self.normals[index],
            None if self.curvature is None else self.curvature[index],
        )

    def with_points(self, points: np.ndarray) -> PointCloud:
        return PointCloud(points, self.normals, self.curvature)

    @classmethod
    def concat(cls, clouds) -> PointCloud:
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls(np.zeros((0, 3)))
        keep_n = all(c.normals is not None for c in clouds)
        keep_c = all(c.curvature is not None for c in clouds)
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.normals for c in clouds]) if keep_n else None,
            np.concatenate([c.curvature for c in clouds]) if keep_c else None,
        )


@dataclass(frozen=True)
class Footprint:
    """Full side lengths (dx, dy, dz) of an oriented crop box, in meters."""

    extents: tuple[float, float, float] = DEFAULT_FOOTPRINT

    def __post_init__(self):
        ext = tuple(float(v) for v in self.extents)
        if len(ext) != 3 or min(ext) <= 0:
            raise ValueError(f"footprint extents must be three positive values, got {ext}")
        object.__setattr__(self, "extents", ext)

    @property
    def half(self) -> np.ndarray:
        return np.asarray(self.extents) / 2.0

    def scaled(self, dx: float) -> Footprint:
        """Footprint with the same aspect ratio and the given x extent."""
        k = dx / self.extents[0]
        return Footprint(tuple(e * k for e in self.extents))


def in_box_mask(points: np.ndarray, center: Pose, half_extents) -> np.ndarray:
    local = (np.asarray(points) - center.position) @ center.rotation
    return np.all(np.abs(local) <= np.asarray(half_extents), axis=1)


def crop_box(cloud: PointCloud, center: Pose, footprint: Footprint = Footprint()) -> PointCloud:
    """Points inside the oriented box ``footprint`` placed at ``center``.

    The returned points keep their original coordinates.
    """
    return cloud.subset(in_box_mask(cloud.points, center, footprint.half))


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    rot = pose.rotation
    pts = cloud.points @ rot.T + pose.position
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ rot.T
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals, cloud.curvature)


def to_frame(cloud: PointCloud, frame: Pose) -> PointCloud:
    """Express ``cloud`` in the local coordinates of ``frame``."""
    return transform_cloud(cloud, frame.inverse())


def normalize_unit_sphere(cloud: PointCloud) -> tuple[PointCloud, np.ndarray, float]:
    """Center on the mean point and scale so the farthest point has norm 1."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    centroid = cloud.points.mean(axis=0)
    centered = cloud.points - centroid
    scale = float(np.max(np.linalg.norm(centered, axis=1)))
    # a spread at round-off level (e.g. repeated points) counts as zero
    if scale <= 1e-12 * max(1.0, float(np.max(np.abs(cloud.points)))):
        centered = np.zeros_like(centered)
        scale = 1.0
    return cloud.with_points(centered / scale), centroid, scale


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the members of each occupied voxel by their centroid.

    The grid is anchored at the origin (cell index ``floor(coord / voxel)``).
    Normals and curvature, when present, are averaged per cell.
    """
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    if float(np.prod(span.astype(np.float64))) < 2.0 ** 62:
        # row-major linear index sorts exactly like the rows themselves
        flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
        _, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    else:
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_cells = len(counts)

    def _mean(values):
        cols = values.reshape(len(values), -1)
        out = np.stack([np.bincount(inverse, cols[:, j], n_cells) for j in range(cols.shape[1])], axis=1)
        return out.reshape((n_cells,) + values.shape[1:]) / counts.reshape((-1,) + (1,) * (values.ndim - 1))

    pts = _mean(cloud.points)
    normals = None
    if cloud.normals is not None:
        normals = _mean(cloud.normals)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        degenerate = norm[:, 0] < 1e-12
        normals[degenerate] = (0.0, 0.0, 1.0)
        norm[degenerate] = 1.0
        normals /= norm
    curv = None if cloud.curvature is None else _mean(cloud.curvature)
    return PointCloud(pts, normals, curv)


def add_gaussian_noise(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return cloud.with_points(cloud.points.copy())
    rng = np.random.default_rng(seed)
    return cloud.with_points(cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape))


def estimate_features(cloud: PointCloud, k: int = 16) -> PointCloud:
    """Per-point normal and surface variation from a k-nearest-neighbour PCA.

    Normals are oriented with a non-negative z component; curvature is
    ``l0 / (l0 + l1 + l2)`` for ascending covariance eigenvalues.  A zero
    covariance gives normal (0, 0, 1) and curvature 0.
    """
    if k < 3:
        raise ValueError(f"k must be at least 3, got {k}")
    n = len(cloud)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    pts = cloud.points
    _, idx = cKDTree(pts).query(pts, k=k)
    neigh = pts[idx.reshape(n, k)]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    normals = evecs[:, :, 0].copy()
    normals[normals[:, 2] < 0] *= -1.0
    total = evals.sum(axis=1)
    scale = np.max(np.abs(centered), axis=(1, 2))
    degenerate = (total <= 1e-30) | (scale <= 1e-15)
    curv = np.where(degenerate, 0.0, evals[:, 0] / np.where(degenerate, 1.0, total))
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals, curv)


def resample_fixed(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Exactly ``n`` points: subsample without replacement, or pad by redrawing.

    When padding, every input point is kept once and the remainder is drawn
    with replacement.
    """
    m = len(cloud)
    if m == 0:
        raise ValueError("empty cloud")
    rng = np.random.default_rng(seed)
    if m >= n:
        idx = rng.choice(m, size=n, replace=False)
    else:
        idx = np.concatenate([rng.permutation(m), rng.integers(0, m, size=n - m)])
    return cloud.subset(idx)
