"""Robot-centric dense local map built by ICP-aligning successive scans."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .cloud import PointCloud, in_box_mask, transform_cloud, to_frame, voxel_downsample
from .geometry import Pose
from .io import write_ply

DEFAULT_CROP = ((-10.0, -10.0, -5.0), (10.0, 10.0, 5.0))


class IcpResult(NamedTuple):
    pose: Pose
    rmse: float
    converged: bool
    iterations: int
    rmse_history: list[float]


class PriorTooFar(ValueError):
    pass


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform (R, t) with ``R @ src + t ~= dst``."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cd - rot @ cs


class SurfaceNormals:
    """PCA normals of a target cloud, computed lazily for the points ICP touches.

    Lidar rings leave line-like neighbourhoods whose "normal" is arbitrary;
    those are flagged unusable by a small middle eigenvalue relative to the
    largest.
    """

    def __init__(self, points: np.ndarray, tree: cKDTree, k: int = 12, min_spread: float = 0.1):
        self.points, self.tree = points, tree
        self.k, self.min_spread = min(k, len(points)), min_spread
        self.normals = np.zeros((len(points), 3))
        self.usable = np.zeros(len(points), dtype=bool)
        self.done = np.zeros(len(points), dtype=bool)

    def at(self, index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        todo = np.unique(index[~self.done[index]])
        if len(todo):
            _, nb = self.tree.query(self.points[todo], k=self.k)
            neigh = self.points[nb]
            centered = neigh - neigh.mean(axis=1, keepdims=True)
            evals, evecs = np.linalg.eigh(np.einsum("nki,nkj->nij", centered, centered) / self.k)
            self.normals[todo] = evecs[:, :, 0]
            self.usable[todo] = evals[:, 1] >= self.min_spread * np.maximum(evals[:, 2], 1e-30)
            self.done[todo] = True
        return self.normals[index], self.usable[index]


def plane_step(src: np.ndarray, dst: np.ndarray, normals: np.ndarray, rcond: float = 0.1):
    """Linearized point-to-plane update (R, t) for matched pairs.

    Directions the surfaces do not constrain (sliding along a plane) are cut
    by the truncated least-squares solve and left unchanged.
    """
    # linearize about the centroid so rotations and translations decouple
    c = src.mean(axis=0)
    a = np.hstack([np.cross(src - c, normals), normals])
    b = np.einsum("ij,ij->i", dst - src, normals)
    # one length scale for the rotation block; per-column scaling would inflate the
    # near-empty columns of unconstrained directions
    arm = max(float(np.sqrt(np.mean(np.sum((src - c) ** 2, axis=1)))), 1e-9)
    scale = np.array([arm, arm, arm, 1.0, 1.0, 1.0])
    x, *_ = np.linalg.lstsq(a / scale, b, rcond=rcond)
    x /= scale
    rot = Rotation.from_rotvec(x[:3]).as_matrix()
    return rot, c + x[3:] - rot @ c


def icp_align(source: PointCloud, target: PointCloud, init: Pose = Pose(), max_iter: int = 30,
              corr_dist: float = 1.0, tol: float = 1e-6, target_tree: cKDTree | None = None,
              metric: str = "point") -> IcpResult:
    """ICP returning the source-to-target transform.

    ``metric="point"`` is point-to-point with the closed-form SVD update.
    ``metric="plane"`` measures residuals along target normals estimated
    by PCA, which keeps flat ground from pulling the scan sideways.

    The reported rmse is the truncated residual ``sqrt(mean(min(d, corr_dist)^2))``
    over all source points; steps that would raise it are refused, so the
    history never increases.
    """
    if metric not in ("point", "plane"):
        raise ValueError(f"unknown ICP metric {metric!r}")
    if len(source) < 10 or len(target) < 10:
        raise ValueError("ICP needs at least 10 points in both clouds")
    tree = target_tree if target_tree is not None else cKDTree(target.points)
    surf = SurfaceNormals(target.points, tree) if metric == "plane" else None
    src = source.points
    rot = init.rotation.copy()
    trans = init.position.copy()
    cap2 = corr_dist * corr_dist

    def residuals(r, t):
        moved = src @ r.T + t
        dist, idx = tree.query(moved, k=1, distance_upper_bound=corr_dist)
        inlier = np.isfinite(dist)
        if surf is not None:
            dist = dist.copy()
            normals, _ = surf.at(idx[inlier])
            dist[inlier] = np.abs(np.einsum("ij,ij->i", moved[inlier] - target.points[idx[inlier]], normals))
        err = float(np.sqrt(np.mean(np.minimum(np.where(inlier, dist, corr_dist) ** 2, cap2))))
        return moved, idx, inlier, err

    moved, idx, inlier, rmse = residuals(rot, trans)
    if not np.any(inlier):
        raise PriorTooFar("prior too far")
    history = [rmse]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if inlier.sum() < 3:
            break
        if surf is None:
            d_rot, d_trans = kabsch(moved[inlier], target.points[idx[inlier]])
        else:
            normals, usable = surf.at(idx[inlier])
            if usable.sum() < 6:
                break
            pairs = np.flatnonzero(inlier)[usable]
            d_rot, d_trans = plane_step(moved[pairs], target.points[idx[pairs]], normals[usable])
        new_rot = d_rot @ rot
        new_trans = d_rot @ trans + d_trans
        new_moved, new_idx, new_inlier, new_rmse = residuals(new_rot, new_trans)
        if new_rmse > rmse:
            # numerical noise only; keep the better estimate
            converged = True
            break
        rot, trans, moved, idx, inlier = new_rot, new_trans, new_moved, new_idx, new_inlier
        change = rmse - new_rmse
        rmse = new_rmse
        history.append(rmse)
        if rmse < 1e-12 or change <= tol * max(history[-2], 1e-300):
            converged = True
            break
    return IcpResult(Pose.from_matrix(rot, trans), rmse, converged, it, history)


@dataclass
class LocalMap:
    """Rolling dense map held in a fixed local-world frame."""

    cloud: PointCloud | None = None
    robot_pose: Pose | None = None
    crop_min: tuple[float, float, float] = DEFAULT_CROP[0]
    crop_max: tuple[float, float, float] = DEFAULT_CROP[1]
    max_points: int = 400_000
    sensor_offset: Pose = field(default_factory=Pose)
    condense_voxel: float = 0.05
    icp_voxel: float = 0.2
    icp_max_iter: int = 30
    icp_corr_dist: float = 1.0
    icp_tol: float = 1e-6
    icp_metric: str = "plane"
    max_rmse: float = 0.3
    log: list[dict] = field(default_factory=list)

    @property
    def initialized(self) -> bool:
        return self.cloud is not None

    def _bounds_frame(self, pose: Pose):
        lo = np.asarray(self.crop_min, dtype=np.float64)
        hi = np.asarray(self.crop_max, dtype=np.float64)
        center = (lo + hi) / 2.0
        frame = pose.heading_frame()
        return frame.compose(Pose(center)), (hi - lo) / 2.0

    def integrate(self, scan: PointCloud, prior: Pose, t: float | None = None) -> LocalMap:
        """Register a sensor-frame scan taken at robot pose ``prior`` and merge it."""
        sensor_scan = transform_cloud(scan, self.sensor_offset)
        if not self.initialized:
            refined, rmse, converged = prior, 0.0, True
            merged = transform_cloud(sensor_scan, prior)
        else:
            world_scan = transform_cloud(sensor_scan, prior)
            src = voxel_downsample(world_scan, self.icp_voxel) if self.icp_voxel else world_scan
            # only register against the region the map already covers; points past its
            # edge would otherwise drag the scan backwards into coverage
            frame, half = self._bounds_frame(self.robot_pose)
            src = src.subset(in_box_mask(src.points, frame, np.maximum(half - self.icp_corr_dist, 0.0)))
            try:
                res = icp_align(src, self.cloud, Pose(), self.icp_max_iter, self.icp_corr_dist, self.icp_tol,
                                metric=self.icp_metric)
                ok = res.converged or res.rmse <= self.max_rmse
                correction = res.pose
                rmse, converged = res.rmse, ok
            except ValueError:
                correction, rmse, converged = Pose(), float("nan"), False
            if converged:
                refined = correction.compose(prior)
                merged = PointCloud.concat([self.cloud, transform_cloud(world_scan, correction)])
            else:
                refined = prior
                merged = PointCloud.concat([self.cloud, world_scan])
        merged = PointCloud(merged.points)
        merged = voxel_downsample(merged, self.condense_voxel)
        frame, half = self._bounds_frame(refined)
        merged = merged.subset(in_box_mask(merged.points, frame, half))
        if len(merged) > self.max_points:
            d = np.linalg.norm(merged.points - refined.position, axis=1)
            merged = merged.subset(np.sort(np.argsort(d, kind="stable")[: self.max_points]))
        self.cloud = merged
        self.robot_pose = refined
        self.log.append({
            "t": t, "prior": prior.to_list(), "refined": refined.to_list(),
            "rmse": None if not np.isfinite(rmse) else rmse, "converged": bool(converged),
        })
        return self

    def crop_local(self) -> PointCloud:
        """Map points inside the crop bounds, in the robot's heading frame."""
        if not self.initialized:
            raise ValueError("local map is not initialized")
        frame = self.robot_pose.heading_frame()
        local = to_frame(self.cloud, frame)
        lo = np.asarray(self.crop_min)
        hi = np.asarray(self.crop_max)
        keep = np.all((local.points >= lo) & (local.points <= hi), axis=1)
        return local.subset(keep)

    def export(self, path) -> None:
        if not self.initialized:
            raise ValueError("local map is not initialized")
        write_ply(path, self.cloud)

    def write_log(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log))


def integrate_scan(local_map: LocalMap, scan: PointCloud, prior: Pose, t: float | None = None) -> LocalMap:
    return local_map.integrate(scan, prior, t)


def crop_local(local_map: LocalMap) -> PointCloud:
    return local_map.crop_local()

