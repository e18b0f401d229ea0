"""Box-wise traversability inference over a local map, with overlap fusion and colored export."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import Footprint, PointCloud, estimate_features
from .io import atomic_write_bytes, write_ply
from .traversenet.arch import FEATURE_COLUMNS
from .traversenet.data import point_block, sample_seed
from .traversenet.model import NetworkParams, predict

DEFAULT_BOUNDS = ((-5.0, -5.0, -2.5), (5.0, 5.0, 2.5))
UNKNOWN_RGB = (128, 128, 128)


@dataclass(frozen=True)
class Grid:
    """Axis-aligned lattice of box centers ``origin + k * stride`` per axis."""

    origin: np.ndarray
    stride: np.ndarray
    shape: tuple[int, int, int]
    footprint: Footprint
    mode: str

    @property
    def centers(self) -> np.ndarray:
        axes = [self.origin[a] + self.stride[a] * np.arange(self.shape[a]) for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([x.ravel() for x in g], axis=1)

    def __len__(self) -> int:
        return int(np.prod(self.shape))


def make_grid(bounds, footprint: Footprint = Footprint(), mode: str = "overlapping", stride: float = 0.25) -> Grid:
    """Box centers covering ``bounds`` = ((x0, y0, z0), (x1, y1, z1)).

    Tiled boxes are laid edge to edge from the lower corner and partition the
    volume.  Overlapping boxes step by ``stride`` on every axis, starting far
    enough outside the bounds that every interior point sits in a full
    complement of boxes.
    """
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise ValueError(f"degenerate bounds {bounds}")
    ext = np.asarray(footprint.extents)
    if mode == "tiled":
        steps = ext
        n = np.ceil((hi - lo) / ext - 1e-9).astype(int)
        origin = lo + ext / 2.0
    elif mode == "overlapping":
        if not 0 < stride < min(footprint.extents):
            raise ValueError(f"overlapping stride must lie in (0, {min(footprint.extents)}), got {stride}")
        steps = np.full(3, float(stride))
        half = ext / 2.0
        # first center whose box still reaches lo, last one still reaching hi
        k0 = np.floor(-half / stride) + 1
        origin = lo + k0 * stride
        n = np.floor((hi + half - origin) / stride - 1e-12).astype(int) + 1
    else:
        raise ValueError(f"unknown grid mode {mode!r}")
    return Grid(origin, steps, tuple(int(v) for v in n), footprint, mode)


@dataclass
class TraversabilityMap:
    centers: np.ndarray          # (K, 3) box centers, robot-centric frame
    costs: np.ndarray            # (K,)
    point_counts: np.ndarray     # (K,)
    footprint: Footprint
    mode: str
    n_discarded: int
    # CSR membership: points of box j are member_index[member_offsets[j]:member_offsets[j + 1]]
    member_index: np.ndarray
    member_offsets: np.ndarray
    n_points: int
    fused: np.ndarray | None = None
    timing_ms: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.costs)

    def members(self, j: int) -> np.ndarray:
        return self.member_index[self.member_offsets[j]:self.member_offsets[j + 1]]

    def point_costs(self) -> np.ndarray:
        """Per-point cost (NaN where unknown): fused if available, else the covering tile."""
        if self.fused is not None:
            return self.fused
        out = np.full(self.n_points, np.nan)
        owner = np.repeat(np.arange(len(self.costs)), np.diff(self.member_offsets))
        out[self.member_index] = self.costs[owner]
        return out

    def summary(self, bins: int = 10) -> dict:
        counts, edges = np.histogram(self.costs, bins=bins, range=(0.0, 1.0))
        return {
            "mode": self.mode,
            "n_boxes": int(len(self.costs)),
            "n_discarded": int(self.n_discarded),
            "cost_histogram": {"edges": [round(float(e), 6) for e in edges], "counts": counts.tolist()},
            "timing_ms": {k: round(float(v), 3) for k, v in self.timing_ms.items()},
        }


def box_members(points: np.ndarray, grid: Grid, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """(box id, point index) pairs for every point inside a box; boxes are half-open ``[c-h, c+h)``."""
    half = np.asarray(grid.footprint.extents) / 2.0
    spans = [int(math.ceil(2.0 * half[a] / grid.stride[a])) + 2 for a in range(3)]
    out_box, out_pt = [], []
    for begin in range(0, len(points), chunk):
        pts = points[begin:begin + chunk]
        cand = []
        for a in range(3):
            s, o = grid.stride[a], grid.origin[a]
            p = pts[:, a][:, None]
            ks = np.floor((pts[:, a] - half[a] - o) / s).astype(int)[:, None] + np.arange(spans[a])[None, :]
            c = o + s * ks
            inside = (c - half[a] <= p) & (p < c + half[a]) & (ks >= 0) & (ks < grid.shape[a])
            cand.append((ks, inside))
        (kx, ix), (ky, iy), (kz, iz) = cand
        flat = (kx[:, :, None, None] * grid.shape[1] + ky[:, None, :, None]) * grid.shape[2] + kz[:, None, None, :]
        ok = ix[:, :, None, None] & iy[:, None, :, None] & iz[:, None, None, :]
        pidx = np.broadcast_to(np.arange(begin, begin + len(pts))[:, None, None, None], ok.shape)
        out_box.append(flat[ok])
        out_pt.append(pidx[ok])
    if not out_box:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(out_box), np.concatenate(out_pt)


def infer_map(params: NetworkParams, local: PointCloud, grid: Grid, imu=None, min_points: int = 3,
              seed: int = 0, batch_size: int = 256) -> TraversabilityMap:
    """Predict one cost per occupied box of ``grid``.

    Boxes holding fewer than ``min_points`` points are discarded.  Each kept
    box is resampled to the network's point count and normalized exactly as
    in training; the same IMU feature is used for every box.
    """
    if params.arch.uses_imu and imu is None:
        raise ValueError("this network needs the robot's IMU feature")
    if min_points < 1:
        raise ValueError("min_points must be at least 1")
    t0 = time.perf_counter()
    cloud = local
    if not cloud.has_features and len(cloud) >= 3:
        cloud = estimate_features(cloud, k=min(16, len(cloud)))
    t1 = time.perf_counter()
    box_id, pidx = box_members(cloud.points, grid)
    order = np.lexsort((pidx, box_id))
    box_id, pidx = box_id[order], pidx[order]
    uniq, start, counts = np.unique(box_id, return_index=True, return_counts=True)
    keep = counts >= min_points
    n_discarded = int(np.sum(~keep))
    uniq, start, counts = uniq[keep], start[keep], counts[keep]
    centers = grid.centers[uniq] if len(uniq) else np.zeros((0, 3))
    member_index = np.concatenate([pidx[s:s + c] for s, c in zip(start, counts)]) if len(uniq) else np.zeros(0, int)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)
    t2 = time.perf_counter()

    n_pts = params.arch.points_per_sample
    blocks = np.zeros((len(uniq), n_pts, 7), dtype=np.float32)
    for j, box in enumerate(uniq):
        sub = cloud.subset(member_index[offsets[j]:offsets[j + 1]])
        blocks[j] = point_block(sub, n_pts, sample_seed(f"box{int(box)}", seed))
    t3 = time.perf_counter()
    costs = np.zeros(0)
    if len(uniq):
        x = blocks[:, :, FEATURE_COLUMNS[params.arch.point_features]]
        imu_b = None
        if params.arch.uses_imu:
            imu_b = np.repeat(np.asarray(imu, dtype=np.float32).reshape(1, -1), len(uniq), axis=0)
        costs = predict(params, x, imu_b, batch_size)
    t4 = time.perf_counter()
    timing = {"features": (t1 - t0) * 1e3, "boxing": (t2 - t1) * 1e3, "preprocess": (t3 - t2) * 1e3,
              "network": (t4 - t3) * 1e3, "total": (t4 - t0) * 1e3}
    return TraversabilityMap(centers, costs, counts.astype(int), grid.footprint, grid.mode, n_discarded,
                             member_index.astype(int), offsets, len(local), None, timing)


def fuse_overlaps(tmap: TraversabilityMap) -> TraversabilityMap:
    """Per-point mean of the costs of every box containing the point; NaN where uncovered."""
    if tmap.mode != "overlapping":
        raise ValueError("nothing to fuse: map was built in tiled mode")
    t0 = time.perf_counter()
    owner = np.repeat(np.arange(len(tmap.costs)), np.diff(tmap.member_offsets))
    total = np.bincount(tmap.member_index, weights=tmap.costs[owner], minlength=tmap.n_points)
    hits = np.bincount(tmap.member_index, minlength=tmap.n_points)
    fused = np.full(tmap.n_points, np.nan)
    covered = hits > 0
    fused[covered] = total[covered] / hits[covered]
    timing = {**tmap.timing_ms, "fusion": (time.perf_counter() - t0) * 1e3}
    return replace(tmap, fused=fused, timing_ms=timing)


def cost_colors(costs) -> np.ndarray:
    """Blue (0) to green (0.5) to red (1); NaN maps to gray."""
    c = np.asarray(costs, dtype=np.float64)
    known = np.isfinite(c)
    t = np.clip(np.where(known, c, 0.0), 0.0, 1.0)
    r = np.where(t < 0.5, 0.0, 2.0 * t - 1.0)
    g = np.where(t < 0.5, 2.0 * t, 2.0 - 2.0 * t)
    b = np.where(t < 0.5, 1.0 - 2.0 * t, 0.0)
    rgb = np.rint(np.stack([r, g, b], axis=-1) * 255.0).astype(np.uint8)
    rgb[~known] = UNKNOWN_RGB
    return rgb


def export_colored(tmap: TraversabilityMap, local: PointCloud, path) -> None:
    """Colored PLY of the local cloud with a per-point ``cost`` property (NaN = unknown)."""
    if len(local) != tmap.n_points:
        raise ValueError("cloud does not match the map it was inferred from")
    costs = tmap.point_costs()
    write_ply(path, PointCloud(local.points), colors=cost_colors(costs),
              extra={"cost": costs.astype(np.float32)})


def write_summary(tmap: TraversabilityMap, path) -> None:
    atomic_write_bytes(path, (json.dumps(tmap.summary(), indent=1, sort_keys=True) + "\n").encode())
