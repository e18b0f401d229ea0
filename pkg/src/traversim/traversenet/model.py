"""Point/IMU fusion network with hand-derived forward and backward passes.

Layout: a per-point MLP (the same affine maps applied to every point),
channel-wise max pooling over points, an optional IMU branch, and a head
ending in a sigmoid.  Weight matrices are stored ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .arch import IMU_DIM, ArchConfig

_tokens = itertools.count(1)
_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


class StaleCacheError(RuntimeError):
    pass


class NetworkParams:
    """Named parameter tensors for one architecture.

    Instances are treated as immutable; every update produces a new object
    with a fresh ``token`` so caches from older parameters can be detected.
    """

    def __init__(self, arch: ArchConfig, tensors: dict[str, np.ndarray]):
        shapes = arch.layer_shapes()
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ValueError(f"parameter names do not match the architecture (missing {missing}, extra {extra})")
        for name, shape in shapes.items():
            if tuple(np.shape(tensors[name])) != shape:
                raise ValueError(f"shape mismatch for {name}: expected {shape}, got {tuple(np.shape(tensors[name]))}")
        self.arch = arch
        self.tensors = {k: np.asarray(tensors[k]) for k in shapes}
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ValueError(f"non-finite values in {name}")
        self.token = next(_tokens)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> NetworkParams:
        return NetworkParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def replace(self, tensors: dict[str, np.ndarray]) -> NetworkParams:
        return NetworkParams(self.arch, {**self.tensors, **tensors})

    def size(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def equals(self, other: NetworkParams) -> bool:
        return self.arch == other.arch and all(np.array_equal(self[k], other[k]) for k in self.tensors)


def init_network(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """He-style uniform weights in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.layer_shapes().items():
        if name.endswith(".W"):
            bound = np.sqrt(6.0 / shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return NetworkParams(arch, tensors)


@dataclass
class ForwardCache:
    token: int
    batch: int
    n_points: int
    acts: list            # inputs of each point layer, flattened to (B*n, width)
    masks: list           # ReLU masks of the hidden point layers
    argmax: np.ndarray    # (B, C) winning point per channel
    pooled_mask: np.ndarray
    imu_acts: list
    imu_masks: list
    head_acts: list
    head_masks: list
    pred: np.ndarray


def forward_batch(params: NetworkParams, points: np.ndarray, imu: np.ndarray | None = None,
                  need_cache: bool = True):
    """Costs for a batch: ``points`` is (B, n, F), ``imu`` is (B, 13).

    Returns (costs, cache); the cache is None when ``need_cache`` is false,
    which skips the bookkeeping only backward needs.
    """
    arch = params.arch
    dtype = params.dtype
    points = np.asarray(points)
    if points.ndim != 3 or points.shape[2] != arch.in_features:
        raise ValueError(f"points must have shape (B, n, {arch.in_features}), got {points.shape}")
    b, n, f = points.shape
    if n < 1 or b < 1:
        raise ValueError("empty batch or empty point set")
    if arch.uses_imu:
        if imu is None:
            raise ValueError("this architecture needs an IMU feature")
        imu = np.asarray(imu, dtype=dtype)
        if imu.shape != (b, IMU_DIM):
            raise ValueError(f"imu must have shape ({b}, {IMU_DIM}), got {imu.shape}")

    h = points.reshape(b * n, f).astype(dtype, copy=False)
    acts, masks = [], []
    n_layers = len(arch.point_mlp_widths)
    for i in range(n_layers):
        if need_cache:
            acts.append(h)
        z = h @ params[f"point.{i}.W"] + params[f"point.{i}.b"]
        if i < n_layers - 1:
            if need_cache:
                masks.append(z > 0)
            h = np.maximum(z, 0, out=z)
    z = z.reshape(b, n, -1)
    # max over pre-activations then ReLU equals max over ReLU outputs
    if need_cache:
        idx = np.argmax(z, axis=1)
        zmax = np.take_along_axis(z, idx[:, None, :], axis=1)[:, 0, :]
    else:
        idx, zmax = None, z.max(axis=1)
    pooled_mask = zmax > 0
    g = zmax * pooled_mask

    imu_acts, imu_masks = [], []
    if arch.fusion == "direct":
        g = np.concatenate([g, imu], axis=1)
    elif arch.fusion == "mid":
        u = imu
        for i in range(len(arch.imu_mlp_widths)):
            imu_acts.append(u)
            zu = u @ params[f"imu.{i}.W"] + params[f"imu.{i}.b"]
            m = zu > 0
            imu_masks.append(m)
            u = zu * m
        g = np.concatenate([g, u], axis=1)

    head_acts, head_masks = [], []
    x = g
    n_head = len(arch.head_widths)
    for i in range(n_head):
        head_acts.append(x)
        zh = x @ params[f"head.{i}.W"] + params[f"head.{i}.b"]
        if i < n_head - 1:
            m = zh > 0
            head_masks.append(m)
            x = zh * m
    logit = zh[:, 0].astype(np.float64)
    pred = np.clip(1.0 / (1.0 + np.exp(-logit)), _P_LO, _P_HI)
    if not need_cache:
        return pred, None
    cache = ForwardCache(params.token, b, n, acts, masks, idx, pooled_mask, imu_acts, imu_masks,
                         head_acts, head_masks, pred)
    return pred, cache


def forward(params: NetworkParams, points: np.ndarray, imu=None):
    """Single-sample cost for ``points`` (n, F) and a 13-vector ``imu``."""
    points = np.asarray(points)
    if points.ndim != 2:
        raise ValueError(f"points must be (n, F), got shape {points.shape}")
    imu_b = None if imu is None else np.asarray(imu).reshape(1, -1)
    pred, cache = forward_batch(params, points[None], imu_b)
    return float(pred[0]), cache


def l1_loss(pred, label) -> float:
    return float(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(label, dtype=np.float64)).mean())


def mae(preds, labels) -> float:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(labels)} labels")
    if len(preds) == 0:
        raise ValueError("mae of an empty set")
    return float(np.mean(np.abs(preds - labels)))


def backward(params: NetworkParams, labels: np.ndarray, cache: ForwardCache) -> tuple[dict[str, np.ndarray], float]:
    """Gradients of the mean L1 loss over the batch; returns (grads, loss)."""
    if cache.token != params.token:
        raise StaleCacheError("forward cache was produced with different parameters")
    arch = params.arch
    dtype = params.dtype
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    b = cache.batch
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got {labels.shape[0]}")
    pred = cache.pred
    diff = pred - labels
    loss = float(np.mean(np.abs(diff)))
    grads: dict[str, np.ndarray] = {}

    # d loss / d logit; np.sign gives the 0 subgradient at exact ties
    d = (np.sign(diff) / b * pred * (1.0 - pred)).astype(dtype)[:, None]
    n_head = len(arch.head_widths)
    for i in reversed(range(n_head)):
        x = cache.head_acts[i]
        grads[f"head.{i}.W"] = x.T @ d
        grads[f"head.{i}.b"] = d.sum(axis=0)
        d = d @ params[f"head.{i}.W"].T
        if i > 0:
            d = d * cache.head_masks[i - 1]

    pooled_width = arch.point_mlp_widths[-1]
    dg = d[:, :pooled_width]
    if arch.fusion == "mid":
        du = d[:, pooled_width:]
        for i in reversed(range(len(arch.imu_mlp_widths))):
            du = du * cache.imu_masks[i]
            grads[f"imu.{i}.W"] = cache.imu_acts[i].T @ du
            grads[f"imu.{i}.b"] = du.sum(axis=0)
            if i > 0:
                du = du @ params[f"imu.{i}.W"].T

    # only the winning point of each channel receives gradient
    dz = dg * cache.pooled_mask
    n = cache.n_points
    rows = (np.arange(b)[:, None] * n + cache.argmax).reshape(-1)
    active, inverse = np.unique(rows, return_inverse=True)
    g_act = np.zeros((len(active), pooled_width), dtype=dtype)
    g_act[inverse, np.tile(np.arange(pooled_width), b)] = dz.reshape(-1)
    n_layers = len(arch.point_mlp_widths)
    for i in reversed(range(n_layers)):
        x = cache.acts[i][active]
        grads[f"point.{i}.W"] = x.T @ g_act
        grads[f"point.{i}.b"] = g_act.sum(axis=0)
        if i > 0:
            g_act = (g_act @ params[f"point.{i}.W"].T) * cache.masks[i - 1][active]
    return {k: grads[k] for k in params.names()}, loss


def predict(params: NetworkParams, points: np.ndarray, imu: np.ndarray | None = None,
            batch_size: int = 256) -> np.ndarray:
    """Costs for many samples, evaluated in chunks."""
    out = []
    for start in range(0, len(points), batch_size):
        chunk_imu = None if imu is None or not params.arch.uses_imu else imu[start:start + batch_size]
        pred, _ = forward_batch(params, points[start:start + batch_size], chunk_imu, need_cache=False)
        out.append(pred)
    return np.concatenate(out) if out else np.zeros(0)
