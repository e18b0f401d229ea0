"""Locomotion-derived traversability labels and the IMU feature vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..simworld.robot import Episode

DEFAULT_WINDOW = 3.0
_EPS = 1e-9


def nominal_distance(r: float, w1: float, w2: float, t: float = DEFAULT_WINDOW, averaged: bool = True) -> float:
    """Distance the wheels command over ``t`` seconds.

    With ``averaged`` (the default) this is the mean rim speed times ``t``;
    ``averaged=False`` sums the two rim speeds instead.
    """
    if r <= 0 or t <= 0:
        raise ValueError("wheel radius and time window must be positive")
    speed = r * (w1 + w2)
    return (speed / 2.0 if averaged else speed) * t


def _window(episode: Episode, t0: float, t: float) -> np.ndarray:
    start = t0 - t
    if start < episode.times[0] - _EPS or t0 > episode.times[-1] + _EPS:
        raise ValueError(f"window [{start:.3f}, {t0:.3f}] is outside the episode "
                         f"[{episode.times[0]:.3f}, {episode.times[-1]:.3f}]")
    return np.flatnonzero((episode.times >= start - _EPS) & (episode.times <= t0 + _EPS))


def actual_distance(episode: Episode, t0: float, t: float = DEFAULT_WINDOW) -> float:
    """Path length of the recorded positions over ``[t0 - t, t0]``."""
    idx = _window(episode, t0, t)
    if len(idx) < 2:
        return 0.0
    steps = np.diff(episode.positions[idx], axis=0)
    return float(np.sum(np.linalg.norm(steps, axis=1)))


def traversability_label(d_n: float, d_a: float, mode: str = "raw") -> float:
    """Clamp the distance shortfall into [0, 1].

    ``raw`` clamps ``d_n - d_a`` in meters; ``normalized`` clamps the
    fractional shortfall ``(d_n - d_a) / d_n``.
    """
    if d_n < 0 or d_a < 0:
        raise ValueError("distances must be non-negative")
    if mode == "raw":
        gap = d_n - d_a
    elif mode == "normalized":
        if d_n == 0:
            return 0.0
        gap = (d_n - d_a) / d_n
    else:
        raise ValueError(f"unknown label mode {mode!r}")
    return float(min(max(gap, 0.0), 1.0))


@dataclass(frozen=True)
class ImuFeature:
    cov: np.ndarray    # 3x3 acceleration covariance
    quat: np.ndarray   # (qx, qy, qz, qw)

    def __post_init__(self):
        cov = np.array(self.cov, dtype=np.float64).reshape(3, 3)
        quat = np.array(self.quat, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(quat) - 1.0) > 1e-6:
            raise ValueError("IMU quaternion must have unit norm")
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "quat", quat)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.cov.reshape(-1), self.quat])

    @classmethod
    def from_vector(cls, values) -> ImuFeature:
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(v) != 13:
            raise ValueError(f"expected 13 IMU values, got {len(v)}")
        return cls(v[:9].reshape(3, 3), v[9:])


def imu_feature(episode: Episode, t0: float, window: float = DEFAULT_WINDOW) -> ImuFeature:
    """Sample covariance of the accelerations over the window plus the orientation at ``t0``."""
    idx = _window(episode, t0, window)
    if len(idx) < 2:
        raise ValueError("need at least 2 acceleration records in the window")
    acc = episode.accels[idx]
    cov = np.cov(acc, rowvar=False, ddof=1)
    cov = 0.5 * (cov + cov.T)
    return ImuFeature(cov, episode.orientations[idx[-1]])
