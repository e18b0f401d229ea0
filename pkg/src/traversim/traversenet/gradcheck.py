"""Central finite-difference check of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NetworkParams, backward, forward_batch, l1_loss


REL_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    max_rel_error: float
    probes: int
    skipped_kinks: int
    worst: tuple[str, tuple[int, ...]] | None


def _pattern(cache, labels) -> tuple:
    """Everything that selects a linear piece of the loss."""
    parts = [m.tobytes() for m in cache.masks + cache.imu_masks + cache.head_masks]
    parts.append(cache.argmax.tobytes())
    parts.append(cache.pooled_mask.tobytes())
    parts.append(np.sign(cache.pred - labels).tobytes())
    return tuple(parts)


def gradient_check(params: NetworkParams, points: np.ndarray, imu, labels, probes: int = 200,
                   step: float = 1e-4, seed: int = 0, max_draws: int = 20000) -> GradCheckResult:
    """Compare analytic gradients to central differences at random coordinates.

    Runs in float64.  A probe whose +/- ``step`` perturbation changes a ReLU
    mask, a max-pool winner or the sign of a residual straddles a kink where
    the loss is not differentiable; such probes are redrawn and counted.
    """
    p64 = params.astype(np.float64)
    x = np.asarray(points, dtype=np.float64)
    u = None if imu is None else np.asarray(imu, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _, cache = forward_batch(p64, x, u)
    grads, _ = backward(p64, y, cache)
    base = _pattern(cache, y)
    names = p64.names()
    sizes = np.array([p64[n].size for n in names], dtype=np.float64)
    rng = np.random.default_rng(seed)
    worst, worst_at, done, skipped = 0.0, None, 0, 0
    for _ in range(max_draws):
        if done >= probes:
            break
        # pick coordinates uniformly over all parameters
        k = int(rng.choice(len(names), p=sizes / sizes.sum()))
        name = names[k]
        flat = int(rng.integers(p64[name].size))
        coord = np.unravel_index(flat, p64[name].shape)
        values = []
        kink = False
        for sign in (1.0, -1.0):
            t = p64[name].copy()
            t[coord] += sign * step
            pert = p64.replace({name: t})
            pred, c = forward_batch(pert, x, u)
            if _pattern(c, y) != base:
                kink = True
                break
            values.append(l1_loss(pred, y))
        if kink:
            skipped += 1
            continue
        fd = (values[0] - values[1]) / (2.0 * step)
        an = float(grads[name][coord])
        # the floor keeps round-off on vanishing gradients from dominating
        err = abs(fd - an) / max(abs(fd), abs(an), REL_FLOOR)
        if err > worst or worst_at is None:
            worst, worst_at = max(err, worst), (name, tuple(int(i) for i in coord))
        done += 1
    if done < probes:
        raise RuntimeError(f"only {done} kink-free probes found in {max_draws} draws")
    return GradCheckResult(worst, done, skipped, worst_at)
