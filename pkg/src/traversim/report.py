"""Matplotlib figures for training runs, ablations, maps and plans (rendered to files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .gridder import cost_colors  # noqa: E402

# fixed metadata keeps reruns byte-stable
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def training_curves(histories: dict[str, list[dict]], path) -> Path:
    """Train and test MAE per epoch, one color per run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, (name, hist) in enumerate(histories.items()):
        if not hist:
            continue
        ep = [h["epoch"] for h in hist]
        color = f"C{i % 10}"
        ax.plot(ep, [h["train_mae"] for h in hist], color=color, lw=1, ls="--")
        ax.plot(ep, [h["test_mae"] for h in hist], color=color, lw=1.5, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("MAE (dashed: train)")
    ax.grid(alpha=0.3)
    if histories:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(rows: list[dict], path) -> Path:
    names = [r["architecture"] for r in rows]
    test = [r["test_mae"] for r in rows]
    base = [r["mean_baseline_mae"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    y = np.arange(len(rows))
    ax.barh(y, test, color="C0", label="test MAE")
    ax.scatter(base, y, color="k", marker="|", s=200, label="mean-label baseline")
    ax.set_yticks(y, names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("MAE")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def costmap_figure(costmap, path, paths=(), robot_xy=None, title: str | None = None) -> Path:
    """Cell costs (gray where unknown) with planned paths overlaid in yellow."""
    fig, ax = plt.subplots(figsize=(5.5, 5))
    nx, ny = costmap.shape
    x0, y0 = costmap.origin
    extent = (x0, x0 + nx * costmap.cell, y0, y0 + ny * costmap.cell)
    cmap = matplotlib.colormaps["turbo"].copy()
    cmap.set_bad("0.5")
    im = ax.imshow(np.ma.masked_invalid(costmap.costs.T), origin="lower", extent=extent, cmap=cmap,
                   vmin=0.0, vmax=1.0, interpolation="nearest")
    fig.colorbar(im, ax=ax, label="cost")
    for p in paths:
        if p is not None and p.waypoints:
            wp = np.asarray(p.waypoints)
            ax.plot(wp[:, 0], wp[:, 1], color="yellow", lw=2)
    if robot_xy is not None:
        ax.plot(*robot_xy, marker="o", color="white", mec="k")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def map_topdown(points: np.ndarray, costs: np.ndarray, path, title: str | None = None) -> Path:
    """Top-down scatter of a local map colored like the exported PLY."""
    pts = np.asarray(points)
    rgb = cost_colors(costs) / 255.0
    order = np.argsort(pts[:, 2], kind="stable")
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(pts[order, 0], pts[order, 1], c=rgb[order], s=0.5, linewidths=0)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def world_preview(world, path, resolution: int = 200) -> Path:
    """Heightfield with obstacle footprints."""
    h = world.half
    g = np.linspace(-h, h, resolution)
    xx, yy = np.meshgrid(g, g)
    z = world.height(xx, yy)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(z, origin="lower", extent=(-h, h, -h, h), cmap="terrain")
    fig.colorbar(im, ax=ax, label="height (m)")
    if world.obstacles:
        xy = np.array([o.center[:2] for o in world.obstacles])
        ax.scatter(xy[:, 0], xy[:, 1], s=3, c="k")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    fig.tight_layout()
    return _save(fig, path)


def label_histogram(labels, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.asarray(labels, dtype=float), bins=20, range=(0, 1), color="C2")
    ax.set_xlabel("label")
    ax.set_ylabel("samples")
    fig.tight_layout()
    return _save(fig, path)
