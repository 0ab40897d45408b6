"""2-D loss-surface slices around a trained parameter point.

Two random Gaussian directions are drawn and rescaled block by block, then
the loss is evaluated at ``theta + a * d_x + b * d_y`` on a square grid.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, RngStream

Params = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class DirectionPair:
    d_x: dict[str, np.ndarray]
    d_y: dict[str, np.ndarray]
    seed: int

    def swapped(self) -> "DirectionPair":
        return DirectionPair(self.d_y, self.d_x, self.seed)


@dataclass(frozen=True)
class SurfaceGrid:
    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray  # values[i, j] = f(alphas[i], betas[j])
    center: float


def _rescale(direction: np.ndarray, block: np.ndarray, rule: str) -> np.ndarray:
    if rule == "filter":
        norm = np.linalg.norm(direction)
        target = np.linalg.norm(block)
        if target == 0.0 or norm == 0.0:
            return np.zeros_like(block)
        return direction * (target / norm)
    if rule == "variance":
        # entries scaled so their spread equals the block's variance
        return direction * float(block.var())
    raise ValueError(f"unknown normalization rule {rule!r}")


def sample_directions(params: Params, seed: int, rule: str = "filter") -> DirectionPair:
    """Gaussian directions, each block rescaled to its parameter block.

    ``rule="filter"`` matches the Frobenius norm of every block;
    ``rule="variance"`` scales entries by the block's variance instead.
    """
    if not params:
        raise ValueError("empty parameter set")
    dirs = []
    for axis in (0, 1):
        rng = RngStream(seed, axis)
        dirs.append(
            {
                name: _rescale(rng.child(i).normal(block.shape), np.asarray(block, dtype=np.float64), rule)
                for i, (name, block) in enumerate(params.items())
            }
        )
    return DirectionPair(dirs[0], dirs[1], seed)


def grid_offsets(grid_range: float, grid_points: int) -> np.ndarray:
    """``grid_points`` evenly spaced offsets over ``[-r, r]`` with an exact 0 in the middle."""
    if grid_points < 1 or grid_points % 2 == 0:
        raise ValueError("grid_points must be a positive odd number")
    if not grid_range > 0:
        raise ValueError("grid_range must be positive")
    half = grid_points // 2
    if half == 0:
        return np.zeros(1)
    return grid_range * (np.arange(grid_points) - half) / half


def perturb(params: Params, directions: DirectionPair, a: float, b: float) -> dict[str, np.ndarray]:
    if a == 0.0 and b == 0.0:
        return dict(params)
    # sum the two offsets first so swapping (d_x, a) with (d_y, b) is bitwise symmetric
    return {n: p + (a * directions.d_x[n] + b * directions.d_y[n]) for n, p in params.items()}


def evaluate_surface(
    params: Params,
    directions: DirectionPair,
    grid_range: float,
    grid_points: int,
    loss_fn: Callable[[Params], float],
) -> SurfaceGrid:
    """Evaluate ``loss_fn`` on the ``grid_points x grid_points`` slice.

    Cells whose loss is not finite are stored as ``+inf``.
    """
    offsets = grid_offsets(grid_range, grid_points)
    values = np.empty((grid_points, grid_points))
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            try:
                value = float(loss_fn(perturb(params, directions, float(a), float(b))))
            except (NonFiniteError, FloatingPointError):
                value = math.inf
            values[i, j] = value if math.isfinite(value) else math.inf
    half = grid_points // 2
    return SurfaceGrid(offsets, offsets.copy(), values, float(values[half, half]))


def flatness_metrics(grid: SurfaceGrid) -> dict[str, float]:
    """Rise of the surface over its center.

    ``radius_at_2x`` is the smallest Euclidean grid radius (excluding the
    center) at which the loss reaches twice the center loss; ``inf`` if it
    never does. Infinite cells are left out of the mean.
    """
    if not np.isfinite(grid.values).any():
        raise ValueError("every grid cell is non-finite")
    if not math.isfinite(grid.center):
        raise ValueError("center loss is not finite")
    rise = grid.values - grid.center
    finite = np.isfinite(rise)
    a, b = np.meshgrid(grid.alphas, grid.betas, indexing="ij")
    radius = np.hypot(a, b)
    hits = (grid.values >= 2.0 * grid.center) & (radius > 0)
    return {
        "mean_rise": float(rise[finite].mean()),
        "max_rise": float(rise[finite].max()) if finite.all() else math.inf,
        "radius_at_2x": float(radius[hits].min()) if hits.any() else math.inf,
    }


def surface_csv(grid: SurfaceGrid) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha", "beta", "loss"])
    for i, a in enumerate(grid.alphas):
        for j, b in enumerate(grid.betas):
            writer.writerow([repr(float(a)), repr(float(b)), repr(float(grid.values[i, j]))])
    return buf.getvalue()


def write_surface(grid: SurfaceGrid, out_dir: str | Path, extra: dict | None = None) -> dict[str, float]:
    """Write ``surface.csv`` and the ``metrics.json`` sidecar; returns the metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "surface.csv").write_text(surface_csv(grid))
    metrics = {**flatness_metrics(grid), "center_loss": grid.center, **(extra or {})}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics
