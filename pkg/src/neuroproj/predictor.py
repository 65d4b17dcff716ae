"""Linear prediction plus projection, advanced frame by frame."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .core_types import GroupPartition, ProjectionConfig, SystemState, TrajectorySample
from .projection import Constraint, ProjectionError, ProjectionTrace, project_batch, project_multigroup_batch

__all__ = ["linear_predict", "linear_predict_batch", "rollout", "rollout_batch", "RolloutError"]


class RolloutError(FloatingPointError):
    def __init__(self, frame: int, cause: ProjectionError):
        super().__init__(f"rollout failed at frame {frame}: {cause}")
        self.frame = frame
        self.cause = cause


def gravity_offset(gravity, dt: float, num_particles: int, dim: int) -> np.ndarray:
    g = np.zeros(dim) if gravity is None else np.asarray(gravity, dtype=np.float64).reshape(dim)
    return np.tile(g * dt * dt, num_particles)


def linear_predict_batch(x_prev: np.ndarray, x_curr: np.ndarray, dt: float, gravity, free: np.ndarray, dim: int = 2):
    """``2 x_n - x_{n-1} + g dt^2`` on free coordinates; pinned coordinates keep ``x_n``."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    x_curr = np.asarray(x_curr, dtype=np.float64)
    if x_prev.shape != x_curr.shape:
        raise ValueError(f"shape mismatch {x_prev.shape} vs {x_curr.shape}")
    off = gravity_offset(gravity, dt, x_curr.shape[-1] // dim, dim)
    return np.where(free, 2.0 * x_curr - x_prev + off, x_curr)


def linear_predict(x_prev: SystemState, x_curr: SystemState, dt: float = 0.1, gravity=None) -> SystemState:
    if x_prev.positions.shape != x_curr.positions.shape or x_prev.dim != x_curr.dim:
        raise ValueError("states differ in shape")
    x = linear_predict_batch(x_prev.positions, x_curr.positions, dt, gravity, x_curr.free_coords, x_curr.dim)
    return x_curr.with_positions(x)


def rollout_batch(
    model: Constraint | Mapping[str, Constraint],
    x0: np.ndarray,
    x1: np.ndarray,
    num_frames: int,
    cfg: ProjectionConfig,
    gravity=None,
    dt: float = 0.1,
    pin_mask: np.ndarray | None = None,
    partition: GroupPartition | None = None,
    dim: int = 2,
    keep_traces: bool = False,
) -> tuple[np.ndarray, list]:
    """Roll out a batch of initial frame pairs (B, n); returns (B, num_frames, n)."""
    if num_frames < 2:
        raise ValueError("num_frames must be >= 2")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    n = x1.shape[1]
    pins = np.zeros(n // dim, dtype=bool) if pin_mask is None else np.asarray(pin_mask, dtype=bool)
    free = np.repeat(~pins, dim)
    frames = [x0, x1]
    traces = []
    for f in range(2, num_frames):
        x_hat = linear_predict_batch(frames[-2], frames[-1], dt, gravity, free, dim)
        try:
            if partition is None:
                x, tr = project_batch(model, x_hat, cfg, free, dim)
                tr = [tr]
            else:
                x, tr = project_multigroup_batch(model, x_hat, partition, cfg, free, dim)
        except ProjectionError as exc:
            raise RolloutError(f, exc) from exc
        frames.append(x.value)
        if keep_traces:
            traces.append(tr)
    return np.stack(frames, axis=1), traces


def rollout(
    model: Constraint | Mapping[str, Constraint],
    x0: SystemState,
    x1: SystemState,
    num_frames: int,
    cfg: ProjectionConfig,
    gravity=None,
    dt: float = 0.1,
    partition: GroupPartition | None = None,
) -> TrajectorySample:
    out, _ = rollout_batch(
        model, x0.positions, x1.positions, num_frames, cfg, gravity, dt, x1.pin_mask, partition, x1.dim
    )
    return TrajectorySample(out[0], dt, x1.dim, x1.pin_mask)

