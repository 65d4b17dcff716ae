"""Iterative neural projection, single- and multi-group.

A *constraint* here is anything with an ``input_width`` and an
``evaluate(x) -> (C, dC/dx)`` method over a batch ``x`` of shape (B, n):
:class:`~neuroproj.net.ConstraintNet`, a tape-bound
:class:`~neuroproj.net.TapedNet` on the training path, or an
:class:`AnalyticConstraint`.  All loops below are written with graph
variables, so the same code is differentiable when a tape is active.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .autodiff import Var, paused, scatter, take
from .core_types import GroupPartition, ProjectionConfig, SystemState, coord_index

__all__ = [
    "Constraint",
    "ProjectionError",
    "ProjectionTrace",
    "AnalyticConstraint",
    "analytic_constraint_adapter",
    "project",
    "project_batch",
    "project_multigroup",
    "project_multigroup_batch",
    "write_traces_csv",
    "centering_matrix",
]


class Constraint(Protocol):
    input_width: int

    def evaluate(self, x: Var) -> tuple[Var, Var]: ...


class ProjectionError(FloatingPointError):
    def __init__(self, iteration: int, group: int | None = None):
        where = f" in group {group}" if group is not None else ""
        super().__init__(f"non-finite positions at projection iteration {iteration}{where}")
        self.iteration = iteration
        self.group = group


@dataclass
class ProjectionTrace:
    """Per-iteration records; each array is (iterations, batch)."""

    constraint: list[np.ndarray] = field(default_factory=list)
    lam: list[np.ndarray] = field(default_factory=list)
    correction_norm: list[np.ndarray] = field(default_factory=list)
    guarded: list[np.ndarray] = field(default_factory=list)
    final_constraint: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.constraint)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {
            "constraint": np.array(self.constraint),
            "lambda": np.array(self.lam),
            "correction_norm": np.array(self.correction_norm),
            "guarded": np.array(self.guarded),
        }

    def record(self, c: Var, lam: Var, delta: Var, guarded: np.ndarray) -> None:
        self.constraint.append(c.value[:, 0].copy())
        self.lam.append(lam.value[:, 0].copy())
        self.correction_norm.append(np.linalg.norm(delta.value, axis=1))
        self.guarded.append(guarded[:, 0].copy())


def centering_matrix(num_particles: int, dim: int) -> np.ndarray:
    """Linear map subtracting the per-axis centroid from an interleaved vector."""
    n = num_particles * dim
    axis = np.arange(n) % dim
    return np.eye(n) - (axis[:, None] == axis[None, :]) / num_particles


def _step(constraint: Constraint, x: Var, cfg: ProjectionConfig, free: np.ndarray, dim: int):
    """One linearised projection step; returns the unrelaxed correction ``-lambda * grad``."""
    if cfg.center_input:
        P = centering_matrix(x.shape[1] // dim, dim)
        c, g = constraint.evaluate(x @ P)
        g = g @ P
    else:
        c, g = constraint.evaluate(x)
    g = g * free
    g2 = (g * g).sum(axis=1, keepdims=True)
    ok = g2.value >= cfg.grad_guard
    lam = c * ok / (g2 + (~ok))
    delta = -(lam * g)
    return delta, c, lam, ~ok


def _free(x: Var, free_mask) -> np.ndarray:
    if free_mask is None:
        return np.ones(x.shape[1])
    free = np.asarray(free_mask, dtype=np.float64).reshape(-1)
    if free.size != x.shape[1]:
        raise ValueError(f"free mask has {free.size} entries for {x.shape[1]} coordinates")
    return free


def _check_width(constraint: Constraint, n: int, group: int | None = None) -> None:
    if constraint.input_width != n:
        where = f"group {group} has" if group is not None else "input has"
        raise ValueError(f"arity mismatch: {where} {n} coordinates, constraint expects {constraint.input_width}")


def _finite(x: Var, it: int, group: int | None = None) -> None:
    if not np.all(np.isfinite(x.value)):
        raise ProjectionError(it, group)


def project_batch(
    constraint: Constraint,
    x_hat,
    cfg: ProjectionConfig,
    free_mask=None,
    dim: int = 2,
    trace_final: bool = False,
) -> tuple[Var, ProjectionTrace]:
    """Project a batch ``x_hat`` of shape (B, n); ``free_mask`` is per coordinate."""
    x = x_hat if isinstance(x_hat, Var) else Var(np.atleast_2d(x_hat))
    _check_width(constraint, x.shape[1])
    free = _free(x, free_mask)
    trace = ProjectionTrace()
    for it in range(cfg.iterations):
        delta, c, lam, guarded = _step(constraint, x, cfg, free, dim)
        x = x + cfg.relaxation * delta
        trace.record(c, lam, delta, guarded)
        _finite(x, it + 1)
    if trace_final:
        trace.final_constraint = _final_value(constraint, x, cfg, dim)
    return x, trace


def _final_value(constraint: Constraint, x: Var, cfg: ProjectionConfig, dim: int) -> np.ndarray:
    xv = Var(x.value)
    if cfg.center_input:
        xv = xv @ centering_matrix(x.shape[1] // dim, dim)
    with paused():
        c, _ = constraint.evaluate(xv)
    return c.value[:, 0].copy()


def project(
    constraint: Constraint, x_hat: SystemState, cfg: ProjectionConfig, trace_final: bool = False
) -> tuple[SystemState, ProjectionTrace]:
    x, trace = project_batch(
        constraint, x_hat.positions[None], cfg, x_hat.free_coords, x_hat.dim, trace_final
    )
    return x_hat.with_positions(x.value[0]), trace


def _group_order(partition: GroupPartition) -> list[int]:
    """Index order used to reduce corrections; independent of how groups are listed."""
    return sorted(range(len(partition.groups)), key=lambda j: (partition.groups[j], partition.net_binding[j]))


def project_multigroup_batch(
    nets: Mapping[str, Constraint],
    x_hat,
    partition: GroupPartition,
    cfg: ProjectionConfig,
    free_mask=None,
    dim: int = 2,
) -> tuple[Var, list[ProjectionTrace]]:
    x = x_hat if isinstance(x_hat, Var) else Var(np.atleast_2d(x_hat))
    n = x.shape[1]
    partition.validate(n // dim)
    free = _free(x, free_mask)
    cols = [coord_index(g, dim) for g in partition.groups]
    bound = []
    for j, binding in enumerate(partition.net_binding):
        if binding not in nets:
            raise KeyError(f"group {j} is bound to unknown module {binding!r}")
        _check_width(nets[binding], cols[j].size, j)
        bound.append(nets[binding])
    counts = np.zeros(n)
    for c in cols:
        counts[c] += 1.0
    traces = [ProjectionTrace() for _ in partition.groups]
    order = _group_order(partition)
    for it in range(cfg.iterations):
        if cfg.sync_mode == "jacobi":
            deltas = {}
            for j in range(len(cols)):
                delta, c, lam, guarded = _step(bound[j], take(x, cols[j]), cfg, free[cols[j]], dim)
                traces[j].record(c, lam, delta, guarded)
                deltas[j] = delta
            total = None
            for j in order:
                placed = scatter(deltas[j], cols[j], n)
                total = placed if total is None else total + placed
            if len(cols) > 1:
                total = total / counts
            x = x + cfg.relaxation * total
        else:
            for j in range(len(cols)):
                delta, c, lam, guarded = _step(bound[j], take(x, cols[j]), cfg, free[cols[j]], dim)
                traces[j].record(c, lam, delta, guarded)
                x = x + cfg.relaxation * scatter(delta, cols[j], n)
        _finite(x, it + 1)
    return x, traces


def project_multigroup(
    nets: Mapping[str, Constraint], x_hat: SystemState, partition: GroupPartition, cfg: ProjectionConfig
) -> tuple[SystemState, list[ProjectionTrace]]:
    x, traces = project_multigroup_batch(nets, x_hat.positions[None], partition, cfg, x_hat.free_coords, x_hat.dim)
    return x_hat.with_positions(x.value[0]), traces


class AnalyticConstraint:
    """Analytic constraints exposed through the projection interface.

    The scalar is the norm of the stacked residual vector, ``C = sqrt(sum r_k^2)``;
    soft constraints enter scaled by their stiffness and inequalities only
    when violated.  For a single equality constraint the projection step is
    then exactly the classical position-based correction.
    """

    def __init__(self, constraints: Sequence, num_particles: int, dim: int = 2):
        if dim != 2:
            raise ValueError("analytic constraints are two-dimensional")
        self.constraints = list(constraints)
        self.num_particles = num_particles
        self.dim = dim
        self.input_width = num_particles * dim

    def _stack(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        B = X.shape[0]
        P = X.reshape(B, self.num_particles, self.dim)
        res, jac = [], []
        for c in self.constraints:
            r = c.residuals(P)
            J = c.jacobian(P).reshape(B, r.shape[1], -1)
            if c.inequality:
                act = r < 0.0
                r = np.where(act, r, 0.0)
                J = J * act[..., None]
            if c.soft:
                r = r * c.stiffness
                J = J * c.stiffness
            res.append(r)
            jac.append(J)
        if not res:
            return np.zeros((B, 0)), np.zeros((B, 0, self.input_width))
        return np.concatenate(res, 1), np.concatenate(jac, 1)

    def residuals(self, X) -> np.ndarray:
        return self._stack(np.atleast_2d(np.asarray(X, dtype=np.float64)))[0]

    def sum_squared(self, X) -> np.ndarray:
        r = self.residuals(X)
        return (r * r).sum(1)

    def value_and_grad(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        r, J = self._stack(X)
        c = np.sqrt((r * r).sum(1))
        g = np.einsum("bk,bkn->bn", r, J)
        nz = c > 0.0
        g[nz] /= c[nz, None]
        g[~nz] = 0.0
        return c, g

    def evaluate(self, x: Var) -> tuple[Var, Var]:
        if x.shape[1] != self.input_width:
            raise ValueError(f"constraint expects {self.input_width} inputs, got {x.shape[1]}")
        c, g = self.value_and_grad(x.value)
        return Var(c[:, None]), Var(g)


def analytic_constraint_adapter(constraints: Sequence, num_particles: int, dim: int = 2) -> AnalyticConstraint:
    return AnalyticConstraint(constraints, num_particles, dim)


def write_traces_csv(path, traces: Sequence[ProjectionTrace], frame: int | None = None, append: bool = False) -> None:
    """Rows of (frame, iteration, group, sample, C, lambda, correction_norm)."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["frame", "iteration", "group", "sample", "C", "lambda", "correction_norm"])
        for gi, tr in enumerate(traces):
            for it in range(len(tr)):
                for b in range(tr.constraint[it].size):
                    w.writerow(
                        [
                            "" if frame is None else frame,
                            it + 1,
                            gi,
                            b,
                            repr(float(tr.constraint[it][b])),
                            repr(float(tr.lam[it][b])),
                            repr(float(tr.correction_norm[it][b])),
                        ]
                    )
