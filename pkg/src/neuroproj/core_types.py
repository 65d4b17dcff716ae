"""State, trajectory, dataset and configuration types."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ScenarioTag",
    "SystemState",
    "TrajectorySample",
    "TrajectoryDataset",
    "GroupPartition",
    "ProjectionConfig",
    "MassModel",
    "CorrectionBuffer",
    "state_slice",
    "state_scatter_add",
    "coord_index",
]


class ScenarioTag(enum.IntEnum):
    rigid1 = 0
    rigid2 = 1
    rope = 2
    articulated = 3
    collision = 4

    @classmethod
    def parse(cls, value) -> ScenarioTag:
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value)]
        except KeyError:
            raise ValueError(f"unknown scenario {value!r}; expected one of {[t.name for t in cls]}") from None


def coord_index(indices: Sequence[int], dim: int) -> np.ndarray:
    """Flat coordinate indices for the given particles in interleaved layout."""
    idx = np.asarray(indices, dtype=np.intp)
    return (idx[:, None] * dim + np.arange(dim)[None, :]).reshape(-1)


@dataclass(frozen=True)
class SystemState:
    """Interleaved particle positions ``[x1, y1, x2, y2, ...]`` for one frame."""

    positions: np.ndarray
    dim: int = 2
    pin_mask: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1)
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if pos.size % self.dim:
            raise ValueError(f"{pos.size} coordinates is not a multiple of dim={self.dim}")
        m = pos.size // self.dim
        pins = np.zeros(m, dtype=bool) if self.pin_mask is None else np.array(self.pin_mask, dtype=bool).reshape(-1)
        if pins.size != m:
            raise ValueError(f"pin_mask has {pins.size} entries for {m} particles")
        pos.flags.writeable = False
        pins.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "pin_mask", pins)

    @property
    def num_particles(self) -> int:
        return self.positions.size // self.dim

    def points(self) -> np.ndarray:
        return self.positions.reshape(-1, self.dim)

    @property
    def free_coords(self) -> np.ndarray:
        """Boolean mask over coordinates, False on pinned particles."""
        return np.repeat(~self.pin_mask, self.dim)

    def with_positions(self, positions: np.ndarray) -> SystemState:
        return SystemState(positions, self.dim, self.pin_mask)

    @classmethod
    def from_points(cls, points, pin_mask=None) -> SystemState:
        pts = np.asarray(points, dtype=np.float64)
        return cls(pts.reshape(-1), pts.shape[1], pin_mask)


def state_slice(state: SystemState, indices: Sequence[int]) -> SystemState:
    idx = np.asarray(indices, dtype=np.intp)
    m = state.num_particles
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"particle indices {list(idx)} out of range for {m} particles")
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("particle indices must be distinct")
    return SystemState(state.positions[coord_index(idx, state.dim)], state.dim, state.pin_mask[idx])


class CorrectionBuffer:
    """Per-particle accumulator of corrections, averaged on finalize."""

    def __init__(self, state: SystemState):
        self.state = state
        self.sums = np.zeros((state.num_particles, state.dim))
        self.counts = np.zeros(state.num_particles, dtype=np.int64)

    def finalize(self) -> np.ndarray:
        """Mean correction per particle; particles never written get zero."""
        out = np.zeros_like(self.sums)
        hit = self.counts > 0
        out[hit] = self.sums[hit] / self.counts[hit, None]
        return out.reshape(-1)

    def apply(self) -> SystemState:
        return self.state.with_positions(self.state.positions + self.finalize())


def state_scatter_add(buffer: CorrectionBuffer, indices: Sequence[int], values) -> CorrectionBuffer:
    idx = np.asarray(indices, dtype=np.intp)
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    d = buffer.state.dim
    if vals.size != idx.size * d:
        raise ValueError(f"expected {idx.size * d} values for {idx.size} particles, got {vals.size}")
    vals = vals.reshape(-1, d)
    for k, p in enumerate(idx):
        if buffer.state.pin_mask[p]:
            continue
        buffer.sums[p] += vals[k]
        buffer.counts[p] += 1
    return buffer


@dataclass(frozen=True)
class TrajectorySample:
    """One simulated sequence; ``positions`` has shape (frames, m*d)."""

    positions: np.ndarray
    dt: float = 0.1
    dim: int = 2
    pin_mask: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] % self.dim:
            raise ValueError(f"positions must be (frames, m*{self.dim}), got {pos.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        m = pos.shape[1] // self.dim
        pins = np.zeros(m, dtype=bool) if self.pin_mask is None else np.array(self.pin_mask, dtype=bool)
        if pins.size != m:
            raise ValueError("pin_mask length does not match particle count")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "pin_mask", pins)

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def num_particles(self) -> int:
        return self.positions.shape[1] // self.dim

    @property
    def frames(self) -> list[SystemState]:
        return [SystemState(p, self.dim, self.pin_mask) for p in self.positions]

    @classmethod
    def from_frames(cls, frames: Sequence[SystemState], dt: float = 0.1) -> TrajectorySample:
        first = frames[0]
        for f in frames[1:]:
            if f.dim != first.dim or f.num_particles != first.num_particles or not np.array_equal(f.pin_mask, first.pin_mask):
                raise ValueError("all frames must share particle count, dim and pin mask")
        return cls(np.stack([f.positions for f in frames]), dt, first.dim, first.pin_mask)


@dataclass
class TrajectoryDataset:
    """Observed trajectories, stored as one array of shape (samples, frames, m*d)."""

    positions: np.ndarray
    observation_indices: list[int]
    scenario_tag: ScenarioTag
    dt: float = 0.1
    dim: int = 2
    pin_mask: np.ndarray | None = None
    noise_sigma: float = 0.0
    seed: int | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3:
            raise ValueError("positions must be (samples, frames, m*d)")
        self.scenario_tag = ScenarioTag.parse(self.scenario_tag)
        self.observation_indices = [int(i) for i in self.observation_indices]
        m = self.positions.shape[2] // self.dim
        if len(self.observation_indices) != m:
            raise ValueError(f"{len(self.observation_indices)} observation indices for {m} recorded particles")
        self.pin_mask = np.zeros(m, dtype=bool) if self.pin_mask is None else np.asarray(self.pin_mask, dtype=bool)
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def num_samples(self) -> int:
        return self.positions.shape[0]

    @property
    def frames_per_sample(self) -> int:
        return self.positions.shape[1]

    @property
    def num_particles(self) -> int:
        return self.positions.shape[2] // self.dim

    @property
    def samples(self) -> list[TrajectorySample]:
        return [self.sample(i) for i in range(self.num_samples)]

    def sample(self, i: int) -> TrajectorySample:
        return TrajectorySample(self.positions[i], self.dt, self.dim, self.pin_mask)

    def subset(self, sample_indices) -> TrajectoryDataset:
        return TrajectoryDataset(
            self.positions[np.asarray(sample_indices, dtype=np.intp)],
            list(self.observation_indices),
            self.scenario_tag,
            self.dt,
            self.dim,
            self.pin_mask.copy(),
            self.noise_sigma,
            self.seed,
            dict(self.meta),
        )

    def particles(self, local_indices: Sequence[int]) -> TrajectoryDataset:
        """Restrict the dataset to a subset of its recorded particles."""
        idx = np.asarray(local_indices, dtype=np.intp)
        cols = coord_index(idx, self.dim)
        return TrajectoryDataset(
            self.positions[:, :, cols],
            [self.observation_indices[i] for i in idx],
            self.scenario_tag,
            self.dt,
            self.dim,
            self.pin_mask[idx],
            self.noise_sigma,
            self.seed,
            dict(self.meta),
        )


@dataclass(frozen=True)
class GroupPartition:
    """Overlapping particle groups and the network module bound to each."""

    groups: tuple[tuple[int, ...], ...]
    net_binding: tuple[str, ...] = ()

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        if not groups or any(len(g) == 0 for g in groups):
            raise ValueError("partition needs at least one non-empty group")
        for g in groups:
            if len(set(g)) != len(g):
                raise ValueError(f"group {g} repeats a particle")
        binding = tuple(self.net_binding) or tuple("default" for _ in groups)
        if len(binding) != len(groups):
            raise ValueError("net_binding must name one module per group")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "net_binding", tuple(str(b) for b in binding))

    @property
    def shared(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for j, g in enumerate(self.groups):
            for p in g:
                out.setdefault(p, []).append(j)
        return out

    @property
    def num_particles(self) -> int:
        return max(max(g) for g in self.groups) + 1

    def validate(self, num_particles: int) -> None:
        covered = set(self.shared)
        if max(covered) >= num_particles:
            raise ValueError(f"partition references particle {max(covered)} but state has {num_particles}")
        missing = set(range(num_particles)) - covered
        if missing:
            raise ValueError(f"particles {sorted(missing)} belong to no group")

    @classmethod
    def chain(cls, num_groups: int, group_size: int, overlap: int, module: str = "default") -> GroupPartition:
        """Consecutive groups along a chain, neighbours sharing ``overlap`` particles."""
        stride = group_size - overlap
        groups = [tuple(range(j * stride, j * stride + group_size)) for j in range(num_groups)]
        return cls(tuple(groups), tuple(module for _ in groups))

    def dumps(self) -> str:
        return "".join(
            " ".join(str(i) for i in g) + f" net={b}\n" for g, b in zip(self.groups, self.net_binding)
        )

    @classmethod
    def loads(cls, text: str) -> GroupPartition:
        groups, binding = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            idx, net = [], "default"
            for tok in line.split():
                if tok.startswith("net="):
                    net = tok[4:]
                else:
                    try:
                        idx.append(int(tok))
                    except ValueError:
                        raise ValueError(f"partition line {lineno}: bad token {tok!r}") from None
            groups.append(tuple(idx))
            binding.append(net)
        return cls(tuple(groups), tuple(binding))


@dataclass(frozen=True)
class ProjectionConfig:
    iterations: int = 5
    relaxation: float = 1.0
    grad_guard: float = 1e-12
    sync_mode: str = "jacobi"
    center_input: bool = False

    def __post_init__(self):
        if int(self.iterations) < 0:
            raise ValueError("iterations must be >= 0")
        if not (0.0 <= self.relaxation <= 1.0):
            raise ValueError("relaxation must lie in [0, 1]")
        if not self.grad_guard > 0:
            raise ValueError("grad_guard must be positive")
        if self.sync_mode not in ("jacobi", "gauss_seidel"):
            raise ValueError(f"sync_mode must be 'jacobi' or 'gauss_seidel', got {self.sync_mode!r}")


@dataclass(frozen=True)
class MassModel:
    per_particle_mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.per_particle_mass, dtype=np.float64)
        if np.any(m <= 0):
            raise ValueError("masses must be positive")
        object.__setattr__(self, "per_particle_mass", m)

    @classmethod
    def uniform(cls, m: int) -> MassModel:
        return cls(np.ones(m))

    def inverse(self, pin_mask: np.ndarray | None = None) -> np.ndarray:
        w = 1.0 / self.per_particle_mass
        if pin_mask is not None:
            w = np.where(pin_mask, 0.0, w)
        return w
