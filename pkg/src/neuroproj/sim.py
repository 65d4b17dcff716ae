"""Ground-truth position-based simulators and dataset generation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .constraints import Bend, CircleBoundary, Distance, PolygonCollision
from .core_types import MassModel, ScenarioTag, SystemState, TrajectoryDataset

__all__ = [
    "ScenarioSpec",
    "SimulationError",
    "simulate_step",
    "simulate",
    "generate_dataset",
    "scenario_presets",
    "long_rope_spec",
    "lattice",
    "max_violation",
    "DEFAULT_DT",
    "GRAVITY",
]

DEFAULT_DT = 0.1
GRAVITY = (0.0, -9.8)
HARD_TOL = 1e-10


class SimulationError(ValueError):
    pass


@dataclass
class ScenarioSpec:
    """Particle template, analytic constraints and sampling ranges for one scenario."""

    tag: ScenarioTag
    template: np.ndarray
    constraints: list
    gravity: tuple[float, float] = (0.0, 0.0)
    impulse_range: tuple[float, float] = (-1.0, 1.0)
    solver_iterations: int = 20
    pin_mask: np.ndarray | None = None
    masses: MassModel | None = None
    bodies: tuple[tuple[int, ...], ...] = ()
    spawn_boxes: tuple[tuple[float, float, float, float], ...] = ()
    rotation_range: tuple[float, float] = (-math.pi, math.pi)
    observation_indices: tuple[int, ...] = ()
    noise_sigma: float = 0.0
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.tag = ScenarioTag.parse(self.tag)
        self.template = np.asarray(self.template, dtype=np.float64).reshape(-1, 2)
        m = self.num_particles
        self.pin_mask = np.zeros(m, dtype=bool) if self.pin_mask is None else np.asarray(self.pin_mask, dtype=bool)
        self.masses = self.masses or MassModel.uniform(m)
        self.bodies = tuple(tuple(b) for b in self.bodies) or (tuple(range(m)),)
        self.spawn_boxes = tuple(self.spawn_boxes) or tuple((-1.0, 1.0, -1.0, 1.0) for _ in self.bodies)
        self.observation_indices = tuple(self.observation_indices) or tuple(range(m))
        if len(self.spawn_boxes) != len(self.bodies):
            raise ValueError("one spawn box per body required")
        for c in self.constraints:
            for p in c.particles:
                if not 0 <= p < m:
                    raise ValueError(f"constraint {c} references particle {p} outside 0..{m - 1}")
        for p in self.observation_indices:
            if not 0 <= p < m:
                raise ValueError(f"observation index {p} out of range")

    @property
    def num_particles(self) -> int:
        return self.template.shape[0]

    @property
    def inv_mass(self) -> np.ndarray:
        return self.masses.inverse(self.pin_mask)

    def hard_constraints(self) -> list:
        return [c for c in self.constraints if not c.soft]

    def of_family(self, family: str) -> list:
        return [c for c in self.constraints if c.family == family]

    def rigid_bodies(self) -> list[tuple[int, ...]]:
        """Unpinned particle sets of three or more tied together by shape constraints on every pair."""
        pairs = {(min(c.i, c.j), max(c.i, c.j)) for c in self.constraints if isinstance(c, Distance) and c.family == "shape"}
        parent = list(range(self.num_particles))

        def root(a):
            while parent[a] != a:
                a = parent[a]
            return a

        for i, j in pairs:
            parent[root(i)] = root(j)
        groups: dict[int, list[int]] = {}
        for i, j in pairs:
            groups.setdefault(root(i), []).extend((i, j))
        out = []
        for members in groups.values():
            body = tuple(sorted(set(members)))
            complete = all(pair in pairs for pair in itertools.combinations(body, 2))
            if len(body) >= 3 and complete and not self.pin_mask[list(body)].any():
                out.append(body)
        return out


def lattice(nx: int, ny: int, spacing: float = 1.0) -> np.ndarray:
    """Row-major grid points ``idx = row * nx + col`` centred on the origin."""
    xs = (np.arange(nx) - (nx - 1) / 2) * spacing
    ys = (np.arange(ny) - (ny - 1) / 2) * spacing
    return np.array([(x, y) for y in ys for x in xs])


def _all_pairs(points: np.ndarray, indices: Sequence[int], family: str = "shape") -> list[Distance]:
    out = []
    for a, b in itertools.combinations(indices, 2):
        out.append(Distance(a, b, float(np.linalg.norm(points[a] - points[b])), family))
    return out


def _chain(points: np.ndarray, chain: Sequence[int], bend_stiffness: float) -> list:
    out: list = []
    for a, b in zip(chain[:-1], chain[1:]):
        out.append(Distance(a, b, float(np.linalg.norm(points[a] - points[b])), "stretch"))
    for a, b, c in zip(chain[:-2], chain[1:-1], chain[2:]):
        u, v = points[b] - points[a], points[c] - points[b]
        rest = math.atan2(u[0] * v[1] - u[1] * v[0], float(u @ v))
        out.append(Bend(a, b, c, rest, bend_stiffness))
    return out


def _arc(n: int, segment: float, turn: float) -> np.ndarray:
    """Polyline of ``n`` points with fixed segment length and turning angle, centred."""
    pts = [np.zeros(2)]
    heading = -turn * (n - 2) / 2
    for _ in range(n - 1):
        pts.append(pts[-1] + segment * np.array([math.cos(heading), math.sin(heading)]))
        heading += turn
    pts = np.array(pts)
    return pts - pts.mean(0)


ROPE_SEGMENT = 0.5
ROPE_TURN = 0.25
BEND_STIFFNESS = 0.1
TERRAIN_CENTER = (0.0, 0.0)
TERRAIN_RADIUS = 5.0


def scenario_presets() -> dict[str, ScenarioSpec]:
    presets: dict[str, ScenarioSpec] = {}

    sq = lattice(2, 2)
    presets["rigid1"] = ScenarioSpec(
        ScenarioTag.rigid1, sq, _all_pairs(sq, range(4)), noise_sigma=1e-3, meta={"noisy": "1"}
    )

    grid = lattice(4, 4)
    presets["rigid2"] = ScenarioSpec(
        ScenarioTag.rigid2, grid, _all_pairs(grid, range(16)), noise_sigma=1e-3, meta={"noisy": "1"}
    )

    rope = _arc(8, ROPE_SEGMENT, ROPE_TURN)
    pins = np.zeros(8, dtype=bool)
    pins[[0, 7]] = True
    presets["rope"] = ScenarioSpec(ScenarioTag.rope, rope, _chain(rope, range(8), BEND_STIFFNESS), pin_mask=pins)

    body = lattice(4, 4, 1.0 / 3.0)
    anchor = 13
    tail = body[anchor] + np.array([[0.0, 0.4 * (k + 1)] for k in range(7)])
    art = np.vstack([body, tail])
    chain = [anchor] + list(range(16, 23))
    pins = np.zeros(23, dtype=bool)
    pins[22] = True
    presets["articulated"] = ScenarioSpec(
        ScenarioTag.articulated,
        art,
        _all_pairs(art, range(16)) + _chain(art, chain, BEND_STIFFNESS),
        gravity=GRAVITY,
        pin_mask=pins,
        rotation_range=(-0.3, 0.3),
        spawn_boxes=((-0.5, 0.5, -0.5, 0.5),),
        meta={"anchor": str(anchor)},
    )

    box = lattice(4, 4, 1.0 / 3.0)
    two = np.vstack([box, box])
    a, b = tuple(range(16)), tuple(range(16, 32))
    hull = (0, 3, 15, 12)
    cons: list = _all_pairs(two, a) + _all_pairs(two, b)
    cons.append(CircleBoundary(TERRAIN_CENTER, TERRAIN_RADIUS, a + b, inside=True))
    cons.append(PolygonCollision(a, hull, b, tuple(h + 16 for h in hull)))
    presets["collision"] = ScenarioSpec(
        ScenarioTag.collision,
        two,
        cons,
        gravity=GRAVITY,
        bodies=(a, b),
        spawn_boxes=((-2.5, -0.5, -1.5, 0.5), (0.5, 2.5, -1.5, 0.5)),
        observation_indices=(5, 6, 9, 10, 21, 22, 25, 26),
        meta={
            "terrain_center": f"{TERRAIN_CENTER[0]!r},{TERRAIN_CENTER[1]!r}",
            "terrain_radius": repr(TERRAIN_RADIUS),
            "terrain_inside": "1",
            "hulls": "0,3,15,12;16,19,31,28",
        },
    )
    return presets


def long_rope_spec(pieces: int = 3, piece_size: int = 8, overlap: int = 2) -> ScenarioSpec:
    """A rope made of overlapping short pieces, ends pinned; same rest geometry as the rope preset."""
    n = piece_size + (pieces - 1) * (piece_size - overlap)
    pts = _arc(n, ROPE_SEGMENT, ROPE_TURN)
    pins = np.zeros(n, dtype=bool)
    pins[[0, n - 1]] = True
    return ScenarioSpec(
        ScenarioTag.rope,
        pts,
        _chain(pts, range(n), BEND_STIFFNESS),
        pin_mask=pins,
        meta={"pieces": str(pieces), "piece_size": str(piece_size), "overlap": str(overlap)},
    )


def max_violation(constraints, P: np.ndarray) -> float:
    """Largest equality |residual| or inequality penetration over constraints; P is (m, 2)."""
    worst = 0.0
    dists = [c for c in constraints if type(c) is Distance]
    if dists:
        ij = np.array([(c.i, c.j) for c in dists])
        rest = np.array([c.rest for c in dists])
        d = P[ij[:, 1]] - P[ij[:, 0]]
        worst = float(np.max(np.abs(np.hypot(d[:, 0], d[:, 1]) - rest)))
    Pb = P[None]
    for c in constraints:
        if type(c) is Distance:
            continue
        r = c.residuals(Pb)
        v = np.max(-r) if c.inequality else np.max(np.abs(r))
        worst = max(worst, float(v))
    return worst


def _newton_polish(constraints, P: np.ndarray, w: np.ndarray, iters: int = 20) -> np.ndarray:
    """Mass-weighted least-norm Gauss-Newton on the hard constraints (active inequalities only)."""
    sw = np.repeat(np.sqrt(w), 2)
    for _ in range(iters):
        rows, res = [], []
        Pb = P[None]
        for c in constraints:
            r = c.residuals(Pb)[0]
            J = c.jacobian(Pb)[0].reshape(r.size, -1)
            if c.inequality:
                act = r < 0.0
                r, J = r[act], J[act]
            rows.append(J)
            res.append(r)
        r = np.concatenate(res)
        if r.size == 0 or np.max(np.abs(r)) <= HARD_TOL:
            break
        J = np.concatenate(rows) * sw[None, :]
        y, *_ = np.linalg.lstsq(J, -r, rcond=None)
        P = P + (sw * y).reshape(-1, 2)
    return P


def _shape_match(P: np.ndarray, template: np.ndarray, bodies, w: np.ndarray) -> np.ndarray:
    """Replace each rigid body by the mass-weighted best proper rigid placement of its rest shape.

    Distance constraints alone also admit the mirror image of a body; strong
    contact corrections can push a body into it, which shape matching rules out.
    """
    P = P.copy()
    for body in bodies:
        idx = list(body)
        m = 1.0 / w[idx]
        src = template[idx] - (m[:, None] * template[idx]).sum(0) / m.sum()
        c = (m[:, None] * P[idx]).sum(0) / m.sum()
        dst = P[idx] - c
        s = (m * (src[:, 0] * dst[:, 1] - src[:, 1] * dst[:, 0])).sum()
        k = (m * (src * dst).sum(1)).sum()
        P[idx] = src @ _rotation(math.atan2(s, k)).T + c
    return P


def simulate_step(spec: ScenarioSpec, prev: SystemState, curr: SystemState, dt: float = DEFAULT_DT) -> SystemState:
    """Verlet position update followed by Gauss-Seidel constraint projection."""
    for s in (prev, curr):
        if s.num_particles != spec.num_particles:
            raise SimulationError(f"state has {s.num_particles} particles, scenario has {spec.num_particles}")
        if not np.all(np.isfinite(s.positions)):
            raise SimulationError("non-finite input positions")
    w = spec.inv_mass
    free = w > 0.0
    x0 = prev.points()
    x1 = curr.points()
    pred = x1.copy()
    pred[free] = 2.0 * x1[free] - x0[free] + np.asarray(spec.gravity) * dt * dt
    pts = pred.tolist()
    wl = w.tolist()
    rigid = spec.rigid_bodies()
    for _ in range(spec.solver_iterations):
        for c in spec.constraints:
            c.project(pts, wl)
        if rigid:
            pts = _shape_match(np.asarray(pts), spec.template, rigid, w).tolist()
    hard = spec.hard_constraints()
    P = np.asarray(pts)
    for _ in range(10):
        if max_violation(hard, P) <= HARD_TOL:
            break
        P = _newton_polish(hard, P, w)
        pts = P.tolist()
        for c in hard:
            c.project(pts, wl)
        P = np.asarray(pts)
    P[~free] = x1[~free]
    return curr.with_positions(P.reshape(-1))


def simulate(spec: ScenarioSpec, x0: SystemState, velocity: np.ndarray, num_frames: int, dt: float = DEFAULT_DT) -> np.ndarray:
    """Frames (num_frames, m*2) starting at ``x0`` with initial per-particle ``velocity``."""
    v = np.where(spec.pin_mask[:, None], 0.0, np.asarray(velocity).reshape(-1, 2))
    prev = x0.with_positions((x0.points() - v * dt).reshape(-1))
    curr = x0
    out = [curr.positions]
    for _ in range(num_frames - 1):
        prev, curr = curr, simulate_step(spec, prev, curr, dt)
        out.append(curr.positions)
    return np.stack(out)


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def random_initial_state(spec: ScenarioSpec, rng: np.random.Generator) -> tuple[SystemState, np.ndarray]:
    """Random rigid placement of each body plus a per-particle velocity kick."""
    P = spec.template.copy()
    for body, (x0, x1, y0, y1) in zip(spec.bodies, spec.spawn_boxes):
        idx = list(body)
        theta = rng.uniform(*spec.rotation_range)
        target = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        local = spec.template[idx] - spec.template[idx].mean(0)
        P[idx] = local @ _rotation(theta).T + target
    v = rng.uniform(spec.impulse_range[0], spec.impulse_range[1], size=P.shape)
    v[spec.pin_mask] = 0.0
    return SystemState(P.reshape(-1), 2, spec.pin_mask), v


def generate_dataset(
    spec: ScenarioSpec,
    num_samples: int,
    frames_per_sample: int,
    seed: int = 0,
    noise_sigma: float | None = None,
    observation_indices: Sequence[int] | None = None,
    dt: float = DEFAULT_DT,
) -> TrajectoryDataset:
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if frames_per_sample < 3:
        raise ValueError("frames_per_sample must be >= 3")
    obs = list(spec.observation_indices if observation_indices is None else observation_indices)
    for p in obs:
        if not 0 <= p < spec.num_particles:
            raise IndexError(f"observation index {p} out of range for {spec.num_particles} particles")
    sigma = spec.noise_sigma if noise_sigma is None else float(noise_sigma)
    cols = np.array([[2 * p, 2 * p + 1] for p in obs]).reshape(-1)
    out = np.empty((num_samples, frames_per_sample, cols.size))
    for i in range(num_samples):
        rng = np.random.default_rng([seed, i, 0])
        x0, v = random_initial_state(spec, rng)
        traj = simulate(spec, x0, v, frames_per_sample, dt)[:, cols]
        if sigma > 0:
            traj = traj + np.random.default_rng([seed, i, 1]).normal(0.0, sigma, size=traj.shape)
        out[i] = traj
    meta = dict(spec.meta)
    meta["gravity"] = f"{spec.gravity[0]!r},{spec.gravity[1]!r}"
    return TrajectoryDataset(
        out,
        obs,
        spec.tag,
        dt=dt,
        dim=2,
        pin_mask=spec.pin_mask[obs],
        noise_sigma=sigma,
        seed=seed,
        meta=meta,
    )


def with_overrides(spec: ScenarioSpec, **kw) -> ScenarioSpec:
    return replace(spec, **kw)
