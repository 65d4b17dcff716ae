"""Rollout error, analytic constraint residuals, learned-constraint diagnostics and a naive baseline."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tape, Var
from .constraints import Bend, CircleBoundary, Distance, PolygonCollision, wrap_angle
from .core_types import GroupPartition, ProjectionConfig, ScenarioTag, TrajectoryDataset, TrajectorySample
from .net import ConstraintNet, NetArch, mlp_apply, net_init
from .predictor import linear_predict_batch, rollout_batch
from .projection import AnalyticConstraint, Constraint, centering_matrix, project_batch
from .sim import ScenarioSpec, long_rope_spec, scenario_presets
from .training import TrainConfig, TrainResult, fit, make_training_triples

__all__ = [
    "FAMILIES",
    "MetricReport",
    "ResidualModel",
    "resolve_spec",
    "rollout_mse",
    "constraint_residuals",
    "evaluate_trajectories",
    "merge_reports",
    "summary_table",
    "write_summary_csv",
    "BaselineMLP",
    "baseline_arch",
    "train_baseline",
    "baseline_rollout",
    "naive_mlp_baseline",
    "Diagnostics",
    "constraint_diagnostics",
    "SweepResult",
    "relaxation_sweep",
    "per_constraint_adapter",
]

FAMILIES = ("shape", "stretch", "bend", "collision")
_ROW_NAMES = {"shape": "Shape", "stretch": "Stretch", "bend": "Bend", "collision": "Collision"}


def resolve_spec(scenario, meta: Mapping[str, str] | None = None) -> ScenarioSpec:
    """Scenario geometry for evaluation; a rope with a ``pieces`` entry is a long rope."""
    tag = ScenarioTag.parse(scenario)
    meta = meta or {}
    if tag is ScenarioTag.rope and "pieces" in meta:
        return long_rope_spec(int(meta["pieces"]), int(meta.get("piece_size", 8)), int(meta.get("overlap", 2)))
    return scenario_presets()[tag.name]


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best rotations and translations mapping ``src`` (k, 2) onto each ``dst`` (F, k, 2)."""
    sc = src - src.mean(0)
    dc = dst - dst.mean(1, keepdims=True)
    H = np.einsum("ki,fkj->fij", sc, dc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("fij,fjk->fik", U, Vt)))
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = d
    R = np.einsum("fji,fjk,fkl->fil", Vt, D, np.transpose(U, (0, 2, 1)))
    t = dst.mean(1) - np.einsum("fij,j->fi", R, src.mean(0))
    return R, t


class ResidualModel:
    """Analytic residual families of a scenario, restricted to its observed particles.

    Distance and bend terms are kept when all their particles are observed.
    Collision terms are measured at body corners; corners that are not
    observed are reconstructed by a rigid fit of the rest shape to the
    observed points of their body.
    """

    def __init__(self, spec: ScenarioSpec, observation_indices: Sequence[int] | None = None):
        obs = list(spec.observation_indices if observation_indices is None else observation_indices)
        for p in obs:
            if not 0 <= p < spec.num_particles:
                raise ValueError(f"observation index {p} outside the {spec.num_particles} scenario particles")
        self.spec = spec
        self.obs = obs
        local = {g: k for k, g in enumerate(obs)}
        self.num_observed = len(obs)
        dist: dict[str, list] = {"shape": [], "stretch": []}
        bend = []
        terrain: list[CircleBoundary] = []
        contacts: list[PolygonCollision] = []
        for c in spec.constraints:
            if isinstance(c, Distance) and c.i in local and c.j in local:
                dist.setdefault(c.family, []).append((local[c.i], local[c.j], c.rest))
            elif isinstance(c, Bend) and all(p in local for p in c.particles):
                bend.append((local[c.i], local[c.j], local[c.k], c.rest_angle))
            elif isinstance(c, CircleBoundary):
                terrain.append(c)
            elif isinstance(c, PolygonCollision):
                contacts.append(c)
        self._dist = {k: np.array(v, dtype=np.float64).reshape(-1, 3) for k, v in dist.items() if v}
        self._bend = np.array(bend, dtype=np.float64).reshape(-1, 4)
        self._terrain = terrain
        self._contacts = contacts
        self._corners = self._corner_plan(local)

    def _corner_plan(self, local: dict[int, int]):
        hulls = []
        for c in self._contacts:
            hulls += [(c.body_a, c.hull_a), (c.body_b, c.hull_b)]
        if not hulls and self._terrain:
            # Terrain without bodies: every observed constrained particle is a contact point.
            pts = sorted({p for t in self._terrain for p in t.particles if p in local})
            return [("direct", pts, None, None)] if pts else []
        plan = []
        tpl = self.spec.template
        for body, hull in hulls:
            if all(h in local for h in hull):
                plan.append(("direct", list(hull), None, None))
                continue
            seen = [p for p in body if p in local]
            if len(seen) < 2:
                raise ValueError(f"body {body[:3]}... needs at least two observed particles to place its corners")
            plan.append(("fit", list(hull), seen, tpl[list(hull)]))
        return plan

    @property
    def families(self) -> tuple[str, ...]:
        out = [f for f in ("shape", "stretch") if f in self._dist]
        if len(self._bend):
            out.append("bend")
        if self._corners:
            out.append("collision")
        return tuple(out)

    def corners(self, P: np.ndarray) -> list[np.ndarray]:
        """Corner positions per body; P is (F, m_obs, 2)."""
        local = {g: k for k, g in enumerate(self.obs)}
        out = []
        for kind, hull, seen, tpl_c in self._corners:
            if kind == "direct":
                out.append(P[:, [local[h] for h in hull]])
            else:
                src = self.spec.template[seen]
                R, t = _kabsch(src, P[:, [local[p] for p in seen]])
                out.append(np.einsum("fij,kj->fki", R, tpl_c) + t[:, None])
        return out

    def terms(self, X: np.ndarray) -> dict[str, np.ndarray]:
        """Non-negative residual terms per family, each (F, K)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != 2 * self.num_observed:
            raise ValueError(f"trajectory has {X.shape[1]} coordinates, scenario observes {2 * self.num_observed}")
        P = X.reshape(X.shape[0], -1, 2)
        out: dict[str, np.ndarray] = {}
        for fam, arr in self._dist.items():
            i, j = arr[:, 0].astype(int), arr[:, 1].astype(int)
            out[fam] = np.abs(np.linalg.norm(P[:, j] - P[:, i], axis=-1) - arr[:, 2])
        if len(self._bend):
            i, j, k = (self._bend[:, c].astype(int) for c in range(3))
            a = P[:, j] - P[:, i]
            b = P[:, k] - P[:, j]
            ang = np.arctan2(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0], (a * b).sum(-1))
            out["bend"] = np.abs(wrap_angle(ang - self._bend[:, 3]))
        if self._corners:
            out["collision"] = self._collision(self.corners(P))
        return out

    def _collision(self, corners: list[np.ndarray]) -> np.ndarray:
        F = corners[0].shape[0]
        parts = []
        Q = np.concatenate(corners, axis=1)
        for t in self._terrain:
            parts.append(np.maximum(0.0, -t.signed_distance(Q)))
        start = 0
        spans = []
        for c in corners:
            spans.append(tuple(range(start, start + c.shape[1])))
            start += c.shape[1]
        for k in range(0, len(spans) - 1, 2):
            a, b = spans[k], spans[k + 1]
            pc = PolygonCollision(a, a, b, b)
            parts.append(np.maximum(0.0, -pc.residuals(Q)))
        return np.concatenate(parts, axis=1) if parts else np.zeros((F, 0))

    def __call__(self, X: np.ndarray) -> dict[str, np.ndarray]:
        """Per-frame mean residual of each family, each (F,)."""
        return {k: v.mean(axis=1) for k, v in self.terms(X).items()}


def _positions(traj) -> np.ndarray:
    return traj.positions if isinstance(traj, (TrajectorySample, TrajectoryDataset)) else np.asarray(traj, dtype=np.float64)


def rollout_mse(predicted, truth) -> np.ndarray:
    """Mean squared coordinate error per frame; (F,) for one trajectory, (S, F) for a stack."""
    p, t = _positions(predicted), _positions(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: predicted {p.shape} vs truth {t.shape}")
    d = p - t
    return (d * d).mean(axis=-1)


@dataclass
class MetricReport:
    """Per-frame metrics averaged over samples, plus per-sample frame means."""

    scenario: str
    num_samples: int
    num_frames: int
    residuals: dict[str, np.ndarray]
    sample_means: dict[str, np.ndarray]
    mse: np.ndarray | None = None
    sample_mse: np.ndarray | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        arrays = list(self.residuals.values()) + list(self.sample_means.values())
        if self.mse is not None:
            arrays.append(self.mse)
        for a in arrays:
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise ValueError("metric values must be finite and non-negative")

    @property
    def families(self) -> tuple[str, ...]:
        return tuple(f for f in FAMILIES if f in self.residuals)

    def summary(self) -> dict[str, float]:
        """Mean over frames, then over samples."""
        return {f: float(self.sample_means[f].mean()) for f in self.families}

    def at_frame(self, family: str, frame: int) -> float:
        return float(self.residuals[family][frame])

    def write_csv(self, path) -> None:
        fams = self.families
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "mse"] + list(fams))
            for f in range(self.num_frames):
                mse = "" if self.mse is None else repr(float(self.mse[f]))
                w.writerow([f, mse] + [repr(float(self.residuals[k][f])) for k in fams])

    def write_mse_csv(self, path) -> None:
        if self.mse is None:
            raise ValueError("report has no ground truth MSE")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "mse"])
            for f, v in enumerate(self.mse):
                w.writerow([f, repr(float(v))])


def constraint_residuals(
    traj, scenario, observation_indices: Sequence[int] | None = None, meta: Mapping[str, str] | None = None
) -> MetricReport:
    """Residual families of one trajectory (or a stack of them) on its observed points."""
    pos = _positions(traj)
    if isinstance(traj, TrajectoryDataset):
        observation_indices = observation_indices or traj.observation_indices
        meta = meta or traj.meta
    return evaluate_trajectories(pos if pos.ndim == 3 else pos[None], scenario, observation_indices, meta=meta)


def evaluate_trajectories(
    predicted,
    scenario,
    observation_indices: Sequence[int] | None = None,
    truth=None,
    meta: Mapping[str, str] | None = None,
    model: ResidualModel | None = None,
) -> MetricReport:
    """Evaluate a stack of rollouts (S, F, n); optionally against ground truth of the same shape."""
    pred = _positions(predicted)
    if pred.ndim == 2:
        pred = pred[None]
    tag = ScenarioTag.parse(scenario)
    model = model or ResidualModel(resolve_spec(tag, meta), observation_indices)
    S, F, _ = pred.shape
    per = [model(pred[s]) for s in range(S)]
    fams = model.families
    residuals = {f: np.mean([p[f] for p in per], axis=0) for f in fams}
    sample_means = {f: np.array([p[f].mean() for p in per]) for f in fams}
    mse = sample_mse = None
    if truth is not None:
        t = _positions(truth)
        t = t[None] if t.ndim == 2 else t
        per_mse = rollout_mse(pred, t)
        mse, sample_mse = per_mse.mean(0), per_mse.mean(1)
    return MetricReport(tag.name, S, F, residuals, sample_means, mse, sample_mse)


def merge_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Combine reports over disjoint sample sets, weighting by sample count, in the given order."""
    if not reports:
        raise ValueError("nothing to merge")
    first = reports[0]
    for r in reports[1:]:
        if r.scenario != first.scenario or r.num_frames != first.num_frames or r.families != first.families:
            raise ValueError("reports differ in scenario, frame count or families")
    total = sum(r.num_samples for r in reports)
    w = [r.num_samples / total for r in reports]
    residuals = {f: sum(wi * r.residuals[f] for wi, r in zip(w, reports)) for f in first.families}
    sample_means = {f: np.concatenate([r.sample_means[f] for r in reports]) for f in first.families}
    mse = sample_mse = None
    if all(r.mse is not None for r in reports):
        mse = sum(wi * r.mse for wi, r in zip(w, reports))
        sample_mse = np.concatenate([r.sample_mse for r in reports])
    return MetricReport(first.scenario, total, first.num_frames, residuals, sample_means, mse, sample_mse)


def summary_table(columns: Mapping[str, MetricReport]) -> str:
    """Rows Shape/Stretch/Bend/Collision by one column per report; '-' where a family is absent."""
    names = list(columns)
    lines = ["\t".join([""] + names)]
    for fam in FAMILIES:
        if not any(fam in columns[n].residuals for n in names):
            continue
        cells = []
        for n in names:
            s = columns[n].summary()
            cells.append(f"{s[fam]:.1e}" if fam in s else "-")
        lines.append("\t".join([_ROW_NAMES[fam]] + cells))
    return "\n".join(lines)


def write_summary_csv(path, columns: Mapping[str, MetricReport]) -> None:
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["constraint"] + names)
        for fam in FAMILIES:
            if not any(fam in columns[n].residuals for n in names):
                continue
            row = [_ROW_NAMES[fam]]
            for n in names:
                s = columns[n].summary()
                row.append(repr(s[fam]) if fam in s else "")
            w.writerow(row)


# --- naive baseline -------------------------------------------------------------


def baseline_arch(width: int, hidden: Sequence[int] = (256, 256, 256, 256), slope: float = 0.01) -> NetArch:
    return NetArch((width,) + tuple(hidden) + (width,), slope)


@dataclass
class BaselineMLP:
    """``x = x_hat + MLP(x_hat)``: a direct correction of the linear prediction."""

    net: ConstraintNet

    @property
    def input_width(self) -> int:
        return self.net.input_width

    @property
    def num_params(self) -> int:
        return self.net.arch.num_params

    def correct_var(self, params: Sequence[Var], x_hat, free=None) -> Var:
        x = x_hat if isinstance(x_hat, Var) else Var(np.atleast_2d(x_hat))
        dx = mlp_apply(params, x, self.net.arch.slope)
        if free is not None:
            dx = dx * np.asarray(free, dtype=np.float64)
        return x + dx

    def correct(self, x_hat, free=None) -> np.ndarray:
        return self.correct_var(self.net.bind().params, x_hat, free).value


def _baseline_loss_var(model: BaselineMLP, params, batch: np.ndarray, gravity, dt: float) -> Var:
    prev, curr, nxt = batch[:, 0], batch[:, 1], batch[:, 2]
    x_hat = linear_predict_batch(prev, curr, dt, gravity, np.ones(curr.shape[1], dtype=bool))
    d = model.correct_var(params, x_hat) - nxt
    return (d * d).sum() / float(d.shape[0] * d.shape[1])


def _baseline_loss_and_grad(net: ConstraintNet, batch, cfg: TrainConfig, dt: float):
    model = BaselineMLP(net)
    with Tape() as tape:
        pv = [tape.watch(p) for p in net.params()]
        loss = _baseline_loss_var(model, pv, batch, cfg.gravity, dt)
    grads = tape.gradient(loss, pv)
    return float(loss.value.reshape(())), [g.value for g in grads]


def _baseline_eval(net: ConstraintNet, triples, cfg: TrainConfig, dt: float, chunk: int = 1024) -> float:
    model = BaselineMLP(net)
    params = net.bind().params
    total = 0.0
    for s in range(0, len(triples), chunk):
        part = triples[s : s + chunk]
        total += float(_baseline_loss_var(model, params, part, cfg.gravity, dt).value) * len(part)
    return total / len(triples)


def train_baseline(dataset: TrajectoryDataset, cfg: TrainConfig, hidden: Sequence[int] | None = None, on_epoch=None):
    """Train the baseline with the projection model's data, split, schedule and loss.

    Hidden widths default to those of ``cfg.arch`` so both models have
    nearly the same number of parameters.
    """
    width = dataset.num_particles * dataset.dim
    hidden = tuple(cfg.arch[1:-1]) if hidden is None else tuple(hidden)
    arch = baseline_arch(width, hidden, cfg.slope)
    dt = dataset.dt
    init = net_init(arch, cfg.seed)
    # start from pure extrapolation: a zero output layer means no correction
    init.weights[-1][...] = 0.0
    init.biases[-1][...] = 0.0
    result: TrainResult = fit(
        dataset,
        cfg,
        init,
        lambda net, batch: _baseline_loss_and_grad(net, batch, cfg, dt),
        lambda net, triples: _baseline_eval(net, triples, cfg, dt),
        on_epoch,
    )
    return BaselineMLP(result.net), result


def baseline_rollout(
    model: BaselineMLP, x0, x1, num_frames: int, gravity=None, dt: float = 0.1, pin_mask=None, dim: int = 2
) -> np.ndarray:
    """Recursive rollout (B, num_frames, n) alternating linear prediction and the learned correction."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    n = x1.shape[1]
    pins = np.zeros(n // dim, dtype=bool) if pin_mask is None else np.asarray(pin_mask, dtype=bool)
    free = np.repeat(~pins, dim)
    frames = [x0, x1]
    for _ in range(2, num_frames):
        x_hat = linear_predict_batch(frames[-2], frames[-1], dt, gravity, free, dim)
        frames.append(model.correct(x_hat, free))
    return np.stack(frames, axis=1)


def naive_mlp_baseline(
    train: TrajectoryDataset, cfg: TrainConfig, predict: TrajectoryDataset, num_frames: int | None = None
) -> tuple[BaselineMLP, np.ndarray]:
    """Train on ``train`` and roll out from the first two frames of every ``predict`` sample."""
    model, _ = train_baseline(train, cfg)
    frames = num_frames or predict.frames_per_sample
    pos = predict.positions
    out = baseline_rollout(model, pos[:, 0], pos[:, 1], frames, cfg.gravity, predict.dt, predict.pin_mask, predict.dim)
    return model, out


# --- diagnostics ------------------------------------------------------------------


@dataclass
class Diagnostics:
    """Learned-constraint behaviour on held-out frames.

    ``scale_c`` is |C_net| (mean over frames) for rest shapes scaled about
    their centroid; ``iter_c`` is |C_net| at the input of each projection
    iteration plus one final row after the last update, and ``iter_dx`` the
    correction norm |delta x| of each iteration.
    """

    scales: np.ndarray
    scale_c: np.ndarray
    iter_c: np.ndarray
    iter_dx: np.ndarray

    def converged_fraction(self) -> float:
        """Fraction of frames whose |C| after the last iteration is at most its first-iteration value."""
        return float(np.mean(self.iter_c[-1] <= self.iter_c[0]))

    def median_dx(self) -> np.ndarray:
        return np.median(self.iter_dx, axis=1)

    def median_c(self) -> np.ndarray:
        return np.median(self.iter_c, axis=1)

    def write_scale_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scale", "mean_abs_C"])
            for s, c in zip(self.scales, self.scale_c):
                w.writerow([repr(float(s)), repr(float(c))])

    def write_iteration_csv(self, path) -> None:
        n_it = self.iter_dx.shape[0]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "median_abs_C", "mean_abs_C", "median_abs_dx", "mean_abs_dx"])
            for k in range(self.iter_c.shape[0]):
                dx = self.iter_dx[k] if k < n_it else None
                w.writerow(
                    [
                        k + 1 if k < n_it else "final",
                        repr(float(np.median(self.iter_c[k]))),
                        repr(float(np.mean(self.iter_c[k]))),
                        "" if dx is None else repr(float(np.median(dx))),
                        "" if dx is None else repr(float(np.mean(dx))),
                    ]
                )


def _scaled(X: np.ndarray, s: float, dim: int) -> np.ndarray:
    P = X.reshape(X.shape[0], -1, dim)
    c = P.mean(1, keepdims=True)
    return (c + s * (P - c)).reshape(X.shape)


def constraint_diagnostics(
    net: Constraint,
    triples: np.ndarray,
    cfg: ProjectionConfig,
    gravity=None,
    dt: float = 0.1,
    scales: Sequence[float] | None = None,
    dim: int = 2,
) -> Diagnostics:
    """Scale sweep on the target frames of ``triples`` and per-iteration traces of their projection."""
    if isinstance(triples, TrajectoryDataset):
        triples = make_training_triples(triples)
    triples = np.asarray(triples, dtype=np.float64)
    scales = np.linspace(0.8, 1.2, 21) if scales is None else np.asarray(scales, dtype=np.float64)
    targets = triples[:, 2]
    scale_c = []
    for s in scales:
        X = _scaled(targets, float(s), dim)
        if cfg.center_input:
            X = X @ centering_matrix(X.shape[1] // dim, dim)
        c, _ = net.evaluate(Var(X))
        scale_c.append(float(np.mean(np.abs(c.value))))
    free = np.ones(targets.shape[1], dtype=bool)
    x_hat = linear_predict_batch(triples[:, 0], triples[:, 1], dt, gravity, free, dim)
    _, trace = project_batch(net, x_hat, cfg, None, dim, trace_final=True)
    iter_c = np.abs(np.array(trace.constraint + [trace.final_constraint]))
    iter_dx = np.array(trace.correction_norm) * cfg.relaxation
    return Diagnostics(scales, np.array(scale_c), iter_c, iter_dx.reshape(-1, len(targets)))


# --- relaxation sweep -------------------------------------------------------------


@dataclass
class SweepResult:
    relaxations: list[float]
    rollouts: dict[float, np.ndarray]
    stretch: dict[float, np.ndarray]

    def steady_state(self, r: float, tail: float = 0.25) -> float:
        """Mean stretch residual over the last ``tail`` fraction of frames."""
        s = self.stretch[r]
        k = max(1, int(round(tail * s.size)))
        return float(s[-k:].mean())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["relaxation", "frame", "stretch"])
            for r in self.relaxations:
                for f, v in enumerate(self.stretch[r]):
                    w.writerow([repr(float(r)), f, repr(float(v))])


def per_constraint_adapter(constraints: Sequence, dim: int = 2) -> tuple[dict[str, AnalyticConstraint], GroupPartition]:
    """One group and one analytic module per constraint, for use with multi-group projection.

    Projecting each constraint on its own is the classical position-based
    scheme; with Gauss-Seidel synchronisation it is exactly its inner loop.
    """
    modules, groups, binding = {}, [], []
    for k, c in enumerate(constraints):
        parts = tuple(sorted(set(c.particles)))
        local = {p: i for i, p in enumerate(parts)}
        modules[f"c{k}"] = AnalyticConstraint([_relabel(c, local)], len(parts), dim)
        groups.append(parts)
        binding.append(f"c{k}")
    return modules, GroupPartition(tuple(groups), tuple(binding))


def _relabel(c, local: dict[int, int]):
    if isinstance(c, Distance):
        return Distance(local[c.i], local[c.j], c.rest, c.family)
    if isinstance(c, Bend):
        return Bend(local[c.i], local[c.j], local[c.k], c.rest_angle, c.stiffness, c.family)
    raise TypeError(f"cannot relabel {type(c).__name__}")


def relaxation_sweep(
    model: Constraint | Mapping[str, Constraint],
    x0,
    x1,
    relaxations: Sequence[float],
    num_frames: int,
    cfg: ProjectionConfig,
    spec: ScenarioSpec,
    gravity=None,
    dt: float = 0.1,
    observation_indices: Sequence[int] | None = None,
    partition: GroupPartition | None = None,
) -> SweepResult:
    """Roll out one initial frame pair per relaxation value and track the mean stretch residual."""
    residual = ResidualModel(spec, observation_indices)
    if "stretch" not in residual.families:
        raise ValueError("relaxation sweep needs a scenario with stretch constraints")
    pins = spec.pin_mask[residual.obs]
    rollouts, stretch = {}, {}
    for r in relaxations:
        rc = ProjectionConfig(cfg.iterations, float(r), cfg.grad_guard, cfg.sync_mode, cfg.center_input)
        out, _ = rollout_batch(model, x0, x1, num_frames, rc, gravity, dt, pins, partition)
        rollouts[r] = out[0]
        stretch[r] = residual(out[0])["stretch"]
    return SweepResult(list(relaxations), rollouts, stretch)
