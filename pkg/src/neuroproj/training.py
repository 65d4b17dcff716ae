"""End-to-end training of constraint networks through the projection."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Var
from .core_types import GroupPartition, ProjectionConfig, TrajectoryDataset
from .net import AdamState, ConstraintNet, NetArch, adam_step, net_init, param_grad_through_input_grad
from .predictor import linear_predict_batch
from .projection import Constraint, ProjectionError, project_batch

__all__ = [
    "TrainConfig",
    "TrainLogRow",
    "TrainingDiverged",
    "TRAIN_PRESETS",
    "preset_config",
    "make_training_triples",
    "split_samples",
    "loss",
    "loss_var",
    "loss_and_grad",
    "evaluate_loss",
    "train",
    "fit",
    "check_dataset",
    "train_multigroup",
    "group_datasets",
    "write_log_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    arch: tuple[int, ...]
    batch_size: int = 256
    init_lr: float = 1e-3
    lr_step: int = 20
    lr_gamma: float = 0.8
    epochs: int = 600
    iterations: int = 5
    relaxation: float = 1.0
    seed: int = 0
    scenario: str = "rigid1"
    gravity: tuple[float, float] = (0.0, 0.0)
    center_input: bool = False
    grad_guard: float = 1e-12
    slope: float = 0.01
    val_fraction: float = 0.05
    triples: str = "all"
    samples_limit: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arch", tuple(int(w) for w in self.arch))
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        if self.arch[-1] != 1:
            raise ValueError("constraint network must end in width 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.triples != "all":
            raise ValueError("only the 'all' triples policy is supported")

    @property
    def net_arch(self) -> NetArch:
        return NetArch(self.arch, self.slope)

    @property
    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(self.iterations, self.relaxation, self.grad_guard, "jacobi", self.center_input)

    def with_input(self, width: int) -> TrainConfig:
        return replace(self, arch=(width,) + self.arch[1:])

    def to_keyvalue(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                out[k] = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                out[k] = "1" if v else "0"
            else:
                out[k] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_keyvalue(cls, items: Mapping[str, str], base: TrainConfig | None = None) -> TrainConfig:
        fields = cls.__dataclass_fields__
        kw = {}
        for k, v in items.items():
            if k not in fields:
                raise ValueError(f"unknown training config key {k!r}")
            kind = fields[k].type
            if k in ("arch",):
                kw[k] = tuple(int(t) for t in v.split(","))
            elif k == "gravity":
                kw[k] = tuple(float(t) for t in v.split(","))
            elif kind == "bool":
                kw[k] = v.strip().lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                kw[k] = int(v)
            elif kind == "float":
                kw[k] = float(v)
            else:
                kw[k] = v
        if base is not None:
            return replace(base, **kw)
        if "arch" not in kw:
            raise ValueError("training config needs an 'arch' entry")
        return cls(**kw)


_HIDDEN = (256, 256, 256, 256)
_G = (0.0, -9.8)

# One row per scenario; input width 8 is replaced by the observed width of the data.
TRAIN_PRESETS: dict[str, TrainConfig] = {
    "rigid1": TrainConfig((8,) + _HIDDEN + (1,), 256, 1e-3, 20, 0.8, 600, 5, scenario="rigid1"),
    "rigid2": TrainConfig((8,) + _HIDDEN + (1,), 512, 1e-3, 20, 0.8, 1000, 8, scenario="rigid2"),
    "rope": TrainConfig((8,) + _HIDDEN + (1,), 256, 1e-3, 20, 0.8, 1000, 10, scenario="rope"),
    "articulated": TrainConfig((8,) + _HIDDEN + (1,), 512, 1e-3, 20, 0.8, 1000, 8, scenario="articulated", gravity=_G),
    "collision": TrainConfig((8,) + (512,) * 4 + (1,), 256, 1e-3, 20, 0.8, 1000, 10, scenario="collision", gravity=_G),
}


def preset_config(scenario: str, input_width: int | None = None, **overrides) -> TrainConfig:
    if scenario not in TRAIN_PRESETS:
        raise ValueError(f"no training preset for scenario {scenario!r}")
    cfg = TRAIN_PRESETS[scenario]
    if input_width is not None:
        cfg = cfg.with_input(input_width)
    return replace(cfg, **overrides) if overrides else cfg


def make_training_triples(dataset: TrajectoryDataset) -> np.ndarray:
    """All consecutive (x_{n-1}, x_n, x_{n+1}) triples, sample-major; shape (T, 3, n)."""
    pos = dataset.positions
    s, f, n = pos.shape
    if f < 3:
        raise ValueError(f"need at least 3 frames per sample, got {f}")
    out = np.stack([pos[:, :-2], pos[:, 1:-1], pos[:, 2:]], axis=2)
    return out.reshape(s * (f - 2), 3, n)


def split_samples(num_samples: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) split of sample indices."""
    perm = np.random.default_rng([seed, 1]).permutation(num_samples)
    n_val = int(round(fraction * num_samples))
    if num_samples > 1:
        n_val = min(max(n_val, 1), num_samples - 1) if fraction > 0 else 0
    else:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def loss_var(
    constraint: Constraint,
    batch: np.ndarray,
    pcfg: ProjectionConfig,
    gravity=None,
    dt: float = 0.1,
    dim: int = 2,
) -> Var:
    """Mean squared coordinate error of the projected prediction against ``x_{n+1}``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    prev, curr, nxt = batch[:, 0], batch[:, 1], batch[:, 2]
    x_hat = linear_predict_batch(prev, curr, dt, gravity, np.ones(curr.shape[1], dtype=bool), dim)
    x, _ = project_batch(constraint, x_hat, pcfg, None, dim)
    d = x - nxt
    return (d * d).sum() / float(d.shape[0] * d.shape[1])


def loss(net: Constraint, batch: np.ndarray, cfg: TrainConfig | ProjectionConfig, gravity=None, dt: float = 0.1) -> float:
    pcfg = cfg.projection if isinstance(cfg, TrainConfig) else cfg
    if gravity is None and isinstance(cfg, TrainConfig):
        gravity = cfg.gravity
    return float(loss_var(net, batch, pcfg, gravity, dt).value)


def loss_and_grad(
    net: ConstraintNet, batch: np.ndarray, cfg: TrainConfig, dt: float = 0.1
) -> tuple[float, list[np.ndarray]]:
    pcfg = cfg.projection
    return param_grad_through_input_grad(net, lambda b: loss_var(b, batch, pcfg, cfg.gravity, dt))


def evaluate_loss(net: Constraint, triples: np.ndarray, cfg: TrainConfig, dt: float = 0.1, chunk: int = 1024) -> float:
    if len(triples) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(triples), chunk):
        part = triples[s : s + chunk]
        total += loss(net, part, cfg, cfg.gravity, dt) * len(part)
    return total / len(triples)


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_seconds: float


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, last_good: ConstraintNet, rows: list[TrainLogRow]):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch
        self.last_good = last_good
        self.rows = rows


@dataclass
class TrainResult:
    net: ConstraintNet
    log: list[TrainLogRow] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    final_net: ConstraintNet | None = None


def train(
    dataset: TrajectoryDataset,
    cfg: TrainConfig,
    on_epoch: Callable[[TrainLogRow], None] | None = None,
) -> TrainResult:
    """Adam on shuffled mini-batches; returns the checkpoint with the best validation loss."""
    check_dataset(dataset, cfg)
    dt = dataset.dt
    return fit(
        dataset,
        cfg,
        net_init(cfg.net_arch, cfg.seed),
        lambda net, batch: loss_and_grad(net, batch, cfg, dt),
        lambda net, triples: evaluate_loss(net, triples, cfg, dt),
        on_epoch,
    )


def check_dataset(dataset: TrajectoryDataset, cfg: TrainConfig) -> None:
    if dataset.scenario_tag.name != cfg.scenario:
        raise ValueError(f"dataset scenario {dataset.scenario_tag.name!r} does not match config {cfg.scenario!r}")
    n = dataset.num_particles * dataset.dim
    if cfg.arch[0] != n:
        raise ValueError(f"arch input width {cfg.arch[0]} does not match {n} observed coordinates")


def fit(
    dataset: TrajectoryDataset,
    cfg: TrainConfig,
    net: ConstraintNet,
    loss_grad: Callable[[ConstraintNet, np.ndarray], tuple[float, list[np.ndarray]]],
    eval_loss: Callable[[ConstraintNet, np.ndarray], float],
    on_epoch: Callable[[TrainLogRow], None] | None = None,
) -> TrainResult:
    """Shared optimisation loop: seeded split, per-epoch shuffling, step schedule, best-val checkpoint."""
    if cfg.samples_limit:
        dataset = dataset.subset(range(min(cfg.samples_limit, dataset.num_samples)))
    tr_idx, va_idx = split_samples(dataset.num_samples, cfg.val_fraction, cfg.seed)
    train_triples = make_training_triples(dataset.subset(tr_idx))
    val_triples = make_training_triples(dataset.subset(va_idx)) if len(va_idx) else train_triples[:0]

    params = net.params()
    opt = AdamState.for_params(params, init_lr=cfg.init_lr, lr_step=cfg.lr_step, lr_gamma=cfg.lr_gamma)
    rng = np.random.default_rng([cfg.seed, 2])
    t0 = time.perf_counter()

    def safe_eval(model, triples):
        if not len(triples):
            return float("nan")
        try:
            return eval_loss(model, triples)
        except ProjectionError:
            return float("nan")

    rows = [TrainLogRow(0, safe_eval(net, train_triples), safe_eval(net, val_triples), opt.lr_at(0), 0.0)]
    has_val = len(val_triples) > 0
    result = TrainResult(net.copy(), rows, 0, rows[0].val_loss if has_val else rows[0].train_loss)
    if on_epoch:
        on_epoch(rows[0])
    for epoch in range(1, cfg.epochs + 1):
        lr = opt.lr_at(epoch - 1)
        perm = rng.permutation(len(train_triples))
        total, count = 0.0, 0
        for s in range(0, len(perm), cfg.batch_size):
            batch = train_triples[perm[s : s + cfg.batch_size]]
            try:
                value, grads = loss_grad(net, batch)
            except ProjectionError:
                raise TrainingDiverged(epoch, result.net, rows) from None
            if not np.isfinite(value) or any(not np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(epoch, result.net, rows)
            params = adam_step(params, grads, opt, lr)
            net = net.with_params(params)
            total += value * len(batch)
            count += len(batch)
        vl = safe_eval(net, val_triples)
        row = TrainLogRow(epoch, total / count, vl, lr, time.perf_counter() - t0)
        rows.append(row)
        score = vl if has_val else row.train_loss
        if not np.isfinite(score):
            raise TrainingDiverged(epoch, result.net, rows)
        if score < result.best_val:
            result.net, result.best_epoch, result.best_val = net.copy(), epoch, score
        if on_epoch:
            on_epoch(row)
        log.info("epoch %d train %.3e val %.3e lr %.2e", epoch, row.train_loss, vl, lr)
    result.final_net = net
    return result


def group_datasets(dataset: TrajectoryDataset, partition: GroupPartition) -> list[TrajectoryDataset]:
    """Group-local views of a dataset, one per partition group."""
    return [dataset.particles(g) for g in partition.groups]


def train_multigroup(
    datasets: Sequence[TrajectoryDataset],
    partition: GroupPartition,
    cfg: TrainConfig,
    on_epoch: Callable[[str, TrainLogRow], None] | None = None,
) -> dict[str, TrainResult]:
    """Train each distinct module independently on the data of the groups bound to it."""
    if len(datasets) != len(partition.groups):
        raise ValueError("need one dataset per group")
    by_module: dict[str, list[int]] = {}
    for j, mod in enumerate(partition.net_binding):
        by_module.setdefault(mod, []).append(j)
    out = {}
    for mod, members in by_module.items():
        sizes = {len(partition.groups[j]) for j in members}
        if len(sizes) != 1:
            raise ValueError(f"module {mod!r} is bound to groups of different sizes {sorted(sizes)}")
        for j in members:
            if datasets[j].num_particles != len(partition.groups[j]):
                raise ValueError(
                    f"group {j} has {len(partition.groups[j])} particles but its data has {datasets[j].num_particles}"
                )
        first = datasets[members[0]]
        merged = TrajectoryDataset(
            np.concatenate([datasets[j].positions for j in members]),
            first.observation_indices,
            first.scenario_tag,
            first.dt,
            first.dim,
            first.pin_mask,
            first.noise_sigma,
            first.seed,
            dict(first.meta),
        )
        mcfg = cfg.with_input(first.num_particles * first.dim)
        cb = (lambda row, _m=mod: on_epoch(_m, row)) if on_epoch else None
        out[mod] = train(merged, mcfg, cb)
    return out


def write_log_csv(path, rows: Sequence[TrainLogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr", "wall_seconds"])
        for r in rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), f"{r.wall_seconds:.3f}"])
