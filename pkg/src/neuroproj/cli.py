"""Command-line pipeline: gen -> train -> rollout -> eval.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from .core_types import GroupPartition, ProjectionConfig, ScenarioTag, TrajectoryDataset
from .evaluation import (
    constraint_diagnostics,
    evaluate_trajectories,
    per_constraint_adapter,
    relaxation_sweep,
    resolve_spec,
    summary_table,
    write_summary_csv,
)
from .formats import FormatError, read_dataset, read_keyvalue, write_dataset
from .net import load_checkpoint, save_checkpoint
from .predictor import RolloutError, rollout_batch
from .projection import write_traces_csv
from .sim import SimulationError, generate_dataset, long_rope_spec, scenario_presets, with_overrides
from .training import (
    TrainConfig,
    TrainingDiverged,
    group_datasets,
    make_training_triples,
    preset_config,
    train,
    train_multigroup,
    write_log_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("neuroproj")


class UsageError(Exception):
    pass


def _threads(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


# --- gen ----------------------------------------------------------------------------

_SPEC_KEYS = {
    "gravity": _floats,
    "impulse_range": _floats,
    "solver_iterations": int,
    "noise_sigma": float,
    "observation_indices": _ints,
    "rotation_range": _floats,
}


def _gen_settings(args) -> dict:
    cfg: dict[str, str] = {}
    if args.config:
        cfg = read_keyvalue(args.config)
    for key in ("scenario", "samples", "frames", "seed", "dt", "noise_sigma", "observation_indices"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = str(val)
    if "scenario" not in cfg:
        raise UsageError("a scenario is required (--scenario or scenario= in --config)")
    return cfg


def _build_spec(cfg: dict):
    name = cfg.pop("scenario")
    if name == "long_rope" or "pieces" in cfg:
        spec = long_rope_spec(
            int(cfg.pop("pieces", 3)), int(cfg.pop("piece_size", 8)), int(cfg.pop("overlap", 2))
        )
        if name not in ("long_rope", "rope"):
            raise UsageError(f"pieces= only applies to the rope scenario, not {name!r}")
    else:
        presets = scenario_presets()
        try:
            tag = ScenarioTag.parse(name)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        spec = presets[tag.name]
    over = {}
    for key, conv in _SPEC_KEYS.items():
        if key in cfg:
            over[key] = conv(cfg.pop(key))
    return with_overrides(spec, **over) if over else spec


def cmd_gen(args) -> int:
    cfg = _gen_settings(args)
    try:
        spec = _build_spec(cfg)
        samples = int(cfg.pop("samples", 64))
        frames = int(cfg.pop("frames", 20))
        seed = int(cfg.pop("seed", 0))
        dt = float(cfg.pop("dt", 0.1))
    except ValueError as exc:
        raise UsageError(f"bad generator config: {exc}") from None
    if cfg:
        raise UsageError(f"unknown generator config keys: {', '.join(sorted(cfg))}")
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    ds = generate_dataset(spec, samples, frames, seed, dt=dt)
    write_dataset(out, ds)
    report = evaluate_trajectories(ds.positions, ds.scenario_tag, ds.observation_indices, meta=ds.meta)
    residual = ", ".join(f"{k} {v:.2e}" for k, v in report.summary().items())
    print(f"wrote {out}: {ds.num_samples} samples x {ds.frames_per_sample} frames, "
          f"{ds.num_particles} observed particles, scenario {ds.scenario_tag.name}")
    print(f"mean residuals (noise sigma {ds.noise_sigma:g}): {residual}")
    return EXIT_OK


# --- train --------------------------------------------------------------------------


def _train_config(args, ds: TrajectoryDataset) -> TrainConfig:
    width = ds.num_particles * ds.dim
    scen = ds.scenario_tag.name
    if args.config:
        items = read_keyvalue(args.config)
        preset = items.get("scenario", scen)
        base = preset_config(preset, width) if "arch" not in items else None
        cfg = TrainConfig.from_keyvalue(items, base)
    else:
        cfg = preset_config(scen, width)
    over = {}
    for key in ("epochs", "seed", "batch_size", "iterations", "samples_limit"):
        val = getattr(args, key)
        if val is not None:
            over[key] = val
    if args.relaxation is not None:
        over["relaxation"] = args.relaxation
    return replace(cfg, **over) if over else cfg


def _checkpoint_meta(cfg: TrainConfig, ds: TrajectoryDataset, result, module: str | None = None) -> dict:
    meta = dict(cfg.to_keyvalue())
    meta.update(
        {
            "dataset_scenario": ds.scenario_tag.name,
            "dt": repr(float(ds.dt)),
            "observation_indices": ",".join(str(i) for i in ds.observation_indices),
            "best_epoch": str(result.best_epoch),
            "best_val": repr(float(result.best_val)),
        }
    )
    if module is not None:
        meta["module"] = module
    return meta


def _module_path(out: Path, module: str, many: bool) -> Path:
    return out if not many else out.with_name(f"{out.stem}.{module}{out.suffix}")


def cmd_train(args) -> int:
    ds = read_dataset(args.dataset)
    cfg = _train_config(args, ds)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")

    def echo(row, module=None):
        if args.verbose:
            tag = f"[{module}] " if module else ""
            print(f"{tag}epoch {row.epoch}: train {row.train_loss:.4e} val {row.val_loss:.4e} lr {row.lr:.2e}")

    if args.groups:
        partition = GroupPartition.loads(Path(args.groups).read_text())
        try:
            partition.validate(ds.num_particles)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        try:
            results = train_multigroup(group_datasets(ds, partition), partition, cfg, lambda m, r: echo(r, m))
        except TrainingDiverged as exc:
            save_checkpoint(out, exc.last_good, {"diverged_epoch": str(exc.epoch)})
            write_log_csv(log_path, exc.rows)
            print(f"error: {exc}; last good checkpoint kept at {out}", file=sys.stderr)
            return EXIT_NUMERIC
        many = len(results) > 1
        rows = []
        for mod, res in results.items():
            path = _module_path(out, mod, many)
            mcfg = cfg.with_input(res.net.input_width)
            save_checkpoint(path, res.net, _checkpoint_meta(mcfg, ds, res, mod))
            rows += res.log
            last = res.log[-1]
            print(f"module {mod}: wrote {path}; final train {last.train_loss:.4e} val {last.val_loss:.4e}, "
                  f"best val {res.best_val:.4e} at epoch {res.best_epoch}")
        write_log_csv(log_path, rows)
        return EXIT_OK

    try:
        result = train(ds, cfg, echo)
    except TrainingDiverged as exc:
        save_checkpoint(out, exc.last_good, {**cfg.to_keyvalue(), "diverged_epoch": str(exc.epoch)})
        write_log_csv(log_path, exc.rows)
        print(f"error: {exc}; last good checkpoint kept at {out}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(out, result.net, _checkpoint_meta(cfg, ds, result))
    write_log_csv(log_path, result.log)
    last = result.log[-1]
    print(f"wrote {out} and {log_path}")
    print(f"final train loss {last.train_loss:.4e}, val loss {last.val_loss:.4e}; "
          f"best val {result.best_val:.4e} at epoch {result.best_epoch}")
    return EXIT_OK


# --- rollout ------------------------------------------------------------------------


def _projection_config(meta: dict, args) -> tuple[ProjectionConfig, tuple[float, float]]:
    iterations = args.iterations if args.iterations is not None else int(meta.get("iterations", 5))
    relaxation = args.relaxation if args.relaxation is not None else float(meta.get("relaxation", 1.0))
    center = meta.get("center_input", "0") in ("1", "true", "True")
    guard = float(meta.get("grad_guard", 1e-12))
    gravity = _floats(meta["gravity"]) if "gravity" in meta else (0.0, 0.0)
    return ProjectionConfig(iterations, relaxation, guard, args.sync, center), gravity


def _load_models(args):
    models, metas = {}, {}
    for item in args.module or []:
        if "=" not in item:
            raise UsageError(f"--module expects ID=PATH, got {item!r}")
        mid, path = item.split("=", 1)
        models[mid], metas[mid] = load_checkpoint(path)
    if args.checkpoint:
        models["default"], metas["default"] = load_checkpoint(args.checkpoint)
    if not models:
        raise UsageError("give a checkpoint or at least one --module ID=PATH")
    return models, metas


def cmd_rollout(args) -> int:
    models, metas = _load_models(args)
    init = read_dataset(args.init)
    first_meta = next(iter(metas.values()))
    cfg, gravity = _projection_config(first_meta, args)
    if args.gravity is not None:
        gravity = _floats(args.gravity)
    S = init.num_samples if args.samples is None else min(args.samples, init.num_samples)
    x0, x1 = init.positions[:S, 0], init.positions[:S, 1]
    partition = None
    if args.groups:
        partition = GroupPartition.loads(Path(args.groups).read_text())
        model = models
    else:
        if len(models) != 1:
            raise UsageError("several modules given without a --groups partition")
        model = next(iter(models.values()))
    try:
        if partition is not None:
            partition.validate(init.num_particles)
            for j, b in enumerate(partition.net_binding):
                if b not in models:
                    raise UsageError(f"group {j} is bound to module {b!r}, which was not given")
                if models[b].input_width != len(partition.groups[j]) * init.dim:
                    raise UsageError(
                        f"arity mismatch: group {j} has {len(partition.groups[j]) * init.dim} coordinates, "
                        f"module {b!r} expects {models[b].input_width}"
                    )
        elif model.input_width != init.num_particles * init.dim:
            raise UsageError(
                f"arity mismatch: data has {init.num_particles * init.dim} coordinates, "
                f"checkpoint expects {model.input_width}"
            )
        out, traces = rollout_batch(
            model, x0, x1, args.frames, cfg, gravity, init.dt, init.pin_mask, partition, init.dim, bool(args.trace)
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    except RolloutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    pred = TrajectoryDataset(
        out, init.observation_indices, init.scenario_tag, init.dt, init.dim, init.pin_mask, 0.0, init.seed,
        {**init.meta, "source": "rollout"},
    )
    write_dataset(args.out, pred)
    if args.trace:
        Path(args.trace).unlink(missing_ok=True)
        for k, tr in enumerate(traces):
            write_traces_csv(args.trace, tr, frame=k + 2, append=k > 0)
    print(f"wrote {args.out}: {S} rollouts x {args.frames} frames")
    return EXIT_OK


# --- eval ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    pred = read_dataset(args.predicted)
    truth = read_dataset(args.truth) if args.truth else None
    if truth is not None:
        p, t = pred.positions, truth.positions
        if p.shape[0] != t.shape[0] or p.shape[2] != t.shape[2] or t.shape[1] < p.shape[1]:
            raise UsageError(f"shape mismatch: predicted {p.shape} vs truth {t.shape}")
        truth_pos = t[:, : p.shape[1]]
    else:
        truth_pos = None
    try:
        report = evaluate_trajectories(pred.positions, args.scenario, pred.observation_indices, truth_pos, pred.meta)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "residuals.csv")
    if report.mse is not None:
        report.write_mse_csv(out / "mse.csv")
    label = args.label or report.scenario
    write_summary_csv(out / "summary.csv", {label: report})
    print(summary_table({label: report}))
    if report.mse is not None:
        print(f"MSE at final frame: {report.mse[-1]:.4e}")
    return EXIT_OK


# --- diagnostics and relaxation sweep ------------------------------------------------


def cmd_diagnose(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    cfg, gravity = _projection_config(meta, args)
    if net.input_width != ds.num_particles * ds.dim:
        raise UsageError(f"arity mismatch: data has {ds.num_particles * ds.dim} coordinates, net expects {net.input_width}")
    triples = make_training_triples(ds)[: args.frames_limit]
    diag = constraint_diagnostics(net, triples, cfg, gravity, ds.dt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    diag.write_scale_csv(out / "scale_sweep.csv")
    diag.write_iteration_csv(out / "iterations.csv")
    print(f"{len(triples)} frames; |C| final <= first in {100 * diag.converged_fraction():.1f}%")
    return EXIT_OK


def cmd_sweep(args) -> int:
    ds = read_dataset(args.init)
    spec = resolve_spec(ds.scenario_tag, ds.meta)
    partition = None
    if args.checkpoint:
        model, meta = load_checkpoint(args.checkpoint)
        cfg, gravity = _projection_config(meta, args)
    else:
        model, partition = per_constraint_adapter(spec.of_family("stretch"))
        cfg = ProjectionConfig(args.iterations or 10, 1.0, sync_mode=args.sync)
        gravity = spec.gravity
    if args.gravity is not None:
        gravity = _floats(args.gravity)
    r_values = list(_floats(args.relaxations))
    pos = ds.positions[args.sample]
    res = relaxation_sweep(
        model, pos[0], pos[1], r_values, args.frames, cfg, spec, gravity, ds.dt, ds.observation_indices, partition
    )
    res.write_csv(args.out)
    for r in r_values:
        print(f"r={r:g}: steady-state stretch residual {res.steady_state(r):.4e}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads; 1 gives bit-reproducible output")
    p = argparse.ArgumentParser(prog="neuroproj", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="simulate a trajectory dataset")
    g.add_argument("--config", help="key=value file naming a scenario and optional overrides")
    g.add_argument("--scenario", help="rigid1, rigid2, rope, articulated, collision or long_rope")
    g.add_argument("--samples", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    g.add_argument("--observe", dest="observation_indices", help="comma-separated particle indices")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite an existing output file")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a constraint network")
    t.add_argument("dataset")
    t.add_argument("--config", help="key=value training config; defaults to the scenario preset")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    t.add_argument("--groups", help="partition file; trains one network per module id")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--relaxation", type=float)
    t.add_argument("--samples-limit", dest="samples_limit", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", parents=[common], help="roll out trained networks from initial frame pairs")
    r.add_argument("checkpoint", nargs="?", help="checkpoint bound to module id 'default'")
    r.add_argument("--module", action="append", metavar="ID=PATH", help="extra module checkpoints")
    r.add_argument("--init", required=True, help="dataset whose first two frames seed each rollout")
    r.add_argument("--frames", type=int, default=50)
    r.add_argument("--samples", type=int)
    r.add_argument("--groups", help="partition file (one group per line, optional net=<id>)")
    r.add_argument("--sync", choices=("jacobi", "gauss_seidel"), default="jacobi")
    r.add_argument("--iterations", type=int)
    r.add_argument("--relaxation", type=float)
    r.add_argument("--gravity", help="override gravity, e.g. 0,-9.8")
    r.add_argument("--trace", help="write per-iteration projection traces to this CSV")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("eval", parents=[common], help="rollout MSE and constraint residuals")
    e.add_argument("predicted")
    e.add_argument("truth", nargs="?")
    e.add_argument("--scenario", required=True)
    e.add_argument("--label")
    e.add_argument("--out-dir", dest="out_dir", default=".")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", parents=[common], help="learned-constraint scale sweep and per-iteration traces")
    d.add_argument("checkpoint")
    d.add_argument("dataset")
    d.add_argument("--frames-limit", dest="frames_limit", type=int, default=1000)
    d.add_argument("--sync", default="jacobi", help=argparse.SUPPRESS)
    d.add_argument("--iterations", type=int)
    d.add_argument("--relaxation", type=float)
    d.add_argument("--out-dir", dest="out_dir", default=".")
    d.set_defaults(func=cmd_diagnose)

    w = sub.add_parser("sweep", parents=[common], help="relaxation sweep on a rope (analytic unless a checkpoint is given)")
    w.add_argument("init", help="dataset with the initial frames")
    w.add_argument("--checkpoint")
    w.add_argument("--relaxations", default="0.1,0.3,0.5,1.0")
    w.add_argument("--frames", type=int, default=50)
    w.add_argument("--sample", type=int, default=0)
    w.add_argument("--sync", choices=("jacobi", "gauss_seidel"), default="gauss_seidel")
    w.add_argument("--iterations", type=int)
    w.add_argument("--relaxation", type=float, help=argparse.SUPPRESS)
    w.add_argument("--gravity")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
