"""Cached datasets and trained models for the acceptance suite.

Artifacts are keyed by their full configuration plus a hash of the package
sources, so any code change retrains from scratch.  Set NEUROPROJ_CACHE to
move the cache, or NEUROPROJ_NO_CACHE=1 to ignore it.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import neuroproj
from neuroproj.formats import read_dataset, write_dataset
from neuroproj.net import load_checkpoint, save_checkpoint
from neuroproj.sim import generate_dataset, scenario_presets
from neuroproj.training import TrainConfig, train, write_log_csv

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("NEUROPROJ_CACHE", ROOT / ".acceptance_cache"))
USE_CACHE = os.environ.get("NEUROPROJ_NO_CACHE", "") != "1"


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(neuroproj.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _key(kind: str, payload: dict) -> str:
    blob = json.dumps({"kind": kind, "src": source_hash(), **payload}, sort_keys=True)
    return f"{kind}-{hashlib.sha256(blob.encode()).hexdigest()[:16]}"


def dataset(scenario: str, samples: int, frames: int, seed: int, noise_sigma: float | None = None):
    payload = {"scenario": scenario, "samples": samples, "frames": frames, "seed": seed, "noise": noise_sigma}
    path = CACHE / (_key("data", payload) + ".nprj")
    if USE_CACHE and path.exists():
        return read_dataset(path)
    ds = generate_dataset(scenario_presets()[scenario], samples, frames, seed=seed, noise_sigma=noise_sigma)
    CACHE.mkdir(parents=True, exist_ok=True)
    write_dataset(path, ds)
    return ds


def trained(name: str, data_payload: dict, cfg: TrainConfig, fit=None):
    """Train (or load) a model; ``fit(dataset, cfg)`` returns (net, TrainResult) when given."""
    payload = {"name": name, "data": data_payload, "cfg": cfg.to_keyvalue()}
    stem = CACHE / _key("model", payload)
    ckpt = stem.with_suffix(".ckpt")
    if USE_CACHE and ckpt.exists():
        net, meta = load_checkpoint(ckpt)
        return net, meta
    ds = dataset(**data_payload)
    t0 = time.perf_counter()
    if fit is None:
        res = train(ds, cfg)
        net = res.net
    else:
        net, res = fit(ds, cfg)
    seconds = time.perf_counter() - t0
    meta = {
        **cfg.to_keyvalue(),
        "train_seconds": repr(seconds),
        "best_epoch": str(res.best_epoch),
        "best_val": repr(res.best_val),
        "first_train_loss": repr(res.log[0].train_loss),
        "last_train_loss": repr(res.log[-1].train_loss),
        "best_train_loss": repr(min(r.train_loss for r in res.log)),
    }
    CACHE.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, net, meta)
    write_log_csv(stem.with_suffix(".log.csv"), res.log)
    return load_checkpoint(ckpt)
