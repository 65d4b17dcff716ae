"""Binary dataset (NPRJ1) and checkpoint (NPRJM1) files with key=value sidecars."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core_types import ScenarioTag, TrajectoryDataset

DATASET_MAGIC = b"NPRJ1"
MODEL_MAGIC = b"NPRJM1"


class FormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_keyvalue(path, items: dict) -> None:
    lines = [f"{k}={v}\n" for k, v in items.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_keyvalue(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dataset_to_bytes(ds: TrajectoryDataset) -> bytes:
    s, f, n = ds.positions.shape
    pins = ds.pin_mask.astype(np.uint8).tobytes()
    head = DATASET_MAGIC + struct.pack(
        "<IIIIdI", ds.dim, ds.num_particles, s, f, float(ds.dt), int(ds.scenario_tag)
    )
    head += struct.pack("<I", len(pins)) + pins
    return head + np.ascontiguousarray(ds.positions, dtype="<f8").tobytes()


def dataset_from_bytes(data: bytes, meta: dict[str, str] | None = None) -> TrajectoryDataset:
    if data[:5] != DATASET_MAGIC:
        raise FormatError("not an NPRJ1 dataset (bad magic)")
    off = 5
    try:
        dim, m, s, f, dt, tag = struct.unpack_from("<IIIIdI", data, off)
        off += struct.calcsize("<IIIIdI")
        (npin,) = struct.unpack_from("<I", data, off)
    except struct.error as exc:
        raise FormatError(f"truncated NPRJ1 header: {exc}") from None
    off += 4
    pins = np.frombuffer(data, dtype=np.uint8, count=npin, offset=off).astype(bool)
    off += npin
    count = s * f * m * dim
    if len(data) - off != 8 * count:
        raise FormatError(f"expected {8 * count} payload bytes, found {len(data) - off}")
    pos = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(s, f, m * dim)
    meta = dict(meta or {})
    obs = meta.pop("observation_indices", None)
    obs_idx = [int(t) for t in obs.split(",") if t] if obs else list(range(m))
    noise = float(meta.pop("noise_sigma", "0.0"))
    seed = meta.pop("seed", None)
    return TrajectoryDataset(
        pos,
        obs_idx,
        ScenarioTag(tag),
        dt=dt,
        dim=dim,
        pin_mask=pins if npin else None,
        noise_sigma=noise,
        seed=int(seed) if seed not in (None, "", "None") else None,
        meta=meta,
    )


def dataset_metadata(ds: TrajectoryDataset) -> dict[str, str]:
    items = {
        "scenario": ds.scenario_tag.name,
        "seed": ds.seed,
        "noise_sigma": repr(float(ds.noise_sigma)),
        "observation_indices": ",".join(str(i) for i in ds.observation_indices),
    }
    items.update({k: v for k, v in ds.meta.items() if k not in items})
    return items


def write_dataset(path, ds: TrajectoryDataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))
    write_keyvalue(sidecar_path(path), dataset_metadata(ds))


def read_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    meta_file = sidecar_path(path)
    meta = read_keyvalue(meta_file) if meta_file.exists() else {}
    meta.pop("scenario", None)
    return dataset_from_bytes(path.read_bytes(), meta)
