"""Point/normal text files, synthetic dataset directories, and binary checkpoints.

Checkpoint layout: an ASCII header of ``key = value`` lines, a tensor directory
(``tensor <name> <shape> <offset> <count>`` with offsets counted in float64
elements), the line ``end-header``, then the little-endian float64 payload.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .model import ModelConfig
from .training import AdamState, TrainConfig, TrainState

CHECKPOINT_MAGIC = "HSURF-CHECKPOINT"
CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"


class DataError(ValueError):
    pass


class CheckpointError(DataError):
    pass


# ---------------------------------------------------------------------------
# text point files


def _read_triples(path, what: str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{what} file not found: {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise DataError(f"{path}:{lineno}: not a decimal number: {line.strip()!r}") from None
    if not rows:
        raise DataError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def load_xyz(path) -> PointCloud:
    return PointCloud(_read_triples(path, "point"))


def load_normals(path, cloud: PointCloud) -> PointCloud:
    """Attach unit normals from ``path``; near-unit rows are renormalized."""
    normals = _read_triples(path, "normals")
    if len(normals) != len(cloud):
        raise DataError(f"{path}: {len(normals)} normals for {len(cloud)} points")
    lengths = np.linalg.norm(normals, axis=1)
    bad = np.flatnonzero(np.abs(lengths - 1.0) > 1e-3)
    if bad.size:
        raise DataError(f"{path}:{bad[0] + 1}: normal length {lengths[bad[0]]:.6g} is not unit")
    return PointCloud(cloud.points, normals / lengths[:, None])


def save_triples(path, values: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.asarray(values, dtype=np.float64).reshape(-1, 3):
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def save_xyz(path, cloud: PointCloud) -> None:
    save_triples(path, cloud.points)


def save_normals(path, normals: np.ndarray) -> None:
    save_triples(path, normals)


# ---------------------------------------------------------------------------
# dataset directories


def write_shape(directory, name: str, cloud: PointCloud, meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_xyz(directory / f"{name}.xyz", cloud)
    if cloud.normals is not None:
        save_normals(directory / f"{name}.normals", cloud.normals)
    manifest = read_manifest(directory)
    manifest[name] = meta
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        return {}
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_dataset(directory) -> list[tuple[str, str, PointCloud]]:
    """All ``<name>.xyz`` (+ ``.normals``) in a directory as ``(name, corruption, cloud)``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    manifest = read_manifest(directory)
    out = []
    for xyz in sorted(directory.glob("*.xyz")):
        cloud = load_xyz(xyz)
        nrm = xyz.with_suffix(".normals")
        if nrm.is_file():
            cloud = load_normals(nrm, cloud)
        label = manifest.get(xyz.stem, {}).get("corruption", "unlabeled")
        out.append((xyz.stem, label, cloud))
    if not out:
        raise DataError(f"no .xyz files in {directory}")
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _config_to_header(prefix: str, cfg) -> list[str]:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{prefix}.{f.name} = {v}")
    return lines


def _config_from_header(cls, values: dict[str, str]):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        # annotations are strings under postponed evaluation
        if f.name == "scales":
            kwargs[f.name] = tuple(int(x) for x in raw.split(","))
        elif f.type == "str":
            kwargs[f.name] = raw
        elif f.type == "float":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return cls(**kwargs)


@dataclass
class Checkpoint:
    model: ModelConfig
    train: TrainConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rng_state: dict | None = None
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_state(cls, state: TrainState, model: ModelConfig, train: TrainConfig) -> "Checkpoint":
        return cls(model, train, dict(state.params), dict(state.adam.m), dict(state.adam.v),
                   state.adam.step, state.epoch, np.asarray(state.history, dtype=np.float64),
                   state.rng_state)

    def to_state(self) -> TrainState:
        m = self.adam_m or {k: np.zeros_like(v) for k, v in self.params.items()}
        v = self.adam_v or {k: np.zeros_like(p) for k, p in self.params.items()}
        return TrainState(dict(self.params), AdamState(dict(m), dict(v), self.step), self.epoch,
                          [float(x) for x in self.history], self.rng_state)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"params/{k}": v for k, v in self.params.items()}
        out.update({f"adam_m/{k}": v for k, v in self.adam_m.items()})
        out.update({f"adam_v/{k}": v for k, v in self.adam_v.items()})
        out["history"] = np.asarray(self.history, dtype=np.float64)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        a, b = self.tensors(), other.tensors()
        return (self.model == other.model and self.train == other.train and self.step == other.step
                and self.epoch == other.epoch and self.rng_state == other.rng_state
                and self.version == other.version and a.keys() == b.keys()
                and all(a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    lines = [CHECKPOINT_MAGIC, f"version = {ckpt.version}"]
    lines += _config_to_header("model", ckpt.model)
    lines += _config_to_header("train", ckpt.train)
    lines.append(f"step = {ckpt.step}")
    lines.append(f"epoch = {ckpt.epoch}")
    lines.append(f"rng = {json.dumps(ckpt.rng_state, sort_keys=True)}")
    offset = 0
    payload = []
    for name, arr in ckpt.tensors().items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset} {arr.size}")
        payload.append(arr.tobytes())
        offset += arr.size
    lines.append("end-header")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for chunk in payload:
            fh.write(chunk)
    tmp.replace(path)


def load_checkpoint(path, expect_model: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect_model`` a different model config is rejected."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    marker = b"\nend-header\n"
    cut = raw.find(marker)
    if not raw.startswith(CHECKPOINT_MAGIC.encode() + b"\n") or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = raw[:cut].decode("ascii").split("\n")[1:]
    payload = raw[cut + len(marker):]
    values: dict[str, str] = {}
    directory = []
    for line in header:
        if line.startswith("tensor "):
            parts = line.split()
            if len(parts) != 5:
                raise CheckpointError(f"{path}: malformed tensor entry {line!r}")
            _, name, shape, off, count = parts
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            directory.append((name, dims, int(off), int(count)))
        else:
            key, sep, val = line.partition(" = ")
            if not sep:
                raise CheckpointError(f"{path}: malformed header line {line!r}")
            values[key] = val
    version = int(values.get("version", -1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(expected {CHECKPOINT_VERSION})")
    if len(payload) % 8:
        raise CheckpointError(f"{path}: payload is not a whole number of float64 values")
    data = np.frombuffer(payload, dtype="<f8")
    expected_total = 0
    tensors = {}
    for name, dims, off, count in directory:
        if int(np.prod(dims)) != count:
            raise CheckpointError(f"{path}: tensor {name} shape {dims} does not hold {count} values")
        if off != expected_total:
            raise CheckpointError(f"{path}: tensor {name} offset {off} != {expected_total}")
        expected_total += count
        if off + count > data.size:
            raise CheckpointError(f"{path}: payload truncated in tensor {name}")
        tensors[name] = data[off:off + count].reshape(dims).astype(np.float64)
    if expected_total != data.size:
        raise CheckpointError(f"{path}: payload has {data.size} values, directory lists {expected_total}")

    def section(prefix):
        return {k[len(prefix) + 1:]: v for k, v in values.items() if k.startswith(prefix + ".")}

    try:
        model = _config_from_header(ModelConfig, section("model"))
        train = _config_from_header(TrainConfig, section("train"))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config in header: {exc}") from None
    if expect_model is not None and model != expect_model:
        raise CheckpointError(f"{path}: checkpoint model config {model} does not match {expect_model}")

    from .model import param_shapes
    params = {k[len("params/"):]: v for k, v in tensors.items() if k.startswith("params/")}
    shapes = param_shapes(model)
    if list(params) != list(shapes) or any(params[k].shape != s for k, s in shapes.items()):
        raise CheckpointError(f"{path}: parameter tensors do not match the model config")
    rng = json.loads(values.get("rng", "null"))
    return Checkpoint(
        model, train, params,
        {k[len("adam_m/"):]: v for k, v in tensors.items() if k.startswith("adam_m/")},
        {k[len("adam_v/"):]: v for k, v in tensors.items() if k.startswith("adam_v/")},
        int(values.get("step", 0)), int(values.get("epoch", 0)),
        tensors.get("history", np.zeros(0)), rng, version)
