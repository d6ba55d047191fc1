"""Shared field types, counter-based RNG streams and checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

CHECKPOINT_VERSION = 1
_MASK64 = (1 << 64) - 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class FieldBatch:
    """A batch of gridded multi-channel states, shape (B, C, H, W)."""

    data: np.ndarray
    channel_names: tuple[str, ...]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ValueError(f"FieldBatch needs 4 dims (B, C, H, W), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"FieldBatch dims must be >= 1, got {data.shape}")
        b, c, h, w = data.shape
        if h % 2 or w % 2:
            raise ValueError(f"H and W must be even, got {h}x{w}")
        if len(self.channel_names) != c:
            raise ValueError(f"{len(self.channel_names)} channel names for {c} channels")
        if not np.all(np.isfinite(data)):
            raise ValueError("FieldBatch contains non-finite values")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ValueError(f"mean/std length mismatch: {mean.shape} vs {std.shape}")
        if not np.all(std > 0):
            raise ValueError(f"std must be strictly positive, got {std}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def n_channels(self) -> int:
        return self.mean.shape[0]

    def to_json(self) -> dict:
        return {"mean": [float(m) for m in self.mean], "std": [float(s) for s in self.std]}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream.

    (seed, stream_id) select a Philox key; ``counter`` selects an independent
    block of that key's sequence. A block is consumed through ``generator()``
    and never shared, so draws depend only on the three coordinates.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            v = getattr(self, name)
            if not 0 <= v <= _MASK64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {v}")

    def generator(self) -> np.random.Generator:
        key = self.seed | (self.stream_id << 64)
        # high counter word addresses the block; low words run within it
        bitgen = np.random.Philox(key=key, counter=[0, 0, 0, self.counter])
        return np.random.Generator(bitgen)

    def at(self, counter: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, counter)

    def advance(self, n: int = 1) -> "RngStream":
        return self.at(self.counter + n)

    def split(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id, 0)

    def torch_seed(self) -> int:
        """A 63-bit seed for torch generators, derived from this block."""
        return int(self.generator().integers(0, 2**63 - 1))


def rng_stream(seed: int, stream_id: int = 0) -> RngStream:
    return RngStream(seed, stream_id, 0)


@dataclass
class ModelParams:
    """Named float32 parameter arrays plus the architecture descriptor."""

    arch: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} has non-finite values")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.arch, sort_keys=True).encode())
        for name, arr in self.tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            h.update(name.encode())
            h.update(repr(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def equals(self, other: "ModelParams") -> bool:
        if self.arch != other.arch or list(self.tensors) != list(other.tensors):
            return False
        return all(
            np.array_equal(np.asarray(a, "<f4"), np.asarray(other.tensors[k], "<f4"))
            for k, a in self.tensors.items()
        )


def save_checkpoint(params: ModelParams, path: str | Path) -> str:
    """Write ``manifest.json`` + ``weights.bin`` + ``digest`` under ``path``.

    Returns the hex SHA-256 over the manifest bytes followed by the blob.
    """
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in params.tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": "f32",
                        "offset": offset, "len": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"version": CHECKPOINT_VERSION, "arch": params.arch, "tensors": entries}
    if params.extra:
        manifest["extra"] = params.extra
    manifest_bytes = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    weights = b"".join(blobs)
    digest = hashlib.sha256(manifest_bytes + weights).hexdigest()
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "manifest.json").write_bytes(manifest_bytes)
        (path / "weights.bin").write_bytes(weights)
        (path / "digest").write_text(digest + "\n")
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint at {path}: {e}") from e
    return digest


def checkpoint_digest(path: str | Path) -> str:
    return (Path(path) / "digest").read_text().strip()


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    try:
        manifest_bytes = (path / "manifest.json").read_bytes()
        weights = (path / "weights.bin").read_bytes()
        expected = (path / "digest").read_text().strip()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint at {path}: {e}") from e
    actual = hashlib.sha256(manifest_bytes + weights).hexdigest()
    if actual != expected:
        raise CheckpointError(f"digest mismatch for checkpoint {path}")
    manifest = json.loads(manifest_bytes)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {manifest.get('version')}, expected {CHECKPOINT_VERSION}")
    tensors = {}
    for e in manifest["tensors"]:
        start, n = e["offset"], e["len"]
        if e["dtype"] != "f32" or start + n > len(weights):
            raise CheckpointError(f"bad tensor entry {e['name']!r} in {path}")
        arr = np.frombuffer(weights[start:start + n], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
    return ModelParams(arch=manifest["arch"], tensors=tensors, extra=manifest.get("extra", {}))
