"""Synthetic advection-diffusion dataset standing in for a raw reanalysis archive.

Channels are independent smooth scalar fields transported by one steady,
divergence-free velocity field (semi-Lagrangian, bilinear, doubly periodic)
with explicit diffusion. The velocity is a uniform drift plus a random
stream-function perturbation. A small zero-mean random forcing keeps the
trajectory statistically stationary; without it the fields relax to
streamline-aligned patterns that no longer change between steps.
Frames are stored one file per time step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import NormStats, RngStream

# wave-vectors (kx, ky) a stream-function mode may use
_WAVEVECTORS = [(kx, ky) for kx in range(0, 3) for ky in range(-2, 3) if (kx, ky) > (0, 0)]


class ConfigError(ValueError):
    pass


@dataclass
class DatasetMeta:
    grid: tuple[int, int] = (32, 64)
    channels: list[str] = field(default_factory=lambda: ["ch0", "ch1", "ch2", "ch3"])
    n_timesteps: int = 2048
    dt: float = 1.0
    seed: int = 0
    n_modes: int = 3
    amplitude: float = 0.4  # max speed of the stream-function part, cells/step
    drift: tuple[float, float] = (1.0, 0.0)  # uniform (u, v), cells/step
    kappa: float = 0.02
    forcing: float = 0.03  # per-step forcing std, relative to initial channel std
    spinup: int = 256

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.drift = tuple(float(d) for d in self.drift)
        self.channels = list(self.channels)

    def validate(self) -> None:
        if self.n_timesteps < 2:
            raise ConfigError("n_timesteps must be >= 2")
        disp = (self.amplitude + float(np.hypot(*self.drift))) * self.dt
        if disp > 2.0:
            raise ConfigError(f"max per-step displacement {disp} exceeds 2 cells")
        if self.kappa * self.dt > 0.25:
            raise ConfigError(f"kappa*dt = {self.kappa * self.dt} violates the explicit diffusion limit 0.25")
        if self.forcing < 0 or self.spinup < 0:
            raise ConfigError("forcing and spinup must be non-negative")
        if self.n_modes < 1:
            raise ConfigError("n_modes must be >= 1")
        h, w = self.grid
        if h % 2 or w % 2:
            raise ConfigError(f"grid must be even, got {self.grid}")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["drift"] = list(self.drift)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetMeta":
        return cls(**d)


@dataclass(frozen=True)
class VelocityField:
    u: np.ndarray  # x (column) velocity, cells/step
    v: np.ndarray  # y (row) velocity, cells/step
    modes: tuple = ()  # (kx, ky, amplitude, phase) of the stream function, pre-rescaling
    scale: float = 0.0
    drift: tuple[float, float] = (0.0, 0.0)


def centered_dx(f: np.ndarray) -> np.ndarray:
    return (np.roll(f, -1, axis=-1) - np.roll(f, 1, axis=-1)) / 2.0


def centered_dy(f: np.ndarray) -> np.ndarray:
    return (np.roll(f, -1, axis=-2) - np.roll(f, 1, axis=-2)) / 2.0


def divergence(vel: VelocityField) -> np.ndarray:
    return centered_dx(vel.u) + centered_dy(vel.v)


def stream_function(grid: tuple[int, int], modes) -> np.ndarray:
    h, w = grid
    y, x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    psi = np.zeros((h, w))
    for kx, ky, amp, phase in modes:
        psi += amp * np.cos(2 * np.pi * (kx * x / w + ky * y / h) + phase)
    return psi


def make_velocity_field(rng: RngStream, grid: tuple[int, int], n_modes: int,
                        amplitude: float, drift=(0.0, 0.0)) -> VelocityField:
    """Divergence-free velocity from a random low-wavenumber stream function.

    u = d(psi)/dy, v = -d(psi)/dx with centered periodic differences, so the
    centered discrete divergence cancels identically. The stream-function
    part is rescaled so its maximum speed equals ``amplitude``; the uniform
    ``drift`` is added on top.
    """
    if n_modes < 1:
        raise ConfigError("n_modes must be >= 1")
    gen = rng.generator()
    modes = []
    for _ in range(n_modes):
        kx, ky = _WAVEVECTORS[int(gen.integers(len(_WAVEVECTORS)))]
        amp = float(gen.normal())
        phase = float(gen.uniform(0.0, 2 * np.pi))
        modes.append((kx, ky, amp, phase))
    psi = stream_function(grid, modes)
    u = centered_dy(psi)
    v = -centered_dx(psi)
    speed = np.sqrt(u**2 + v**2).max()
    scale = amplitude / speed if speed > 0 else 0.0
    du, dv = (float(d) for d in drift)
    return VelocityField(u * scale + du, v * scale + dv, tuple(modes), scale, (du, dv))


def _bilinear_periodic(f: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample f[..., H, W] at fractional (ys, xs), wrapping on both axes."""
    h, w = f.shape[-2:]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    y0 = y0.astype(np.int64) % h
    x0 = x0.astype(np.int64) % w
    y1 = (y0 + 1) % h
    x1 = (x0 + 1) % w
    return ((1 - wy) * (1 - wx) * f[..., y0, x0] + (1 - wy) * wx * f[..., y0, x1]
            + wy * (1 - wx) * f[..., y1, x0] + wy * wx * f[..., y1, x1])


def laplacian(f: np.ndarray) -> np.ndarray:
    return (np.roll(f, 1, -1) + np.roll(f, -1, -1) + np.roll(f, 1, -2) + np.roll(f, -1, -2) - 4 * f)


def step_state(state: np.ndarray, vel: VelocityField, dt: float, kappa: float) -> np.ndarray:
    """One semi-Lagrangian advection step followed by explicit diffusion.

    Bilinear semi-Lagrangian transport is not conservative, so a global mean
    fixer restores each channel's spatial mean afterwards.
    """
    if kappa * dt > 0.25:
        raise ConfigError(f"kappa*dt = {kappa * dt} violates the explicit diffusion limit 0.25")
    h, w = state.shape[-2:]
    out = state
    if np.any(vel.u) or np.any(vel.v):
        y, x = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                           indexing="ij")
        out = _bilinear_periodic(state, y - vel.v * dt, x - vel.u * dt)
        mean_in = state.mean(axis=(-2, -1), keepdims=True)
        out = out + (mean_in - out.mean(axis=(-2, -1), keepdims=True))
    if kappa:
        out = out + kappa * dt * laplacian(out)
    return out


def _smooth_noise(gen: np.random.Generator, grid, n_channels: int) -> np.ndarray:
    """Zero-mean, unit-std random fields with a low-wavenumber spectrum."""
    h, w = grid
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.rfftfreq(w) * w
    k = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    envelope = np.exp(-(k / 4.0) ** 2)
    envelope[0, 0] = 0.0
    out = np.empty((n_channels, h, w))
    for c in range(n_channels):
        spec = (gen.normal(size=k.shape) + 1j * gen.normal(size=k.shape)) * envelope
        f = np.fft.irfft2(spec, s=(h, w))
        f -= f.mean()
        out[c] = f / f.std()
    return out


def _frame_path(out_dir: Path, t: int) -> Path:
    return out_dir / "frames" / f"{t:06d}.bin"


def generate_dataset(cfg: DatasetMeta, out_dir: str | Path) -> dict:
    """Integrate the synthetic dynamics and write ``meta.json`` + ``frames/``.

    Also writes ``stats.json`` (training split) and ``digest``. Returns the
    manifest dict (meta plus digest).
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    root = RngStream(cfg.seed, 0)
    vel = make_velocity_field(root.split(1), cfg.grid, cfg.n_modes, cfg.amplitude, cfg.drift)
    gen = root.split(2).generator()
    # per-channel physical offset and scale
    offset = gen.uniform(50.0, 300.0, size=cfg.n_channels)
    scale = 10.0 ** gen.uniform(-1.0, 1.5, size=cfg.n_channels)
    state = offset[:, None, None] + scale[:, None, None] * _smooth_noise(
        gen, cfg.grid, cfg.n_channels)
    noise = root.split(3).generator()
    sigma = (cfg.forcing * np.sqrt(cfg.dt) * scale)[:, None, None]

    def advance(x):
        x = step_state(x, vel, cfg.dt, cfg.kappa)
        if cfg.forcing:
            x = x + sigma * _smooth_noise(noise, cfg.grid, cfg.n_channels)
        return x

    for _ in range(cfg.spinup):
        state = advance(state)
    meta_bytes = json.dumps(cfg.to_json(), indent=1, sort_keys=True).encode()
    (out_dir / "meta.json").write_bytes(meta_bytes)
    h = hashlib.sha256(meta_bytes)
    for t in range(cfg.n_timesteps):
        if t > 0:
            state = advance(state)
        raw = np.ascontiguousarray(state, dtype="<f4").tobytes()
        _frame_path(out_dir, t).write_bytes(raw)
        h.update(raw)
    digest = h.hexdigest()
    (out_dir / "digest").write_text(digest + "\n")
    ds = Dataset(out_dir)
    stats = compute_stats(ds, ds.train_range)
    (out_dir / "stats.json").write_text(stats_json(stats))
    return {"meta": cfg.to_json(), "digest": digest, "stats": stats.to_json()}


def stats_json(stats: NormStats) -> str:
    """Stats as written next to the frames, rounded to 12 significant digits."""
    return json.dumps({"mean": [float(f"{m:.12g}") for m in stats.mean],
                       "std": [float(f"{s:.12g}") for s in stats.std]}, indent=1)


def test_split_start(n_timesteps: int) -> int:
    """First time index of the held-out split (last 12.5% of steps)."""
    return n_timesteps - n_timesteps // 8


class Dataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root: str | Path, cache: bool = True):
        self.root = Path(root)
        self.meta = DatasetMeta.from_json(json.loads((self.root / "meta.json").read_text()))
        self._cache = cache
        self._frames: dict[int, np.ndarray] = {}

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.meta.n_channels, *self.meta.grid)

    @property
    def n_timesteps(self) -> int:
        return self.meta.n_timesteps

    @property
    def channels(self) -> list[str]:
        return self.meta.channels

    @property
    def train_range(self) -> tuple[int, int]:
        return (0, test_split_start(self.n_timesteps))

    @property
    def test_range(self) -> tuple[int, int]:
        return (test_split_start(self.n_timesteps), self.n_timesteps)

    @property
    def digest(self) -> str:
        return (self.root / "digest").read_text().strip()

    def stats(self) -> NormStats:
        return NormStats.from_json(json.loads((self.root / "stats.json").read_text()))

    def frame(self, t: int) -> np.ndarray:
        """Frame t as float32 (C, H, W) in physical units."""
        if not 0 <= t < self.n_timesteps:
            raise IndexError(f"time index {t} outside [0, {self.n_timesteps})")
        if t in self._frames:
            return self._frames[t]
        arr = np.fromfile(_frame_path(self.root, t), dtype="<f4").reshape(self.shape)
        arr.setflags(write=False)
        if self._cache:
            self._frames[t] = arr
        return arr

    def frames(self, start: int, stop: int) -> np.ndarray:
        return np.stack([self.frame(t) for t in range(start, stop)])


def compute_stats(dataset, training_range: tuple[int, int]) -> NormStats:
    """Per-channel population mean/std over frames in ``[start, stop)``."""
    start, stop = training_range
    if not 0 <= start < stop <= dataset.n_timesteps:
        raise ValueError(f"bad or empty training range {training_range}")
    c = dataset.shape[0]
    total = np.zeros(c)
    total_sq = np.zeros(c)
    count = 0
    for t in range(start, stop):
        f = np.asarray(dataset.frame(t), dtype=np.float64)
        total += f.sum(axis=(1, 2))
        count += f[0].size
    mean = total / count
    for t in range(start, stop):
        f = np.asarray(dataset.frame(t), dtype=np.float64)
        total_sq += ((f - mean[:, None, None]) ** 2).sum(axis=(1, 2))
    std = np.sqrt(total_sq / count)
    if np.any(std <= 0):
        bad = [dataset.channels[i] for i in np.flatnonzero(std <= 0)]
        raise ValueError(f"zero-variance channel(s) {bad}")
    return NormStats(mean, std)


@lru_cache(maxsize=8)
def open_dataset(root: str) -> Dataset:
    return Dataset(root)
