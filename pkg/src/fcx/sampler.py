"""On-the-fly training examples: random time step + random spatial crop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NormStats, RngStream


@dataclass(frozen=True)
class CropSpec:
    full: tuple[int, int]
    crop: tuple[int, int]

    def __post_init__(self):
        (H, W), (h, w) = self.full, self.crop
        if not (1 <= h <= H and 1 <= w <= W):
            raise ValueError(f"crop {self.crop} does not fit in grid {self.full}")

    @property
    def n_origins(self) -> int:
        (H, W), (h, w) = self.full, self.crop
        return (H - h + 1) * (W - w + 1)


@dataclass
class TrainExample:
    input: np.ndarray  # (C, h, w) float32, standardized
    targets: list[np.ndarray]  # K x (C, h, w)
    t0: int
    origin: tuple[int, int]
    rng: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.targets)

    def states(self) -> np.ndarray:
        """Input followed by targets, shape (1 + K, C, h, w)."""
        return np.stack([self.input, *self.targets])


def count_examples(n_years: int, steps_per_day: int, days_per_year: int,
                   full: tuple[int, int], crop: tuple[int, int]) -> int:
    """Number of distinct (time step, crop origin) training examples."""
    (H, W), (h, w) = full, crop
    if not (1 <= h <= H and 1 <= w <= W):
        raise ValueError(f"crop {crop} does not fit in grid {full}")
    for v in (n_years, steps_per_day, days_per_year):
        if v < 0:
            raise ValueError("counts must be non-negative")
    n = n_years * steps_per_day * days_per_year * (H - h + 1) * (W - w + 1)
    if n >= 2**64:
        raise OverflowError(f"example count {n} exceeds 64 bits")
    return n


def standardize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - mean[c]) / std[c] along the channel axis (axis -3)."""
    x = np.asarray(x)
    if x.shape[-3] != stats.n_channels:
        raise ValueError(f"{x.shape[-3]} channels in data, {stats.n_channels} in stats")
    return (x - stats.mean[:, None, None]) / stats.std[:, None, None]


def unstandardize(z: np.ndarray, stats: NormStats) -> np.ndarray:
    z = np.asarray(z)
    if z.shape[-3] != stats.n_channels:
        raise ValueError(f"{z.shape[-3]} channels in data, {stats.n_channels} in stats")
    return z * stats.std[:, None, None] + stats.mean[:, None, None]


def sample_example(rng: RngStream, dataset, stats: NormStats, crop: CropSpec, horizon: int,
                   time_range: tuple[int, int] | None = None) -> TrainExample:
    """Draw one example from the RNG block ``rng.counter``.

    ``time_range`` is the half-open frame interval examples may touch
    (defaults to the dataset's training split); t0 is uniform on
    ``[start, stop - horizon - 1]`` and the crop origin uniform over all
    top-left positions without wraparound.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    start, stop = time_range if time_range is not None else dataset.train_range
    if stop - start < horizon + 1:
        raise ValueError(f"horizon {horizon} needs {horizon + 1} frames, range has {stop - start}")
    (H, W), (h, w) = crop.full, crop.crop
    gen = rng.generator()
    t0 = int(gen.integers(start, stop - horizon))
    i = int(gen.integers(0, H - h + 1))
    j = int(gen.integers(0, W - w + 1))
    frames = [dataset.frame(t)[:, i:i + h, j:j + w] for t in range(t0, t0 + horizon + 1)]
    z = [standardize(f.astype(np.float64), stats).astype(np.float32) for f in frames]
    return TrainExample(z[0], z[1:], t0, (i, j),
                        {"seed": rng.seed, "stream_id": rng.stream_id, "counter": rng.counter})


class LocalSource:
    """In-process sample stream; the reference for the networked pool.

    Sample n of the stream is ``sample_example`` at RNG counter
    ``counter_base + n``; batches consume consecutive counters.
    """

    def __init__(self, dataset, stats: NormStats, crop: CropSpec, seed: int, stream_id: int = 0,
                 counter_base: int = 0, time_range=None):
        self.dataset = dataset
        self.stats = stats
        self.crop = crop
        self.rng = RngStream(seed, stream_id, counter_base)
        self.time_range = time_range
        self.counter = counter_base

    def take(self, n: int, horizon: int) -> list[TrainExample]:
        out = [sample_example(self.rng.at(self.counter + k), self.dataset, self.stats, self.crop,
                              horizon, self.time_range) for k in range(n)]
        self.counter += n
        return out

    def next_batch(self, batch_size: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        return stack_examples(self.take(batch_size, horizon))

    def close(self):
        pass


def stack_examples(examples: list[TrainExample]) -> tuple[np.ndarray, np.ndarray]:
    """Inputs (B, C, h, w) and targets (B, K, C, h, w)."""
    inputs = np.stack([e.input for e in examples])
    targets = np.stack([np.stack(e.targets) for e in examples])
    return inputs, targets
