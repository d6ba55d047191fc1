"""RMSE scoring in physical units, rollout reports and report comparison."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .afno import AFNONet
from .core import NormStats, load_checkpoint
from .finetune import rollout
from .sampler import standardize, unstandardize

AVG = "__avg__"


def rmse(pred, truth, stats: NormStats) -> np.ndarray:
    """Per-channel RMSE after un-standardizing both (B, C, H, W) tensors."""
    pred = np.asarray(pred.detach() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    truth = np.asarray(truth.detach() if isinstance(truth, torch.Tensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} differ")
    diff = unstandardize(pred, stats) - unstandardize(truth, stats)
    return np.sqrt(np.mean(diff ** 2, axis=(0, 2, 3)))


@dataclass
class RolloutReport:
    channels: list[str]
    steps: list[int]
    table: np.ndarray  # (n_steps, C) RMSE in physical units
    n: int
    std: np.ndarray | None = field(default=None, repr=False)

    def avg(self, step: int) -> float:
        return float(np.mean(self.table[self.steps.index(step)]))

    @property
    def averages(self) -> np.ndarray:
        return self.table.mean(axis=1)

    def normalized(self) -> np.ndarray:
        """Per-step mean over channels of RMSE / channel std."""
        if self.std is None:
            raise ValueError("report carries no channel std")
        return (self.table / self.std[None, :]).mean(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "channel", "rmse", "n"])
        for i, k in enumerate(self.steps):
            for c, name in enumerate(self.channels):
                w.writerow([k, name, repr(float(self.table[i, c])), self.n])
            w.writerow([k, AVG, repr(float(np.mean(self.table[i]))), self.n])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "RolloutReport":
        rows = list(csv.DictReader(open(path, newline="")))
        channels = list(dict.fromkeys(r["channel"] for r in rows if r["channel"] != AVG))
        steps = sorted({int(r["step"]) for r in rows})
        table = np.zeros((len(steps), len(channels)))
        for r in rows:
            if r["channel"] != AVG:
                table[steps.index(int(r["step"])), channels.index(r["channel"])] = float(r["rmse"])
        return cls(channels, steps, table, int(rows[0]["n"]))


def initial_conditions(test_range: tuple[int, int], k_max: int, n: int) -> list[int]:
    start, stop = test_range
    last = stop - k_max - 1
    if last < start:
        raise ValueError(f"test split of {stop - start} frames too short for a {k_max}-step rollout")
    return sorted(set(int(round(v)) for v in np.linspace(start, last, n)))


def _as_model(model) -> AFNONet:
    if isinstance(model, (str, Path)):
        return AFNONet.from_params(load_checkpoint(model))
    return model


def evaluate_rollout(model, dataset, k_max: int, n_initial_conditions: int = 32,
                     out_csv=None, split: str = "test", batch: int = 32) -> RolloutReport:
    """Roll out ``k_max`` steps from evenly spaced full-grid initial conditions.

    Squared errors are accumulated per (step, channel) over every initial
    condition and grid cell, then square-rooted.
    """
    model = _as_model(model)
    stats = dataset.stats()
    rng = dataset.test_range if split == "test" else dataset.train_range
    ics = initial_conditions(rng, k_max, n_initial_conditions)
    C = dataset.shape[0]
    sq = np.zeros((k_max, C))
    count = 0
    for b in range(0, len(ics), batch):
        chunk = ics[b:b + batch]
        truth = np.stack([dataset.frames(t, t + k_max + 1) for t in chunk])  # (B, k+1, C, H, W)
        z = standardize(truth.astype(np.float64), stats).astype(np.float32)
        x0 = torch.from_numpy(np.ascontiguousarray(z[:, 0]))
        with torch.no_grad():
            states = rollout(model, x0, k_max)
        for k, s in enumerate(states):
            pred = unstandardize(s.numpy().astype(np.float64), stats)
            diff = pred - truth[:, k + 1].astype(np.float64)
            sq[k] += np.sum(diff ** 2, axis=(0, 2, 3))
        count += len(chunk) * truth.shape[-1] * truth.shape[-2]
    table = np.sqrt(sq / count)
    report = RolloutReport(list(dataset.channels), list(range(1, k_max + 1)), table, len(ics),
                           std=stats.std.copy())
    if out_csv is not None:
        report.write(out_csv)
    return report


def persistence_report(dataset, k_max: int, n_initial_conditions: int = 32) -> RolloutReport:
    """Reference scores for predicting the initial state unchanged."""
    ics = initial_conditions(dataset.test_range, k_max, n_initial_conditions)
    C = dataset.shape[0]
    sq = np.zeros((k_max, C))
    count = 0
    for t in ics:
        f0 = dataset.frame(t).astype(np.float64)
        for k in range(1, k_max + 1):
            sq[k - 1] += np.sum((dataset.frame(t + k).astype(np.float64) - f0) ** 2, axis=(1, 2))
        count += f0.shape[1] * f0.shape[2]
    return RolloutReport(list(dataset.channels), list(range(1, k_max + 1)), np.sqrt(sq / count),
                         len(ics), std=dataset.stats().std.copy())


@dataclass
class Comparison:
    steps: list[int]
    deltas: dict[int, float]  # b - a, per-step average RMSE
    step_gain: dict[int, bool]  # b strictly lower than a at this step
    multi_step_gain: bool  # mean over steps >= 2 strictly lower in b
    forgetting: bool  # b's step-1 RMSE exceeds a's by more than the bound
    single_step_change: float  # relative change b vs a at step 1

    def verdicts(self) -> dict:
        return {"multi_step_gain": self.multi_step_gain, "forgetting": self.forgetting}


def compare_reports(a: RolloutReport, b: RolloutReport, forgetting_bound: float = 0.10,
                    gain_steps=None, normalized: bool = False) -> Comparison:
    """Per-step deltas of b relative to a (a = reference, b = candidate)."""
    if a.steps != b.steps or a.channels != b.channels:
        raise ValueError("reports differ in steps or channels")
    av = a.normalized() if normalized else a.averages
    bv = b.normalized() if normalized else b.averages
    deltas = {k: float(bv[i] - av[i]) for i, k in enumerate(a.steps)}
    step_gain = {k: bool(bv[i] < av[i]) for i, k in enumerate(a.steps)}
    idx = [a.steps.index(k) for k in (gain_steps or [k for k in a.steps if k >= 2])]
    multi = bool(idx) and bool(np.mean(bv[idx]) < np.mean(av[idx]))
    i1 = a.steps.index(1) if 1 in a.steps else 0
    change = float(bv[i1] / av[i1] - 1.0) if av[i1] > 0 else 0.0
    return Comparison(list(a.steps), deltas, step_gain, multi, change > forgetting_bound, change)
