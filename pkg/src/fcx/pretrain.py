"""Single-step pretraining loop and finite-difference gradient verification."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .afno import AFNONet, ArchConfig, build_model
from .core import RngStream, load_checkpoint, save_checkpoint
from .optim import DEFAULT_BATCH_SCHEDULE, PRETRAIN_LR, Lamb, LrSchedule, batch_size_at, cosine_lr
from .sampler import CropSpec, LocalSource
from .synthdata import Dataset

log = logging.getLogger(__name__)

# RngStream ids derived from the run seed
DATA_STREAM = 1
INIT_STREAM = 2
TEACHER_STEP_STREAM = 3
GRADCHECK_STREAM = 4

METRICS_HEADER = ["step", "lr", "batch_size", "loss", "seconds"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_checkpoint: Path | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class RunConfig:
    data: str = ""
    workers: list[str] = field(default_factory=list)
    arch: ArchConfig = field(default_factory=ArchConfig)
    max_steps: int = 2000
    lr_init: float = PRETRAIN_LR[0]
    lr_final: float = PRETRAIN_LR[1]
    batch_schedule: list[tuple[int, int]] = field(default_factory=lambda: [list(s) for s in DEFAULT_BATCH_SCHEDULE])
    weight_decay: float = 0.0
    crop: tuple[int, int] | None = None  # None: full grid
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 500
    out: str = "runs/pretrain"

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig.from_json(self.arch)
        if self.crop is not None:
            self.crop = tuple(int(c) for c in self.crop)
        self.batch_schedule = [tuple(int(v) for v in s) for s in self.batch_schedule]

    def to_json(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_json()
        d["batch_schedule"] = [list(s) for s in self.batch_schedule]
        d["crop"] = list(self.crop) if self.crop is not None else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run-config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class RunResult:
    checkpoint: Path
    metrics: Path
    losses: list[float]
    persistence: list[float]
    stream_digest: str = ""  # sha256 over every batch consumed, in order


def training_loss(model: AFNONet, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE between the composed one-step prediction and the target."""
    if x.shape != target.shape:
        raise ValueError(f"input {tuple(x.shape)} and target {tuple(target.shape)} differ")
    return torch.mean((model.predict(x) - target) ** 2)


def init_seed(seed: int) -> int:
    return RngStream(seed, INIT_STREAM).torch_seed()


def open_source(cfg: RunConfig, dataset: Dataset, stream_id: int = DATA_STREAM):
    """Sample source for a run: in-process sampler or the worker pool."""
    crop = CropSpec(tuple(dataset.meta.grid), cfg.crop or tuple(dataset.meta.grid))
    if cfg.workers:
        from .shardnet import WorkerPool
        return WorkerPool(cfg.workers, dataset.digest, seed=cfg.seed, stream_id=stream_id,
                          crop=crop.crop)
    return LocalSource(dataset, dataset.stats(), crop, cfg.seed, stream_id)


def write_config(cfg: RunConfig, out: Path, name: str = "config.json") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True))


class MetricsLog:
    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(METRICS_HEADER)

    def write(self, step, lr, batch_size, loss, seconds):
        self._w.writerow([step, repr(float(lr)), batch_size, repr(float(loss)), f"{seconds:.3f}"])

    def close(self):
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train_loop(model: AFNONet, source, cfg: RunConfig, out: Path, horizon_loss, *,
               sched: LrSchedule, tag: str, extra: dict | None = None,
               after_step=None) -> RunResult:
    """Shared optimizer loop; ``horizon_loss(model, step, x, y)`` -> (loss, persistence)."""
    out.mkdir(parents=True, exist_ok=True)
    opt = Lamb(model.parameters(), lr=sched.lr_init, weight_decay=cfg.weight_decay)
    opt.name_params(model.named_parameters())
    metrics = MetricsLog(out / "metrics.csv")
    extra = {"config": cfg.to_json(), "phase": tag, **(extra or {})}
    last_ckpt = save_checkpoint_dir(model, out / "ckpt" / "step_000000", extra)
    losses, persistence = [], []
    start = time.perf_counter()
    try:
        for step in range(cfg.max_steps):
            bs = batch_size_at(step, cfg.batch_schedule)
            lr = cosine_lr(step, sched)
            loss, pers = horizon_loss(model, step, bs)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, last_ckpt)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.set_lr(lr)
            opt.step()
            lv = float(loss.detach())
            losses.append(lv)
            persistence.append(pers)
            if step % cfg.log_every == 0 or step == cfg.max_steps - 1:
                metrics.write(step, lr, bs, lv, time.perf_counter() - start)
            if after_step is not None:
                after_step(step)
            if cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0 and step + 1 < cfg.max_steps:
                last_ckpt = save_checkpoint_dir(model, out / "ckpt" / f"step_{step + 1:06d}", extra)
    finally:
        metrics.close()
    final = save_checkpoint_dir(model, out / "final", extra)
    return RunResult(final, out / "metrics.csv", losses, persistence)


def save_checkpoint_dir(model: AFNONet, path: Path, extra: dict | None = None) -> Path:
    save_checkpoint(model.to_params(extra), path)
    return path


def pretrain(cfg: RunConfig, out: str | Path | None = None) -> RunResult:
    """Single-step pretraining; writes checkpoints and ``metrics.csv`` under ``out``."""
    out = Path(out or cfg.out)
    dataset = Dataset(cfg.data)
    if tuple(cfg.arch.grid) != tuple(dataset.meta.grid):
        raise ValueError(f"arch grid {cfg.arch.grid} does not match dataset grid {dataset.meta.grid}")
    write_config(cfg, out)
    model = build_model(cfg.arch, seed=init_seed(cfg.seed))
    source = open_source(cfg, dataset)
    stream = hashlib.sha256()

    def step_loss(model, step, bs):
        x, y = source.next_batch(bs, 1)
        stream.update(x.tobytes())
        stream.update(y.tobytes())
        x = torch.from_numpy(x)
        y = torch.from_numpy(y[:, 0])
        pers = float(torch.mean((x - y) ** 2))
        return training_loss(model, x, y), pers

    sched = LrSchedule(cfg.lr_init, cfg.lr_final, max(cfg.max_steps, 1))
    try:
        result = train_loop(model, source, cfg, out, step_loss, sched=sched, tag="pretrain")
    finally:
        source.close()
    result.stream_digest = stream.hexdigest()
    return result


# -- gradient verification ---------------------------------------------------

TINY_ARCH = dict(grid=(8, 8), channels=2, patch=2, embed_dim=8, depth=1, num_blocks=4)


@dataclass
class GradCheckReport:
    groups: dict[str, dict]  # name -> {max_rel, max_abs, mode, n, passed}
    tol: float

    @property
    def passed(self) -> bool:
        return all(g["passed"] for g in self.groups.values())

    def lines(self) -> list[str]:
        out = []
        for name, g in self.groups.items():
            err = g["max_abs"] if g["mode"] == "abs" else g["max_rel"]
            out.append(f"{'PASS' if g['passed'] else 'FAIL'} {name:40s} {g['mode']}-err={err:.3e} n={g['n']}")
        return out


ZERO_GRAD_FLOOR = 1e-8


def compare_gradients(loss_fn, tensors: dict[str, torch.Tensor], tol: float, *, h: float = 1e-5,
                      samples: int = 32, seed: int = 0, corrupt: dict[str, float] | None = None
                      ) -> GradCheckReport:
    """Check autograd against central differences for each named float64 leaf.

    Coordinates whose analytic and numeric gradients are both below
    ``ZERO_GRAD_FLOOR`` are scored by absolute error, the rest by relative
    error ``|a - n| / max(|a|, |n|)``.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    grads = {k: t.grad.detach().clone() for k, t in tensors.items()}
    for name, factor in (corrupt or {}).items():
        grads[name] = grads[name] * factor
    gen = np.random.default_rng(seed)
    groups = {}
    with torch.no_grad():
        for name, t in tensors.items():
            flat = t.view(-1)
            gflat = grads[name].view(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= samples else gen.choice(n, samples, replace=False)
            max_rel = max_abs = 0.0
            all_zero = True
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = gflat[i].item()
                scale = max(abs(num), abs(ana))
                err = abs(num - ana)
                max_abs = max(max_abs, err)
                if scale >= ZERO_GRAD_FLOOR:
                    all_zero = False
                    max_rel = max(max_rel, err / scale)
            mode = "abs" if all_zero else "rel"
            passed = max_abs < ZERO_GRAD_FLOOR if all_zero else max_rel < tol
            groups[name] = dict(max_rel=max_rel, max_abs=max_abs, mode=mode, n=len(idx), passed=passed)
    return GradCheckReport(groups, tol)


def grad_check(arch: ArchConfig | None = None, tol: float = 1e-3, *, seed: int = 0, batch: int = 1,
               corrupt: dict[str, float] | None = None, perturb: float = 0.3) -> GradCheckReport:
    """Finite-difference check of every parameter group, plus the input gradient.

    Runs in float64. Parameters are jittered away from their initial values
    so the flow head is non-zero and the warp is exercised off the integer
    lattice (bilinear warping has kinks at integer displacements).
    """
    arch = arch or ArchConfig(**TINY_ARCH)
    rng = RngStream(seed, GRADCHECK_STREAM)
    H, W = arch.grid
    for attempt in range(1, 65):
        model = build_model(arch, seed=rng.torch_seed()).double()
        g = torch.Generator().manual_seed(rng.at(attempt).torch_seed())
        with torch.no_grad():
            for p in model.parameters():
                p.add_(perturb * torch.randn(p.shape, generator=g, dtype=p.dtype))
        x = torch.randn(batch, arch.channels, H, W, generator=g, dtype=torch.float64)
        y = torch.randn(batch, arch.channels, H, W, generator=g, dtype=torch.float64)
        if _lattice_distance(model, x) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw a grad-check point away from warp kinks")
    x.requires_grad_(True)
    tensors = dict(model.named_parameters())
    tensors["input[warp+trunk]"] = x
    return compare_gradients(lambda: training_loss(model, x, y), tensors, tol,
                             seed=seed, corrupt=corrupt)


KINK_MARGIN = 1e-3


def _lattice_distance(model: AFNONet, x: torch.Tensor) -> float:
    """Smallest distance of any flow displacement to an integer."""
    with torch.no_grad():
        _, flow = model(x)
    if flow is None:
        return 1.0
    frac = flow - torch.round(flow)
    return float(frac.abs().min())


def load_model(path) -> AFNONet:
    return AFNONet.from_params(load_checkpoint(path))


def finite_losses(losses) -> bool:
    return all(math.isfinite(v) for v in losses)
