"""Multi-step curriculum fine-tuning against a frozen teacher.

For each horizon ``curr_step = 1..max_time_steps`` the student trains on
``multi_step_loss + single_step_loss``: the teacher is rolled out
autoregressively for ``teacher_step - 1`` steps (teacher_step uniform on
1..curr_step) and the student predicts the frame after the teacher's
output, while the single-step term keeps it anchored on true states. After
every increment the teacher is replaced by a frozen snapshot of the student.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .afno import AFNONet
from .core import RngStream, load_checkpoint
from .optim import FINETUNE_LR, Lamb, LrSchedule, batch_size_at, cosine_lr
from .pretrain import (DATA_STREAM, TEACHER_STEP_STREAM, RunConfig, TrainingDiverged, open_source,
                       save_checkpoint_dir, training_loss, write_config)
from .synthdata import Dataset

FINETUNE_DATA_STREAM = DATA_STREAM + 16


@dataclass
class CurriculumConfig:
    max_time_steps: int = 4
    steps_per_increment: int = 300
    lr_init: float = FINETUNE_LR[0]
    lr_final: float = FINETUNE_LR[1]

    def __post_init__(self):
        if self.max_time_steps < 1:
            raise ValueError("max_time_steps must be >= 1")
        if self.steps_per_increment < 0:
            raise ValueError("steps_per_increment must be >= 0")

    @property
    def total_steps(self) -> int:
        return self.max_time_steps * self.steps_per_increment


class NonFiniteRollout(FloatingPointError):
    pass


def rollout(model, x0: torch.Tensor, k: int, *, track_grad: bool = False) -> list[torch.Tensor]:
    """States 1..k of the autoregressive run from ``x0`` (empty for k=0)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    states = []
    x = x0
    with torch.set_grad_enabled(track_grad and torch.is_grad_enabled()):
        for i in range(1, k + 1):
            x = model.predict(x)
            if not torch.all(torch.isfinite(x)):
                raise NonFiniteRollout(f"non-finite state at rollout step {i}")
            states.append(x)
    return states


def freeze(model: AFNONet) -> AFNONet:
    """Detached, gradient-free deep copy."""
    frozen = copy.deepcopy(model)
    for p in frozen.parameters():
        p.requires_grad_(False)
    frozen.eval()
    return frozen


def params_digest(model: AFNONet) -> str:
    return model.to_params().digest()


def draw_teacher_steps(rng: RngStream, curr_step: int, n: int) -> np.ndarray:
    return rng.generator().integers(1, curr_step + 1, size=n)


def finetune_step(student: AFNONet, teacher, states: torch.Tensor, curr_step: int,
                  rng: RngStream) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    """Losses for one batch of ground-truth sequences.

    ``states`` is (B, 1 + K, C, h, w) with K >= curr_step: the frame at t0
    followed by K consecutive future frames. Returns (multi_step_loss,
    single_step_loss, teacher_steps).
    """
    B, n_states = states.shape[:2]
    if curr_step < 1 or curr_step > n_states - 1:
        raise ValueError(f"curr_step {curr_step} needs {curr_step + 1} frames, batch has {n_states}")
    steps = draw_teacher_steps(rng, curr_step, B)
    teacher_out = torch.empty_like(states[:, 0])
    obs0 = states[:, 0]
    for k in np.unique(steps):
        idx = torch.from_numpy(np.flatnonzero(steps == k))
        traj = rollout(teacher, obs0[idx], int(k) - 1)
        teacher_out[idx] = traj[-1] if traj else obs0[idx]
    ks = torch.from_numpy(steps)
    rows = torch.arange(B)
    target = states[rows, ks]
    obs2 = states[rows, ks - 1]
    multi = training_loss(student, teacher_out.detach(), target)
    single = training_loss(student, obs2, target)
    return multi, single, steps


@dataclass
class FinetuneResult:
    checkpoint: Path
    metrics: Path
    losses: list[float]
    increments: list[dict]  # per increment: teacher digests and student end digest
    stream_digest: str = ""


def curriculum_finetune(cfg: RunConfig, curriculum: CurriculumConfig, pretrained,
                        out: str | Path | None = None, on_step=None) -> FinetuneResult:
    """Run the curriculum from the ``pretrained`` checkpoint directory.

    ``on_step(step, curr_step, teacher)`` is called after every optimizer step.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out)
    (out / "curriculum.json").write_text(json.dumps(asdict(curriculum), indent=1, sort_keys=True))
    params = load_checkpoint(pretrained)
    student = AFNONet.from_params(params)
    if tuple(cfg.arch.grid) != tuple(student.cfg.grid):
        raise ValueError("pretrained checkpoint grid does not match the run config")
    teacher = freeze(student)
    dataset = Dataset(cfg.data)
    source = open_source(cfg, dataset, stream_id=FINETUNE_DATA_STREAM)
    sched = LrSchedule(curriculum.lr_init, curriculum.lr_final, max(curriculum.total_steps, 1))
    opt = Lamb(student.parameters(), lr=curriculum.lr_init, weight_decay=cfg.weight_decay)
    opt.name_params(student.named_parameters())
    step_rng = RngStream(cfg.seed, TEACHER_STEP_STREAM)
    extra = {"config": cfg.to_json(), "phase": "finetune", "curriculum": asdict(curriculum)}
    losses, increments = [], []
    stream = hashlib.sha256()
    last_ckpt = Path(pretrained)
    step = 0
    start = time.perf_counter()
    fh = open(out / "metrics.csv", "w", newline="")
    w = csv.writer(fh)
    w.writerow(["step", "lr", "batch_size", "loss", "seconds", "curr_step", "multi_step_loss",
                "single_step_loss"])
    try:
        for curr in range(1, curriculum.max_time_steps + 1):
            teacher_digest = params_digest(teacher)
            inc_stream = hashlib.sha256()
            for _ in range(curriculum.steps_per_increment):
                bs = batch_size_at(step, cfg.batch_schedule)
                lr = cosine_lr(step, sched)
                x, y = source.next_batch(bs, curr)
                for h in (stream, inc_stream):
                    h.update(x.tobytes())
                    h.update(y.tobytes())
                states = torch.from_numpy(np.concatenate([x[:, None], y], axis=1))
                multi, single, _ = finetune_step(student, teacher, states, curr, step_rng.at(step))
                loss = multi + single
                if not torch.isfinite(loss):
                    raise TrainingDiverged(step, last_ckpt)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.set_lr(lr)
                opt.step()
                losses.append(float(loss.detach()))
                if step % cfg.log_every == 0:
                    w.writerow([step, repr(lr), bs, repr(losses[-1]),
                                f"{time.perf_counter() - start:.3f}", curr,
                                repr(float(multi.detach())), repr(float(single.detach()))])
                if on_step is not None:
                    on_step(step, curr, teacher)
                step += 1
            end_digest = params_digest(teacher)
            last_ckpt = save_checkpoint_dir(student, out / f"increment_{curr}",
                                            {**extra, "increment": curr})
            student_digest = params_digest(student)
            teacher = freeze(student)
            increments.append({"curr_step": curr, "teacher_start": teacher_digest,
                               "teacher_end": end_digest, "student_end": student_digest,
                               "next_teacher": params_digest(teacher),
                               "stream_digest": inc_stream.hexdigest()})
    finally:
        fh.close()
        source.close()
    (out / "increments.json").write_text(json.dumps(increments, indent=1))
    final = save_checkpoint_dir(student, out / "final", extra)
    return FinetuneResult(final, out / "metrics.csv", losses, increments, stream.hexdigest())
