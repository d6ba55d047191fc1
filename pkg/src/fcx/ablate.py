"""Multi-seed ablations over one architectural or training axis.

Every variant within a seed trains on the same sample stream (same seed,
stream id and crop), so per-seed differences come from the axis alone. Each
finished run leaves a ``result.json``; re-running a spec into the same output
directory reuses runs whose resolved config is unchanged.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .afno import ArchConfig
from .evalrep import evaluate_rollout
from .finetune import CurriculumConfig, curriculum_finetune
from .pretrain import RunConfig, TrainingDiverged, pretrain
from .synthdata import Dataset

log = logging.getLogger(__name__)

AXES = ("norm_mode", "patch", "flow", "finetune_depth")
LOSS_WINDOW = 50
NEED = 4  # seeds out of 5 for a directional verdict


@dataclass
class AblationSpec:
    base: RunConfig
    axis: str
    variants: list
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    budget: int = 1000
    eval_steps: int = 8
    n_initial_conditions: int = 32
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)

    def __post_init__(self):
        if isinstance(self.base, dict):
            self.base = RunConfig.from_json(self.base)
        if isinstance(self.curriculum, dict):
            self.curriculum = CurriculumConfig(**self.curriculum)
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if len(self.variants) < 2 and self.axis != "finetune_depth":
            raise ValueError("an ablation needs at least two variants")
        if not self.seeds:
            raise ValueError("no seeds")
        for v in self.variants:
            self.config_for(v, self.seeds[0])  # validates every variant up front

    @classmethod
    def from_json(cls, d: dict) -> "AblationSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ablation-spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "AblationSpec":
        return cls.from_json(json.loads(Path(path).read_text()))

    def arch_for(self, variant) -> ArchConfig:
        arch = self.base.arch
        if self.axis == "norm_mode":
            arch = replace(arch, norm_mode=str(variant))
        elif self.axis == "patch":
            arch = replace(arch, patch=int(variant))
        elif self.axis == "flow":
            arch = replace(arch, flow_mode=str(variant))
        arch.validate()
        return arch

    def config_for(self, variant, seed: int) -> RunConfig:
        return replace(self.base, arch=self.arch_for(variant), seed=int(seed), max_steps=self.budget,
                       ckpt_every=0)

    def curriculum_for(self, variant) -> CurriculumConfig:
        return replace(self.curriculum, max_time_steps=int(variant))


def label(variant) -> str:
    return str(variant)


def _config_key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _cached(path: Path, key: str) -> dict | None:
    f = path / "result.json"
    if f.exists():
        r = json.loads(f.read_text())
        if r.get("key") == key:
            return r
    return None


def _scores(ckpt, dataset, spec: AblationSpec) -> dict:
    rep = evaluate_rollout(ckpt, dataset, spec.eval_steps, spec.n_initial_conditions)
    return {"nrmse": [float(v) for v in rep.normalized()], "rmse": [float(v) for v in rep.averages]}


def _diverged(k: int) -> dict:
    return {"nrmse": [math.inf] * k, "rmse": [math.inf] * k}


def pretrain_key(spec: AblationSpec, cfg: RunConfig) -> str:
    return _config_key({"run": cfg.to_json(), "eval": [spec.eval_steps, spec.n_initial_conditions]})


def run_pretrain_variant(spec: AblationSpec, cfg: RunConfig, out: Path, dataset) -> dict:
    key = pretrain_key(spec, cfg)
    hit = _cached(out, key)
    if hit is not None:
        return hit
    try:
        res = pretrain(cfg, out=out)
        window = res.losses[-LOSS_WINDOW:]
        r = {"final_loss": float(np.mean(window)), "diverged": False, "diverged_at": None,
             "stream_digest": res.stream_digest, "checkpoint": str(res.checkpoint),
             **_scores(res.checkpoint, dataset, spec)}
    except TrainingDiverged as e:
        r = {"final_loss": math.inf, "diverged": True, "diverged_at": e.step, "stream_digest": "",
             "checkpoint": None, **_diverged(spec.eval_steps)}
    r["key"] = key
    (out / "result.json").write_text(json.dumps(r, indent=1))
    return r


def run_finetune_variant(spec: AblationSpec, cfg: RunConfig, curriculum: CurriculumConfig,
                         pretrained, out: Path, dataset) -> dict:
    key = _config_key({"run": cfg.to_json(), "curriculum": curriculum.__dict__, "init": str(pretrained),
                       "eval": [spec.eval_steps, spec.n_initial_conditions]})
    hit = _cached(out, key)
    if hit is not None:
        return hit
    try:
        res = curriculum_finetune(cfg, curriculum, pretrained, out=out)
        window = res.losses[-LOSS_WINDOW:]
        # depths differ in horizon after the first increment; pair on the shared prefix
        first = res.increments[0]["stream_digest"] if res.increments else ""
        r = {"final_loss": float(np.mean(window)), "diverged": False, "diverged_at": None,
             "stream_digest": first, "checkpoint": str(res.checkpoint),
             **_scores(res.checkpoint, dataset, spec)}
    except TrainingDiverged as e:
        r = {"final_loss": math.inf, "diverged": True, "diverged_at": e.step, "stream_digest": "",
             "checkpoint": None, **_diverged(spec.eval_steps)}
    r["key"] = key
    (out / "result.json").write_text(json.dumps(r, indent=1))
    return r


@dataclass
class AblationResult:
    spec: AblationSpec
    runs: dict  # (variant label, seed) -> result dict
    reference: dict = field(default_factory=dict)  # seed -> pretrained result (finetune_depth only)
    verdicts: dict = field(default_factory=dict)

    def metric(self, variant, seed, name="nrmse"):
        r = self.runs[(label(variant), seed)]
        return r[name]

    def single_step(self, variant, seed) -> float:
        return self.metric(variant, seed)[0]

    def multi_step(self, run: dict) -> float:
        k = self.spec.eval_steps
        return float(np.mean(run["nrmse"][1:k]))

    def rows(self) -> list[list]:
        out = []
        for (v, s), r in self.runs.items():
            out.append([v, s, "final_loss", repr(r["final_loss"])])
            out.append([v, s, "diverged", int(r["diverged"])])
            for k, val in enumerate(r["nrmse"], 1):
                out.append([v, s, f"nrmse_step{k}", repr(val)])
        for s, r in self.reference.items():
            for k, val in enumerate(r["nrmse"], 1):
                out.append(["pretrained", s, f"nrmse_step{k}", repr(val)])
        return out

    def write(self, out: Path) -> None:
        with open(out / "table.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "seed", "metric", "value"])
            w.writerows(self.rows())
        (out / "verdicts.json").write_text(json.dumps(self.verdicts, indent=1, sort_keys=True))


def _count(flags) -> dict:
    flags = [bool(f) for f in flags]
    n = len(flags)
    need = math.ceil(NEED * n / 5)
    return {"wins": sum(flags), "seeds": n, "need": need, "pass": sum(flags) >= need}


def relative_reduction(result: AblationResult, reference, ablated) -> float:
    """Mean over seeds of (ablated - reference) / ablated single-step RMSE."""
    vals = []
    for s in result.spec.seeds:
        a = result.single_step(ablated, s)
        r = result.single_step(reference, s)
        vals.append(1.0 if not math.isfinite(a) else (a - r) / a)
    return float(np.mean(vals))


def compute_verdicts(result: AblationResult) -> dict:
    spec, seeds = result.spec, result.spec.seeds
    v = {"stream_paired": _paired(result)}
    if spec.axis == "norm_mode":
        base = "post_deepnorm"
        def loss(var, s):
            return result.runs[(var, s)]["final_loss"]
        if "pre" in spec.variants:
            v["deepnorm_le_pre"] = _count(loss(base, s) <= loss("pre", s) for s in seeds)
            v["reduction"] = relative_reduction(result, base, "pre")
        if "post_plain" in spec.variants:
            v["post_plain_worse"] = _count(result.runs[("post_plain", s)]["diverged"]
                                           or loss("post_plain", s) > loss(base, s) for s in seeds)
    elif spec.axis == "patch":
        small, large = min(spec.variants), max(spec.variants)
        v["small_patch_wins"] = _count(result.single_step(small, s) < result.single_step(large, s)
                                       for s in seeds)
        v["reduction"] = relative_reduction(result, small, large)
    elif spec.axis == "flow":
        on = next(x for x in spec.variants if x != "off")
        v["flow_wins"] = _count(result.single_step(on, s) < result.single_step("off", s) for s in seeds)
        v["reduction"] = relative_reduction(result, on, "off")
    elif spec.axis == "finetune_depth":
        per_depth = {}
        for d in spec.variants:
            gain = [result.multi_step(result.runs[(label(d), s)]) < result.multi_step(result.reference[s])
                    for s in seeds]
            change = [result.single_step(d, s) / result.reference[s]["nrmse"][0] - 1.0 for s in seeds]
            per_depth[label(d)] = {
                "multi_step_gain": _count(gain),
                "no_forgetting": _count(c <= 0.10 for c in change),
                "single_step_change": change,
                "mean_multi_step": float(np.mean([result.multi_step(result.runs[(label(d), s)])
                                                  for s in seeds])),
            }
        v["depths"] = per_depth
        means = [per_depth[label(d)]["mean_multi_step"] for d in spec.variants]
        v["monotone_gain"] = bool(len(means) > 1 and all(b < a for a, b in zip(means, means[1:])))
    return v


def _paired(result: AblationResult) -> bool:
    for s in result.spec.seeds:
        digests = {r["stream_digest"] for (v, seed), r in result.runs.items()
                   if seed == s and not r["diverged"]}
        if len(digests) > 1:
            return False
    return True


def run_ablation(spec: AblationSpec, out, store=None) -> AblationResult:
    """Run every (variant, seed) of ``spec`` and write ``table.csv`` and ``verdicts.json`` to ``out``.

    With ``store`` set, pretraining runs live under ``store/<config key>`` instead
    of ``out``, so ablations over different axes share their common reference runs.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = Dataset(spec.base.data)
    runs, reference = {}, {}
    for seed in spec.seeds:
        if spec.axis == "finetune_depth":
            cfg = spec.config_for(None, seed)
            where = (Path(store) / pretrain_key(spec, cfg)[:16] if store is not None
                     else out / "pretrained" / f"seed_{seed}")
            ref = run_pretrain_variant(spec, cfg, where, dataset)
            if ref["diverged"]:
                raise RuntimeError(f"pretraining diverged for seed {seed}")
            reference[seed] = ref
            for d in spec.variants:
                log.info("finetune depth %s seed %s", d, seed)
                runs[(label(d), seed)] = run_finetune_variant(
                    spec, cfg, spec.curriculum_for(d), ref["checkpoint"],
                    out / f"depth_{label(d)}" / f"seed_{seed}", dataset)
        else:
            for variant in spec.variants:
                log.info("%s=%s seed %s", spec.axis, variant, seed)
                cfg = spec.config_for(variant, seed)
                where = (Path(store) / pretrain_key(spec, cfg)[:16] if store is not None
                         else out / label(variant) / f"seed_{seed}")
                runs[(label(variant), seed)] = run_pretrain_variant(spec, cfg, where, dataset)
    result = AblationResult(spec, runs, reference)
    result.verdicts = compute_verdicts(result)
    result.write(out)
    return result


def largest_reduction(results: dict[str, AblationResult]) -> str:
    """Axis whose reference variant gives the largest mean relative RMSE reduction."""
    red = {axis: r.verdicts["reduction"] for axis, r in results.items() if "reduction" in r.verdicts}
    return max(red, key=red.get)
