"""Experiment configuration, deterministic run orchestration and the
comparison/ablation drivers.

Configs are YAML (or JSON) documents with nested sections; unknown keys are
hard errors so typos fail before any compute.  Each run writes one JSONL
trajectory per seed plus a flat summary document; all outputs are
byte-reproducible for a fixed (config, seed).
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import models, optim
from .autoswitch import (
    SwitchCriterion,
    StepStats,
    avg_change_metric_from_diffs,
    evaluate_offline,
)
from .errors import ConfigError, RangeError
from .masks import DecaySchedule, NMRatio, SparsityPlan
from .optim import AdamHyper, Recipe, TrainResult, constant_lr, cosine_lr, recipe_train

ABLATION_KINDS = ("precondition_length", "fixed_vs_updated_variance", "decaying_mask")

DEFAULT_CLIP_RATIOS = (0.1, 0.5)


def _take(section: dict, name: str, required=(), optional=()) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = set(required) | set(optional)
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {sorted(unknown)}")
    missing = set(required) - set(section)
    if missing:
        raise ConfigError(f"missing key(s) in {name!r}: {sorted(missing)}")
    return section


@dataclass(frozen=True)
class DataConfig:
    kind: str  # regression | blobs | csv
    n_samples: int = 256
    n_features: int = 2
    n_classes: int = 2
    noise_std: float = 0.1
    seed: int = 0
    batch_size: int = 32
    path: str | None = None
    n_targets: int = 1

    def build(self, model_kind: str) -> models.Dataset:
        if self.kind == "csv":
            target_kind = "class" if model_kind == "mlp_classifier" else "value"
            return models.load_csv(
                self.path, n_targets=self.n_targets,
                batch_size=self.batch_size, target_kind=target_kind,
            )
        return models.gen_synthetic(
            self.kind, self.n_samples, self.n_features,
            n_classes=self.n_classes, noise_std=self.noise_std,
            seed=self.seed, batch_size=self.batch_size,
        )


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    lr_schedule: str = "constant"  # constant | cosine

    def build(self, total_steps: int) -> AdamHyper:
        if self.lr_schedule == "constant":
            schedule = constant_lr(self.lr)
        elif self.lr_schedule == "cosine":
            schedule = cosine_lr(self.lr, total_steps)
        else:
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        return AdamHyper(beta1=self.beta1, beta2=self.beta2, eps=self.eps, lr_schedule=schedule)


@dataclass(frozen=True)
class SwitchConfig:
    kind: str
    option: str = "arithmetic"
    threshold: float | None = None
    clip_ratios: tuple[float, float] | None = None
    step: int | None = None
    step_ratio: float | None = None

    def build(self, total_steps: int) -> SwitchCriterion:
        clip = None
        if self.clip_ratios is not None:
            lo, hi = self.clip_ratios
            if not 0.0 <= lo < hi <= 1.0:
                raise ConfigError(f"clip ratios must satisfy 0 <= lo < hi <= 1, got {self.clip_ratios}")
            clip = (int(math.floor(lo * total_steps)), int(math.floor(hi * total_steps)))
        step = self.step
        if self.step_ratio is not None:
            if step is not None:
                raise ConfigError("give either step or step_ratio, not both")
            step = max(1, int(math.floor(self.step_ratio * total_steps)))
        return SwitchCriterion(
            kind=self.kind, option=self.option, threshold=self.threshold,
            clip=clip, step=step,
        )


@dataclass(frozen=True)
class AblationConfig:
    precondition_ratios: tuple[float, ...] = ()
    decay_m: int | None = None
    decay_boundaries: tuple[int, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    model: models.ModelSpec
    data: DataConfig
    optimizer: OptimizerConfig
    plan: SparsityPlan
    recipe_kind: str
    lam: float
    switch: SwitchConfig | None
    total_steps: int
    seeds: tuple[int, ...]
    output_dir: str
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(int(s) < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        # fail on unknown layers / bad group sizes before any compute
        self.plan.validate(models.param_shapes(self.model))

    def hyper(self) -> AdamHyper:
        return self.optimizer.build(self.total_steps)

    def criterion(self) -> SwitchCriterion | None:
        if self.switch is None:
            return None
        return self.switch.build(self.total_steps)


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = _take(doc, "config",
                required=("model", "data", "optimizer", "recipe", "total_steps", "seeds"),
                optional=("sparsity", "switch", "output_dir", "ablation"))

    m = _take(doc["model"], "model", required=("kind", "layer_sizes"), optional=("activation",))
    spec = models.ModelSpec(
        kind=m["kind"], layer_sizes=tuple(m["layer_sizes"]),
        activation=m.get("activation", "relu"),
    )

    d = _take(doc["data"], "data", required=("kind",),
              optional=("n_samples", "n_features", "n_classes", "noise_std",
                        "seed", "batch_size", "path", "n_targets"))
    if d["kind"] not in ("regression", "blobs", "csv"):
        raise ConfigError(f"unknown data kind {d['kind']!r}")
    if d["kind"] == "csv" and not d.get("path"):
        raise ConfigError("csv data needs a path")
    data = DataConfig(**d)

    o = _take(doc["optimizer"], "optimizer", required=(),
              optional=("beta1", "beta2", "eps", "lr", "lr_schedule"))
    optimizer = OptimizerConfig(**o)

    plan_ratios = {}
    for layer, ratio in (doc.get("sparsity") or {}).items():
        r = _take(ratio, f"sparsity.{layer}", required=("n", "m"))
        plan_ratios[str(layer)] = NMRatio(int(r["n"]), int(r["m"]))
    plan = SparsityPlan(plan_ratios)

    r = _take(doc["recipe"], "recipe", required=("kind",), optional=("lam",))
    if r["kind"] not in optim.RECIPE_KINDS:
        raise ConfigError(f"unknown recipe kind {r['kind']!r}")
    lam = float(r.get("lam", 0.0))
    if lam != 0.0 and r["kind"] != "srste":
        raise ConfigError("recipe.lam only applies to the srste recipe")

    switch = None
    if doc.get("switch") is not None:
        s = _take(doc["switch"], "switch", required=("kind",),
                  optional=("option", "threshold", "clip", "step", "step_ratio"))
        clip_ratios = None
        if s.get("clip") is not None:
            c = _take(s["clip"], "switch.clip", required=("t_min_ratio", "t_max_ratio"))
            clip_ratios = (float(c["t_min_ratio"]), float(c["t_max_ratio"]))
        switch = SwitchConfig(
            kind=s["kind"], option=s.get("option", "arithmetic"),
            threshold=s.get("threshold"), clip_ratios=clip_ratios,
            step=s.get("step"), step_ratio=s.get("step_ratio"),
        )

    ablation = AblationConfig()
    if doc.get("ablation") is not None:
        a = _take(doc["ablation"], "ablation", required=(),
                  optional=("precondition_ratios", "decay"))
        decay_m, decay_boundaries = None, ()
        if a.get("decay") is not None:
            dd = _take(a["decay"], "ablation.decay", required=("m",), optional=("stage_boundaries",))
            decay_m = int(dd["m"])
            decay_boundaries = tuple(int(b) for b in dd.get("stage_boundaries", ()))
        ablation = AblationConfig(
            precondition_ratios=tuple(float(x) for x in a.get("precondition_ratios", ())),
            decay_m=decay_m, decay_boundaries=decay_boundaries,
        )

    return ExperimentConfig(
        model=spec, data=data, optimizer=optimizer, plan=plan,
        recipe_kind=r["kind"], lam=lam, switch=switch,
        total_steps=int(doc["total_steps"]),
        seeds=tuple(doc["seeds"]),
        output_dir=str(doc.get("output_dir", "runs")),
        ablation=ablation,
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping document")
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# trajectory persistence
# ---------------------------------------------------------------------------


def write_trajectory(path, result: TrainResult) -> None:
    """One self-describing JSON record per step, then a final evaluation record."""
    with open(path, "w") as fh:
        for r in result.records:
            fh.write(json.dumps({
                "kind": "step", "step": r.step, "phase": r.phase, "loss": r.loss,
                "v_l1": r.v_l1, "v_l2": r.v_l2, "z": r.z, "z_geom": r.z_geom,
                "z_bar": r.z_bar, "switched_at": r.switched_at,
            }) + "\n")
        fh.write(json.dumps({
            "kind": "final",
            "sparse_eval_loss": result.sparse_eval_loss,
            "dense_eval_loss": result.dense_eval_loss,
            "mask_sparsity": result.layer_sparsity,
            "switched_at": result.switched_at,
        }) + "\n")


def _train_for_config(config: ExperimentConfig, seed: int) -> TrainResult:
    dataset = config.data.build(config.model.kind)
    recipe = Recipe(kind=config.recipe_kind, lam=config.lam, decay=_decay_of(config))
    return recipe_train(
        config.model, dataset, config.hyper(), config.plan, recipe,
        config.criterion(), config.total_steps, seed,
    )


def _decay_of(config: ExperimentConfig) -> DecaySchedule | None:
    if config.ablation.decay_m is None or config.recipe_kind == "dense":
        return None
    return DecaySchedule(config.ablation.decay_m, config.ablation.decay_boundaries)


@dataclass(frozen=True)
class RunSummary:
    seeds: tuple[int, ...]
    sparse_eval_losses: tuple[float, ...]
    dense_eval_losses: tuple[float, ...]
    switched_at: tuple[int | None, ...]
    trajectory_files: tuple[str, ...]

    def to_flat_dict(self) -> dict:
        mean = statistics.fmean
        std = statistics.pstdev if len(self.seeds) > 1 else lambda _: 0.0
        return {
            "n_seeds": len(self.seeds),
            "seeds": list(self.seeds),
            "sparse_eval_loss_mean": mean(self.sparse_eval_losses),
            "sparse_eval_loss_std": std(self.sparse_eval_losses),
            "dense_eval_loss_mean": mean(self.dense_eval_losses),
            "dense_eval_loss_std": std(self.dense_eval_losses),
            "switched_at": list(self.switched_at),
            "trajectory_files": list(self.trajectory_files),
        }


def run(config: ExperimentConfig, output_dir=None, jobs: int = 1) -> RunSummary:
    """Train every seed of the config, writing trajectories and a summary."""
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = config.seeds
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_for_config, [config] * len(seeds), seeds))
    else:
        results = [_train_for_config(config, seed) for seed in seeds]

    files = []
    for seed, result in zip(seeds, results):
        path = out / f"trajectory_seed{seed}.jsonl"
        write_trajectory(path, result)
        files.append(str(path))

    summary = RunSummary(
        seeds=seeds,
        sparse_eval_losses=tuple(r.sparse_eval_loss for r in results),
        dense_eval_losses=tuple(r.dense_eval_loss for r in results),
        switched_at=tuple(r.switched_at for r in results),
        trajectory_files=tuple(files),
    )
    with open(out / "summary.json", "w") as fh:
        json.dump(summary.to_flat_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# switch-criterion comparison
# ---------------------------------------------------------------------------


def default_comparison_criteria(total_steps: int) -> list[SwitchCriterion]:
    lo, hi = DEFAULT_CLIP_RATIOS
    clip = (int(math.floor(lo * total_steps)), int(math.floor(hi * total_steps)))
    return [
        SwitchCriterion(kind="autoswitch", option="arithmetic", clip=clip),
        SwitchCriterion(kind="relative"),
        SwitchCriterion(kind="staleness"),
    ]


def _profile_stats(records, d: int):
    stats = [
        StepStats(step=r.step, z_arith=r.z, z_geom=r.z_geom, v_l1=r.v_l1, v_l2=r.v_l2)
        for r in records
    ]
    # entry t is ||v_t - v_{t-1}||_1, reconstructed from the mean-change sample
    diffs = [0.0] * (len(records) + 1)
    for r in records:
        diffs[r.step] = r.z * d
    return stats, diffs


def compare_switch(
    config: ExperimentConfig,
    criteria: list[SwitchCriterion] | None = None,
    output_dir=None,
) -> list[dict]:
    """Profile dense runs and score each criterion's switch point offline.

    One dense profile per seed; every criterion is replayed over the recorded
    statistics and scored by the average variance change over the following
    1001 steps (lower is better).  Criteria that never fire get a no-switch
    row.
    """
    criteria = criteria if criteria is not None else default_comparison_criteria(config.total_steps)
    dataset = config.data.build(config.model.kind)
    hyper = config.hyper()
    d = sum(int(np.prod(shape)) for shape in models.param_shapes(config.model).values())
    rows = []
    for seed in config.seeds:
        profile = recipe_train(
            config.model, dataset, hyper, config.plan, Recipe("dense"),
            None, config.total_steps, seed,
        )
        stats, diffs = _profile_stats(profile.records, d)
        for criterion in criteria:
            t0 = evaluate_offline(criterion, stats, hyper.beta2, hyper.eps)
            if t0 is None:
                rows.append({"seed": seed, "criterion": criterion.label(),
                             "t0": None, "avg_change_metric": None, "note": "no-switch"})
                continue
            if len(diffs) <= t0 + 1001:
                raise RangeError(
                    f"profile too short for the metric window: criterion "
                    f"{criterion.label()} fired at {t0}, need {t0 + 1001} steps, "
                    f"have {config.total_steps}"
                )
            metric = avg_change_metric_from_diffs(diffs, t0)
            rows.append({"seed": seed, "criterion": criterion.label(),
                         "t0": t0, "avg_change_metric": metric, "note": ""})
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows_csv(out / "compare_switch.csv", rows,
                        ("seed", "criterion", "t0", "avg_change_metric", "note"))
    return rows


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def ablation(kind: str, config: ExperimentConfig, output_dir=None, jobs: int = 1) -> list[dict]:
    """Run one ablation matrix over the config's seeds.

    precondition_length forces switch points at the configured ratios of the
    budget; fixed_vs_updated_variance contrasts frozen and running variance in
    the masked phase; decaying_mask contrasts the stagewise-decay recipe with
    and without its dense warmup.
    """
    if kind not in ABLATION_KINDS:
        raise ConfigError(f"unknown ablation kind {kind!r}")
    cells: list[tuple[str, Recipe, SwitchCriterion | None]] = []

    if kind == "precondition_length":
        ratios = config.ablation.precondition_ratios
        if not ratios:
            raise ConfigError("precondition_length needs ablation.precondition_ratios")
        for ratio in ratios:
            if not 0.0 < ratio <= 1.0:
                raise ConfigError(f"forced-switch ratio must be in (0, 1], got {ratio}")
            t0 = max(1, int(math.floor(ratio * config.total_steps)))
            cells.append((
                f"ratio={ratio}",
                Recipe("step"),
                SwitchCriterion(kind="fixed", step=t0),
            ))
    elif kind == "fixed_vs_updated_variance":
        criterion = config.criterion()
        if criterion is None:
            raise ConfigError("fixed_vs_updated_variance needs a switch criterion")
        cells.append(("fixed_variance", Recipe("step"), criterion))
        cells.append(("updated_variance", Recipe("step_updated_variance"), criterion))
    else:
        if config.ablation.decay_m is None:
            raise ConfigError("decaying_mask needs ablation.decay")
        decay = DecaySchedule(config.ablation.decay_m, config.ablation.decay_boundaries)
        criterion = config.criterion()
        if criterion is None:
            raise ConfigError("decaying_mask needs a switch criterion for the dense-phase variant")
        cells.append(("with_dense_phase", Recipe("step_updated_variance", decay=decay), criterion))
        cells.append(("without_dense_phase", Recipe("ste", decay=decay), None))

    jobs_list = [(label, recipe, criterion, seed)
                 for label, recipe, criterion in cells for seed in config.seeds]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(
                _ablation_cell,
                [config] * len(jobs_list),
                [j[1] for j in jobs_list],
                [j[2] for j in jobs_list],
                [j[3] for j in jobs_list],
            ))
    else:
        results = [_ablation_cell(config, recipe, criterion, seed)
                   for _, recipe, criterion, seed in jobs_list]
    rows = []
    for (label, _, _, seed), result in zip(jobs_list, results):
        rows.append({
            "cell": label, "seed": seed,
            "sparse_eval_loss": result.sparse_eval_loss,
            "dense_eval_loss": result.dense_eval_loss,
            "switched_at": result.switched_at,
        })
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows_csv(out / f"ablation_{kind}.csv", rows,
                        ("cell", "seed", "sparse_eval_loss", "dense_eval_loss", "switched_at"))
    return rows


def _ablation_cell(config: ExperimentConfig, recipe: Recipe,
                   criterion: SwitchCriterion | None, seed: int) -> TrainResult:
    # dataset and hyper are rebuilt here so the cell can run in a worker process
    dataset = config.data.build(config.model.kind)
    return recipe_train(
        config.model, dataset, config.hyper(), config.plan, recipe,
        criterion, config.total_steps, seed,
    )


def _write_rows_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
