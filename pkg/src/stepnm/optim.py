"""Adam optimizer, straight-through gradient transforms and the training recipes.

The two-phase recipe runs plain dense Adam until a switch criterion fires,
freezes the variance accumulator at that point, and then learns masks with
straight-through gradients while the frozen variance keeps scaling the
learning rate.  Single-phase baselines (dense, ste, srste) and the
updated-variance variant share the same driver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import models
from .autoswitch import GEOMETRIC_FLOOR, StepStats, SwitchCriterion, make_detector
from .errors import ConfigError, DimensionError, NumericalError
from .masks import DecaySchedule, NMRatio, SparsityPlan, apply_mask, compute_nm_mask, mask_sparsity

ParamSet = models.ParamSet
LRSchedule = Callable[[int], float]

RECIPE_KINDS = ("dense", "ste", "srste", "step", "step_updated_variance")
TWO_PHASE_KINDS = ("step", "step_updated_variance")


def constant_lr(gamma: float) -> LRSchedule:
    if gamma <= 0:
        raise ConfigError("learning rate must be positive")
    return lambda t: gamma


def cosine_lr(gamma: float, total_steps: int, floor: float = 0.0) -> LRSchedule:
    """Cosine decay from gamma to floor over total_steps."""
    if gamma <= 0 or floor < 0 or floor >= gamma:
        raise ConfigError("cosine schedule needs gamma > floor >= 0")
    if total_steps < 1:
        raise ConfigError("cosine schedule needs total_steps >= 1")

    def schedule(t: int) -> float:
        frac = min(max(t, 0), total_steps) / total_steps
        return floor + 0.5 * (gamma - floor) * (1.0 + math.cos(math.pi * frac))

    return schedule


@dataclass(frozen=True)
class AdamHyper:
    """Adam hyperparameters; the learning-rate schedule maps step index to gamma."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: LRSchedule = field(default_factory=lambda: constant_lr(1e-3))

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"beta2 must be in [0, 1), got {self.beta2}")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus the completed-step counter."""

    m: ParamSet
    v: ParamSet
    t: int = 0


def init_adam_state(params: ParamSet) -> AdamState:
    zeros = lambda p: np.zeros_like(np.asarray(p, dtype=np.float64))
    return AdamState(
        m={name: zeros(p) for name, p in params.items()},
        v={name: zeros(p) for name, p in params.items()},
        t=0,
    )


def _check_grads(params: ParamSet, grads: ParamSet, step: int) -> None:
    for name, w in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != np.shape(w):
            raise DimensionError(f"gradient for {name!r} missing or misshapen")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r} at step {step}")


def adam_step(state: AdamState, hyper: AdamHyper, params: ParamSet, grads: ParamSet):
    """One Adam update; returns new (state, params) without mutating the inputs.

    Bias correction divides by 1 - beta**k where k counts the gradients
    accumulated so far, so the first step divides by 1 - beta (never zero).
    Epsilon sits inside the square root.
    """
    k = state.t + 1
    _check_grads(params, grads, k)
    gamma = hyper.lr_schedule(state.t)
    b1, b2 = hyper.beta1, hyper.beta2
    m_corr = 1.0 - b1**k
    v_corr = 1.0 - b2**k
    new_m, new_v, new_p = {}, {}, {}
    for name, w in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_p[name] = w - gamma * (m / m_corr) / np.sqrt(v / v_corr + hyper.eps)
        new_m[name], new_v[name] = m, v
    return AdamState(new_m, new_v, k), new_p


def ste_grad(spec, params: ParamSet, plan: SparsityPlan, batch):
    """Dense gradient evaluated at the masked point (straight-through).

    The forward pass sees mask * weights for every planned layer; the
    returned gradients are exactly the gradients at that masked point,
    applied to all coordinates.  Also returns the masks used.
    """
    grads, masks, _ = _ste_loss_and_grad(spec, params, dict(plan.items()), batch)
    return grads, masks


def srste_grad(spec, params: ParamSet, plan: SparsityPlan, batch, lam: float):
    """STE gradient plus lam * (1 - mask) * weights on planned layers."""
    if lam < 0:
        raise ConfigError("the sparse-refinement coefficient lam must be >= 0")
    grads, masks, _ = _ste_loss_and_grad(spec, params, dict(plan.items()), batch, lam=lam)
    return grads, masks


def _ste_loss_and_grad(spec, params, ratios: dict[str, NMRatio], batch, lam: float = 0.0):
    masks = {name: compute_nm_mask(params[name], ratio) for name, ratio in ratios.items()}
    masked = dict(params)
    for name, mask in masks.items():
        masked[name] = np.asarray(params[name], dtype=np.float64) * mask
    loss, grads = models.loss_and_grad(spec, masked, batch)
    if lam > 0.0:
        grads = dict(grads)
        for name, mask in masks.items():
            grads[name] = grads[name] + lam * (1.0 - mask) * np.asarray(params[name])
    return grads, masks, loss


def _masked_phase_step(state, hyper, params, grads, v_star, update_variance: bool):
    """Mask-learning update: momentum as usual, raw variance in the denominator.

    With ``update_variance`` False the denominator uses the frozen v_star and
    the accumulator is left untouched; otherwise the accumulator keeps running
    and its current raw value scales the step.
    """
    k = state.t + 1
    _check_grads(params, grads, k)
    gamma = hyper.lr_schedule(state.t)
    b1, b2 = hyper.beta1, hyper.beta2
    m_corr = 1.0 - b1**k
    new_m, new_v, new_p = {}, {}, {}
    for name, w in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m[name] + (1.0 - b1) * g
        if update_variance:
            v = b2 * state.v[name] + (1.0 - b2) * g * g
            denom = v
        else:
            v = state.v[name]
            denom = v_star[name]
        new_p[name] = w - gamma * (m / m_corr) / np.sqrt(denom + hyper.eps)
        new_m[name], new_v[name] = m, v
    return AdamState(new_m, new_v, k), new_p


@dataclass(frozen=True)
class Recipe:
    """Training recipe: gradient rule plus optional stagewise ratio decay."""

    kind: str
    lam: float = 0.0
    decay: DecaySchedule | None = None

    def __post_init__(self):
        if self.kind not in RECIPE_KINDS:
            raise ConfigError(f"unknown recipe kind {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.lam > 0 and self.kind != "srste":
            raise ConfigError("lam only applies to the srste recipe")
        if self.decay is not None and self.kind == "dense":
            raise ConfigError("the dense recipe cannot take a decay schedule")


@dataclass
class StepRecord:
    """One trajectory line: losses, variance norms and switch samples."""

    step: int
    phase: str
    loss: float
    v_l1: float
    v_l2: float
    z: float | None
    z_geom: float | None
    z_bar: float | None
    switched_at: int | None


@dataclass
class TrainResult:
    """Everything a run produces: final weights, masks, state and trajectory."""

    params: ParamSet
    masked_params: ParamSet
    final_masks: dict[str, np.ndarray]
    state: AdamState
    v_star: ParamSet | None
    switched_at: int | None
    records: list[StepRecord]
    sparse_eval_loss: float
    dense_eval_loss: float
    layer_sparsity: dict[str, float]
    snapshots: dict[int, tuple[ParamSet, AdamState]]


def _effective_ratios(plan: SparsityPlan, decay: DecaySchedule | None, step: int) -> dict[str, NMRatio]:
    if decay is None:
        return dict(plan.items())
    ratio = decay.ratio_at(step)
    return {name: ratio for name, _ in plan.items()}


def _packed_stats(v: ParamSet) -> tuple[float, float]:
    l1 = 0.0
    sq = 0.0
    for arr in v.values():
        l1 += float(np.sum(np.abs(arr)))
        sq += float(np.sum(np.square(arr)))
    return l1, math.sqrt(sq)


def _packed_change(v: ParamSet, v_prev: ParamSet) -> tuple[float, float]:
    """Arithmetic and geometric per-coordinate change samples over all parameters."""
    total_abs = 0.0
    total_log = 0.0
    count = 0
    for name, arr in v.items():
        delta = np.abs(arr - v_prev[name])
        total_abs += float(np.sum(delta))
        total_log += float(np.sum(np.log(np.maximum(delta, GEOMETRIC_FLOOR))))
        count += delta.size
    return total_abs / count, math.exp(total_log / count)


def recipe_train(
    spec: models.ModelSpec,
    dataset: models.Dataset,
    hyper: AdamHyper,
    plan: SparsityPlan,
    recipe: Recipe,
    switch: SwitchCriterion | None,
    total_steps: int,
    seed: int,
    snapshot_steps=(),
) -> TrainResult:
    """Train for total_steps with the given recipe; fully deterministic per seed.

    Two-phase recipes consult the switch criterion after every dense step and
    freeze the variance when it fires; if it never fires the run stays dense
    throughout and the trajectory simply reports no switch.  Single-phase
    recipes (dense, ste, srste) ignore the criterion.  The returned weights
    are always evaluated both densely and under the final mask.
    """
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    shapes = models.param_shapes(spec)
    plan.validate(shapes)
    if recipe.decay is not None:
        for name, _ in plan.items():
            if shapes[name][-1] % recipe.decay.m != 0:
                raise ConfigError(
                    f"layer {name!r}: innermost extent {shapes[name][-1]} "
                    f"not divisible by decay m={recipe.decay.m}"
                )
    two_phase = recipe.kind in TWO_PHASE_KINDS
    if two_phase and switch is None:
        raise ConfigError(f"recipe {recipe.kind!r} needs a switch criterion")

    params = models.init_params(spec, (seed, 0))
    state = init_adam_state(params)
    batches = models.batch_iterator(dataset, (seed, 1))
    detector = make_detector(switch, hyper.beta2, hyper.eps) if two_phase else None

    masked_from_start = recipe.kind in ("ste", "srste")
    switched_at: int | None = None
    v_star: ParamSet | None = None
    records: list[StepRecord] = []
    snapshots: dict[int, tuple[ParamSet, AdamState]] = {}
    snapshot_steps = set(int(s) for s in snapshot_steps)

    for t in range(1, total_steps + 1):
        batch = next(batches)
        in_masked_phase = masked_from_start or switched_at is not None
        prev_v = state.v

        if in_masked_phase and plan:
            ratios = _effective_ratios(plan, recipe.decay, t)
            lam = recipe.lam if recipe.kind == "srste" else 0.0
            grads, _, loss = _ste_loss_and_grad(spec, params, ratios, batch, lam=lam)
        else:
            loss, grads = models.loss_and_grad(spec, params, batch)

        if two_phase and switched_at is not None:
            state, params = _masked_phase_step(
                state, hyper, params, grads, v_star,
                update_variance=recipe.kind == "step_updated_variance",
            )
            v_changed = recipe.kind == "step_updated_variance"
        else:
            state, params = adam_step(state, hyper, params, grads)
            v_changed = True

        z = z_geom = z_bar = None
        if v_changed:
            z, z_geom = _packed_change(state.v, prev_v)
        v_l1, v_l2 = _packed_stats(state.v)

        fired_now = None
        if detector is not None and switched_at is None:
            stats = StepStats(step=t, z_arith=z, z_geom=z_geom, v_l1=v_l1, v_l2=v_l2)
            fired = detector.observe(stats)
            z_bar = getattr(detector, "last_mean", None)
            if fired:
                switched_at = t
                fired_now = t
                v_star = {name: arr.copy() for name, arr in state.v.items()}

        phase = "mask_learning" if (masked_from_start or
                                    (switched_at is not None and t > switched_at)) else "precondition"
        records.append(StepRecord(
            step=t, phase=phase, loss=loss, v_l1=v_l1, v_l2=v_l2,
            z=z, z_geom=z_geom, z_bar=z_bar, switched_at=fired_now,
        ))
        if t in snapshot_steps:
            snapshots[t] = (
                dict(params),
                AdamState(dict(state.m), dict(state.v), state.t),
            )

    final_ratios = _effective_ratios(plan, recipe.decay, total_steps) if plan else {}
    final_masks = {name: compute_nm_mask(params[name], ratio) for name, ratio in final_ratios.items()}
    masked_params = dict(params)
    for name, mask in final_masks.items():
        masked_params[name] = apply_mask(params[name], mask)

    full = dataset.full_batch()
    return TrainResult(
        params=params,
        masked_params=masked_params,
        final_masks=final_masks,
        state=state,
        v_star=v_star,
        switched_at=switched_at,
        records=records,
        sparse_eval_loss=models.forward_loss(spec, masked_params, full),
        dense_eval_loss=models.forward_loss(spec, params, full),
        layer_sparsity={name: mask_sparsity(mask) for name, mask in final_masks.items()},
        snapshots=snapshots,
    )


def step_train(
    spec: models.ModelSpec,
    dataset: models.Dataset,
    hyper: AdamHyper,
    plan: SparsityPlan,
    switch: SwitchCriterion,
    total_steps: int,
    seed: int,
    **kwargs,
) -> TrainResult:
    """Two-phase training: dense preconditioning, then frozen-variance mask learning."""
    return recipe_train(
        spec, dataset, hyper, plan, Recipe("step"), switch, total_steps, seed, **kwargs
    )
