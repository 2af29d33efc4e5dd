"""N:M mask computation, per-layer sparsity plans and the stagewise decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class NMRatio:
    """Keep n of every m consecutive weights along the innermost axis."""

    n: int
    m: int

    def __post_init__(self):
        if not (1 <= self.n <= self.m):
            raise ConfigError(f"need 1 <= n <= m, got {self.n}:{self.m}")

    def __str__(self):
        return f"{self.n}:{self.m}"


def compute_nm_mask(weights, ratio: NMRatio) -> np.ndarray:
    """Binary mask keeping the n largest-magnitude entries of every m-group.

    Ties break toward the lower flat index so masks are reproducible.
    """
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.ndim == 0 or w.shape[-1] % ratio.m != 0:
        extent = w.shape[-1] if w.ndim else 0
        raise DimensionError(f"innermost extent {extent} not divisible by m={ratio.m}")
    groups = np.abs(w).reshape(-1, ratio.m)
    # stable sort on negated magnitudes: equal magnitudes keep index order
    order = np.argsort(-groups, axis=1, kind="stable")
    mask = np.zeros_like(groups)
    np.put_along_axis(mask, order[:, : ratio.n], 1.0, axis=1)
    out = mask.reshape(w.shape)
    out.setflags(write=False)
    return out


def apply_mask(weights, mask) -> np.ndarray:
    """Coordinate-wise product of weights and a binary mask."""
    w = np.asarray(weights, dtype=np.float64)
    p = np.asarray(mask, dtype=np.float64)
    if w.shape != p.shape:
        raise DimensionError(f"shape mismatch: {w.shape} vs {p.shape}")
    out = w * p
    out.setflags(write=False)
    return out


def decayed_n(m: int, s: int) -> int:
    """Effective n at decay stage s: m-1 at stage 0, then max(1, floor(m / 2**s))."""
    if m < 2:
        raise ConfigError(f"decay schedule needs m >= 2, got {m}")
    if s < 0:
        raise ConfigError(f"stage index must be >= 0, got {s}")
    if s == 0:
        return m - 1
    return max(1, m // 2**s)


def mask_sparsity(mask) -> float:
    """Fraction of zeroed coordinates, exactly 1 - n/m for a well-formed mask."""
    p = np.asarray(mask)
    if p.size == 0:
        raise DimensionError("empty mask")
    return float(np.count_nonzero(p == 0.0) / p.size)


@dataclass(frozen=True)
class SparsityPlan:
    """Per-layer N:M ratios; layers absent from the map stay dense.

    Keys are parameter names as they appear in the ParamSet.  By convention
    only weight tensors are listed; biases stay dense.
    """

    ratios: dict[str, NMRatio] = field(default_factory=dict)

    def validate(self, param_shapes: dict[str, tuple[int, ...]]) -> None:
        for name, ratio in self.ratios.items():
            if name not in param_shapes:
                raise ConfigError(f"sparsity plan references unknown layer {name!r}")
            extent = param_shapes[name][-1]
            if extent % ratio.m != 0:
                raise ConfigError(
                    f"layer {name!r}: innermost extent {extent} not divisible by m={ratio.m}"
                )

    def items(self):
        return self.ratios.items()

    def get(self, name: str):
        return self.ratios.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self.ratios

    def __bool__(self) -> bool:
        return bool(self.ratios)


@dataclass(frozen=True)
class DecaySchedule:
    """Stagewise N:M decay: stage 0 keeps m-1 of m, stage s keeps floor(m / 2**s).

    ``stage_boundaries`` are the steps at which the stage index increments, so
    the effective n is non-increasing over the run.
    """

    m: int
    stage_boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        if self.m < 2:
            raise ConfigError(f"decay schedule needs m >= 2, got {self.m}")
        bounds = tuple(int(b) for b in self.stage_boundaries)
        if any(b <= 0 for b in bounds) or list(bounds) != sorted(set(bounds)):
            raise ConfigError("stage boundaries must be strictly increasing positive steps")
        object.__setattr__(self, "stage_boundaries", bounds)

    def stage_at(self, step: int) -> int:
        return sum(1 for b in self.stage_boundaries if step >= b)

    def ratio_at(self, step: int) -> NMRatio:
        return NMRatio(decayed_n(self.m, self.stage_at(step)), self.m)
