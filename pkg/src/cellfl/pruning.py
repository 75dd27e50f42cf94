"""Binary masks, one-shot magnitude pruning and rewinding to initial weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError
from .nn import FlatModel


@dataclass(eq=False)
class BinaryMask:
    """Keep (True) / prune (False) bit per weight parameter."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 1:
            raise ConfigurationError("mask must be one-dimensional")

    @classmethod
    def ones(cls, d: int) -> "BinaryMask":
        return cls(np.ones(d, dtype=bool))

    @classmethod
    def zeros(cls, d: int) -> "BinaryMask":
        return cls(np.zeros(d, dtype=bool))

    def __len__(self) -> int:
        return int(self.bits.shape[0])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)

    @property
    def kept_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def pruned_count(self) -> int:
        return len(self) - self.kept_count

    def sparsity(self) -> float:
        return 1.0 - self.kept_count / len(self) if len(self) else 0.0

    def pruned_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.bits)

    def copy(self) -> "BinaryMask":
        return BinaryMask(self.bits.copy())


def prune_count(rate: float, d: int) -> int:
    # floor(rate * d) with a guard so that e.g. 0.8 * 10 (7.999...) counts as 8
    return min(d, math.floor(rate * d + 1e-9))


def magnitude_prune(
    model: FlatModel,
    cumulative_rate: float,
    within: BinaryMask | None = None,
    scope: str = "global",
) -> BinaryMask:
    """Prune the ``floor(rate * d)`` smallest-magnitude weights.

    With ``scope="global"`` the ranking spans every weight tensor at once;
    with ``scope="layer"`` each tensor loses ``floor(rate * d_layer)`` of its
    own weights. Equal magnitudes are pruned in order of flat index. If
    ``within`` is given, its pruned positions stay pruned and only its kept
    positions compete for the remaining cut, which yields nested masks for
    cumulative schedules.
    """
    if not 0.0 <= cumulative_rate < 1.0:
        raise UsageError(f"pruning rate must lie in [0, 1), got {cumulative_rate}")
    if scope not in ("global", "layer"):
        raise UsageError(f"pruning scope must be 'global' or 'layer', got {scope!r}")
    w = model.weights
    d = w.shape[0]
    if within is None:
        keep = np.ones(d, dtype=bool)
    else:
        if len(within) != d:
            raise ConfigurationError(f"mask of length {len(within)} for {d} weights")
        keep = within.bits.copy()
    if scope == "global":
        segments = [slice(0, d)]
    else:
        segments = [model.spec.weight_slice(i) for i in range(len(model.spec.layers))]
    for seg in segments:
        seg_keep = keep[seg]
        size = seg_keep.shape[0]
        extra = prune_count(cumulative_rate, size) - (size - int(seg_keep.sum()))
        if extra > 0:
            candidates = np.flatnonzero(seg_keep)
            order = np.argsort(np.abs(w[seg][candidates]), kind="stable")
            seg_keep[candidates[order[:extra]]] = False
    return BinaryMask(keep)


def reinitialize(mask: BinaryMask, initial: FlatModel) -> FlatModel:
    """Rewind to the stored initial weights under ``mask``; biases reset to ``initial``."""
    if len(mask) != initial.spec.weight_count:
        raise ConfigurationError(
            f"mask of length {len(mask)} for {initial.spec.weight_count} weights"
        )
    return FlatModel(initial.spec, initial.weights * mask.bits, initial.biases.copy())


def apply_mask(model: FlatModel, mask: BinaryMask) -> FlatModel:
    return FlatModel(model.spec, model.weights * mask.bits, model.biases.copy())


@dataclass
class PruneSchedule:
    """Cumulative per-user pruning rate stepping toward a target."""

    step: float = 0.2
    target: float = 0.8
    rate: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 < self.step < 1.0 and 0.0 < self.target < 1.0):
            raise ConfigurationError(
                f"step and target must lie in (0, 1), got {self.step}, {self.target}"
            )
        if not 0.0 <= self.rate <= self.target:
            raise ConfigurationError(f"rate {self.rate} outside [0, {self.target}]")

    @property
    def at_target(self) -> bool:
        return self.rate >= self.target


def advance_rate(sched: PruneSchedule) -> float:
    """``rate <- min(rate + step, target)``; stored back on the schedule."""
    sched.rate = min(sched.rate + sched.step, sched.target)
    return sched.rate
