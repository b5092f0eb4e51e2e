"""Gaussian low/high-pass filtering of feature maps and the kernel-size schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class FilterMode(str, Enum):
    """Residual-merge filter configuration, named (SD-side, PFD-side)."""

    REPLACE = "Replace"
    NO_FILTER = "NoFilter"
    LOW_LOW = "LowLow"
    HIGH_HIGH = "HighHigh"
    HIGH_LOW = "HighLow"
    LOW_HIGH = "LowHigh"

    @classmethod
    def parse(cls, name: "str | FilterMode") -> "FilterMode":
        if isinstance(name, cls):
            return name
        key = str(name).replace("-", "").replace("_", "").lower()
        for mode in cls:
            if mode.value.lower() == key:
                return mode
        raise ValueError(f"unknown filter mode {name!r}; expected one of {[m.value for m in cls]}")


class ScheduleMode(str, Enum):
    CONSTANT = "constant"
    LINEAR_DECREMENTAL = "linear_decremental"
    LINEAR_INCREMENTAL = "linear_incremental"


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    size: int
    sigma: float
    weights: np.ndarray
    taps: np.ndarray  # normalized 1D factor; weights == outer(taps, taps)

    def to_dict(self) -> dict:
        return {"size": self.size, "sigma": self.sigma}


@dataclass(frozen=True)
class KernelSchedule:
    alpha_start: float = 2.5
    alpha_end: float = 0.5
    total_steps: int = 50
    mode: ScheduleMode = ScheduleMode.LINEAR_DECREMENTAL

    def __post_init__(self):
        object.__setattr__(self, "mode", ScheduleMode(self.mode))
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.alpha_start < 0 or self.alpha_end < 0:
            raise ValueError("alpha values must be non-negative")
        if self.mode is ScheduleMode.LINEAR_DECREMENTAL and self.alpha_end > self.alpha_start:
            raise ValueError("decremental schedule needs alpha_end <= alpha_start")
        if self.mode is ScheduleMode.LINEAR_INCREMENTAL and self.alpha_end < self.alpha_start:
            raise ValueError("incremental schedule needs alpha_end >= alpha_start")

    @classmethod
    def constant(cls, alpha: float, total_steps: int) -> "KernelSchedule":
        return cls(alpha, alpha, total_steps, ScheduleMode.CONSTANT)

    @classmethod
    def linear(cls, alpha_start: float, alpha_end: float, total_steps: int) -> "KernelSchedule":
        mode = ScheduleMode.LINEAR_DECREMENTAL if alpha_end <= alpha_start else ScheduleMode.LINEAR_INCREMENTAL
        return cls(alpha_start, alpha_end, total_steps, mode)

    def with_steps(self, total_steps: int) -> "KernelSchedule":
        return KernelSchedule(self.alpha_start, self.alpha_end, total_steps, self.mode)

    def to_dict(self) -> dict:
        return {
            "alpha_start": self.alpha_start,
            "alpha_end": self.alpha_end,
            "total_steps": self.total_steps,
            "mode": self.mode.value,
        }

    def label(self) -> str:
        if self.mode is ScheduleMode.CONSTANT:
            return f"{self.alpha_start:g}"
        return f"{self.alpha_start:g}->{self.alpha_end:g}"


def eval_schedule(schedule: KernelSchedule, step_index: int) -> float:
    T = schedule.total_steps
    if not 0 <= step_index < T:
        raise ValueError(f"step index {step_index} outside [0, {T})")
    if schedule.mode is ScheduleMode.CONSTANT:
        return float(schedule.alpha_start)
    if step_index == T - 1:
        return float(schedule.alpha_end)
    frac = step_index / (T - 1) if T > 1 else 0.0
    return float(schedule.alpha_start + (schedule.alpha_end - schedule.alpha_start) * frac)


def kernel_size_from_mask(area: float, alpha: float) -> int:
    if area < 0 or alpha < 0:
        raise ValueError(f"area and alpha must be non-negative, got area={area}, alpha={alpha}")
    size = int(round(alpha * math.sqrt(area)))
    if size % 2 == 0:
        size += 1
    return max(size, 1)


def build_kernel(size: int) -> GaussianKernel:
    if not isinstance(size, (int, np.integer)) or size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be an odd positive integer, got {size!r}")
    size = int(size)
    sigma = max(size / 6.0, 0.3)
    offsets = np.arange(size) - size // 2
    g = np.exp(-(offsets.astype(np.float64) ** 2) / (2.0 * sigma**2))
    taps = g / g.sum()
    weights = np.outer(taps, taps)
    taps.setflags(write=False)
    weights.setflags(write=False)
    return GaussianKernel(size=size, sigma=sigma, weights=weights, taps=taps)


def _smooth_axis(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    half = len(taps) // 2
    if half == 0:
        return x
    pad = [(0, 0)] * x.ndim
    pad[axis] = (half, half)
    xp = np.pad(x, pad, mode="reflect")
    n = x.shape[axis]
    # Accumulate weighted differences from the centre sample so that constant
    # rows come back bit-exact regardless of rounding in the taps.
    acc = np.zeros_like(x)
    for k, w in enumerate(taps):
        if k == half:
            continue
        shifted = np.take(xp, np.arange(k, k + n), axis=axis)
        acc += w * (shifted - x)
    return x + acc


def _check_field(field: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    if field.ndim < 2:
        raise ValueError(f"field must have at least 2 dims (.., H, W), got shape {field.shape}")
    if not np.all(np.isfinite(field)):
        raise ValueError("field contains non-finite entries")
    return field


def low_pass(field: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Per-channel separable Gaussian blur over the last two axes, reflect-padded."""
    field = _check_field(field)
    out = _smooth_axis(field, kernel.taps, field.ndim - 2)
    return _smooth_axis(out, kernel.taps, field.ndim - 1)


def high_pass(field: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    field = _check_field(field)
    return field - low_pass(field, kernel)
