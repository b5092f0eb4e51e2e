"""Latent and residual merging of the SD and PFD branches."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .filters import FilterMode, GaussianKernel, high_pass, low_pass
from .masks import HeadMask, MaskPyramid


class Branch(str, Enum):
    SD = "SD"
    PFD = "PFD"
    MERGED = "merged"


@dataclass(frozen=True, eq=False)
class LatentGrid:
    values: np.ndarray
    timestep: int
    branch_tag: Branch = Branch.SD

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"latent must be C x H x W, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent contains non-finite entries")
        if self.timestep < 0:
            raise ValueError(f"negative timestep {self.timestep}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "branch_tag", Branch(self.branch_tag))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def retag(self, branch: Branch) -> "LatentGrid":
        return LatentGrid(self.values, self.timestep, branch)


@dataclass(frozen=True, eq=False)
class ResidualStack:
    """Skip-connection features, one C_l x H_l x W_l tensor per layer."""

    layers: tuple
    branch_tag: Branch = Branch.SD

    def __post_init__(self):
        layers = tuple((int(i), np.asarray(t, dtype=np.float64)) for i, t in self.layers)
        for i, t in layers:
            if t.ndim != 3:
                raise ValueError(f"residual layer {i} must be C x H x W, got {t.shape}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "branch_tag", Branch(self.branch_tag))

    @classmethod
    def from_tensors(cls, tensors: Iterable[np.ndarray], branch_tag=Branch.SD) -> "ResidualStack":
        return cls(tuple(enumerate(tensors)), branch_tag)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [t.shape for _, t in self.layers]

    @property
    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.layers]

    def __len__(self):
        return len(self.layers)

    def equals(self, other: "ResidualStack") -> bool:
        return len(self) == len(other) and all(
            i == j and np.array_equal(a, b) for (i, a), (j, b) in zip(self.layers, other.layers)
        )


def latent_merge(z_pfd: LatentGrid, z_sd: LatentGrid, mask: HeadMask) -> LatentGrid:
    if z_pfd.shape != z_sd.shape:
        raise ValueError(f"latent shape mismatch: {z_pfd.shape} vs {z_sd.shape}")
    if z_pfd.timestep != z_sd.timestep:
        raise ValueError(f"latent timestep mismatch: {z_pfd.timestep} vs {z_sd.timestep}")
    if mask.shape != z_pfd.shape[1:]:
        raise ValueError(f"mask {mask.shape} is not at latent resolution {z_pfd.shape[1:]}")
    m = mask.values[None]
    out = m * z_pfd.values + (1.0 - m) * z_sd.values
    return LatentGrid(out, z_pfd.timestep, Branch.MERGED)


_SIDE_FILTERS = {
    FilterMode.LOW_LOW: ("low", "low"),
    FilterMode.HIGH_HIGH: ("high", "high"),
    FilterMode.HIGH_LOW: ("high", "low"),
    FilterMode.LOW_HIGH: ("low", "high"),
}


def _apply(kind: str, x: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    return low_pass(x, kernel) if kind == "low" else high_pass(x, kernel)


def merge_layer(r_pfd: np.ndarray, r_sd: np.ndarray, mask: np.ndarray, kernel: Optional[GaussianKernel],
                mode: FilterMode) -> np.ndarray:
    """Blend one skip layer; ``mask`` is H_l x W_l and broadcast over channels."""
    mode = FilterMode.parse(mode)
    if mode is FilterMode.REPLACE:
        return r_sd
    if mode is FilterMode.NO_FILTER:
        sd_part, pfd_part = r_sd, r_pfd
    else:
        if kernel is None:
            raise ValueError(f"mode {mode.value} needs a kernel")
        sd_kind, pfd_kind = _SIDE_FILTERS[mode]
        sd_part, pfd_part = _apply(sd_kind, r_sd, kernel), _apply(pfd_kind, r_pfd, kernel)
    m = mask[None]
    return m * pfd_part + (1.0 - m) * sd_part


def residual_merge(r_pfd: ResidualStack, r_sd: ResidualStack, pyramid: MaskPyramid,
                   kernel: Optional[GaussianKernel], mode: FilterMode,
                   enabled_layers: Optional[Sequence[int]] = None) -> ResidualStack:
    """Merge two residual stacks layer by layer.

    Layers not listed in ``enabled_layers`` (when given) pass the PFD
    residual through untouched.
    """
    mode = FilterMode.parse(mode)
    if r_pfd.shapes != r_sd.shapes:
        raise ValueError(f"residual stack shapes differ: {r_pfd.shapes} vs {r_sd.shapes}")
    enabled = None if enabled_layers is None else set(enabled_layers)
    merged = []
    for (idx, a), (_, b) in zip(r_pfd.layers, r_sd.layers):
        if enabled is not None and idx not in enabled:
            merged.append((idx, a))
            continue
        level = pyramid.level(a.shape[1:])
        merged.append((idx, merge_layer(a, b, level.values, kernel, mode)))
    return ResidualStack(tuple(merged), Branch.MERGED)
