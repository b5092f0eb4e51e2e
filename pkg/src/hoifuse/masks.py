"""Head-mask representation and resampling.

Masks are plain 2D float arrays wrapped in a small frozen dataclass. All
resampling is area-weighted (box filter), so a mask keeps its total mass
across the resolutions used by the latent, attention and residual paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BINARIZE_THRESHOLD = 0.5


class MaskSource(str, Enum):
    SEGMENTOR = "segmentor"
    USER_SUPPLIED = "user_supplied"


@dataclass(frozen=True, eq=False)
class HeadMask:
    values: np.ndarray
    source: MaskSource = MaskSource.SEGMENTOR

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"head mask must be a non-empty 2D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("head mask entries must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "source", MaskSource(self.source))

    @property
    def native_resolution(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def __eq__(self, other):
        if not isinstance(other, HeadMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    @classmethod
    def full(cls, shape: tuple[int, int], value: float = 1.0, source=MaskSource.USER_SUPPLIED) -> "HeadMask":
        return cls(np.full(shape, float(value)), source)


def _check_target(target) -> tuple[int, int]:
    if len(target) != 2:
        raise ValueError(f"target resolution must be (H, W), got {target!r}")
    h, w = int(target[0]), int(target[1])
    if h < 1 or w < 1:
        raise ValueError(f"target resolution must be positive, got {target!r}")
    return h, w


def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    # Output cell i spans [i*n_in, (i+1)*n_in) and input pixel j spans
    # [j*n_out, (j+1)*n_out) in units scaled by n_in*n_out, so overlaps are integers.
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * n_in, (i + 1) * n_in
        j0, j1 = lo // n_out, -(-hi // n_out)
        for j in range(j0, min(j1, n_in)):
            ov = min(hi, (j + 1) * n_out) - max(lo, j * n_out)
            if ov > 0:
                weights[i, j] = ov / n_in
    return weights


def _resample_axis(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    weights = _overlap_weights(n_in, n_out)
    # Each output is written as anchor + sum(w * (x - anchor)) with the anchor
    # taken from the cell's first overlapping pixel; constant inputs map exactly.
    anchors = np.argmax(weights > 0, axis=1)
    xm = np.moveaxis(x, axis, -1)
    anchor_vals = xm[..., anchors]
    diffs = xm[..., None, :] - anchor_vals[..., :, None]
    out = anchor_vals + np.einsum("...ij,ij->...i", diffs, weights)
    return np.moveaxis(out, -1, axis)


def area_resize(x: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-weighted resampling over the last two axes of ``x``."""
    h, w = _check_target(target)
    x = np.asarray(x, dtype=np.float64)
    out = _resample_axis(x, h, x.ndim - 2)
    return _resample_axis(out, w, x.ndim - 1)


def resize_mask(mask: HeadMask, target: tuple[int, int]) -> HeadMask:
    target = _check_target(target)
    if mask.shape == target:
        return mask
    # rounding can overshoot [0, 1] by an ulp
    values = np.clip(area_resize(mask.values, target), 0.0, 1.0)
    return HeadMask(values, mask.source)


def binarize(mask: HeadMask, threshold: float = BINARIZE_THRESHOLD) -> HeadMask:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return HeadMask((mask.values >= threshold).astype(np.float64), mask.source)


def flatten(mask: HeadMask) -> np.ndarray:
    return mask.values.reshape(-1).copy()


def union(masks: Sequence[HeadMask]) -> HeadMask:
    masks = list(masks)
    if not masks:
        raise ValueError("union of an empty list of masks")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ValueError(f"mask shape mismatch: {m.shape} vs {shape}")
    values = np.maximum.reduce([m.values for m in masks])
    return HeadMask(values, masks[0].source)


def mask_area(mask: HeadMask) -> float:
    return float(mask.values.sum())


@dataclass
class MaskPyramid:
    """A base mask plus its resized copies, keyed by (H, W).

    Levels missing from the pyramid are built on first request with
    :func:`resize_mask`; binarized levels are cached separately.
    """

    base: HeadMask
    levels: dict = field(default_factory=dict)
    _binary: dict = field(default_factory=dict, repr=False)

    def level(self, resolution: tuple[int, int]) -> HeadMask:
        resolution = _check_target(resolution)
        if resolution == self.base.shape:
            return self.base
        if resolution not in self.levels:
            self.levels[resolution] = resize_mask(self.base, resolution)
        return self.levels[resolution]

    def binary_level(self, resolution: tuple[int, int], threshold: float = BINARIZE_THRESHOLD) -> HeadMask:
        key = (_check_target(resolution), threshold)
        if key not in self._binary:
            self._binary[key] = binarize(self.level(resolution), threshold)
        return self._binary[key]

    def __contains__(self, resolution) -> bool:
        return tuple(resolution) in self.levels or tuple(resolution) == self.base.shape


def build_pyramid(mask: HeadMask, resolutions: Iterable[tuple[int, int]]) -> MaskPyramid:
    resolutions = [_check_target(r) for r in resolutions]
    if not resolutions:
        raise ValueError("build_pyramid needs at least one resolution")
    pyramid = MaskPyramid(base=mask)
    for r in resolutions:
        pyramid.levels[r] = resize_mask(mask, r)
    return pyramid


def load_mask(path, source=MaskSource.USER_SUPPLIED) -> HeadMask:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return HeadMask(arr / 255.0, source)


def save_mask(mask: HeadMask, path) -> None:
    from PIL import Image

    arr = np.rint(mask.values * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)
