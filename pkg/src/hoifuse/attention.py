"""Cross-attention constraint: gate the identity token's attention to the head region."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .masks import HeadMask, MaskPyramid, flatten


@dataclass(frozen=True, eq=False)
class ConditioningSequence:
    tokens: np.ndarray
    identity_index: Optional[int] = None
    descriptor: str = ""

    def __post_init__(self):
        tokens = np.array(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1 or tokens.shape[1] < 1:
            raise ValueError(f"conditioning tokens must be an N x D matrix with N, D >= 1, got {tokens.shape}")
        if self.identity_index is not None and not 0 <= self.identity_index < tokens.shape[0]:
            raise ValueError(f"identity_index {self.identity_index} out of range for {tokens.shape[0]} tokens")
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True, eq=False)
class AttentionMap:
    weights: np.ndarray
    spatial_shape: tuple[int, int]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        h, wd = self.spatial_shape
        if w.ndim != 2 or w.shape[0] != h * wd:
            raise ValueError(f"attention weights {w.shape} do not match spatial shape {self.spatial_shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "spatial_shape", (int(h), int(wd)))

    @property
    def n_tokens(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class AttentionMeta:
    """Layer metadata the backend passes alongside each cross-attention map."""

    layer: str
    timestep: int


AttentionInterceptor = Callable[[AttentionMap, AttentionMeta], AttentionMap]


def build_cac_mask(head_mask: HeadMask, n_tokens: int, identity_index: int) -> np.ndarray:
    if not 0 <= identity_index < n_tokens:
        raise ValueError(f"identity index {identity_index} out of range for {n_tokens} tokens")
    if not head_mask.is_binary():
        raise ValueError("the attention constraint expects a binarized head mask")
    h, w = head_mask.shape
    cac = np.ones((h * w, n_tokens))
    cac[:, identity_index] = flatten(head_mask)
    return cac


def apply_cac(attention: AttentionMap, cac_mask: np.ndarray) -> AttentionMap:
    if cac_mask.shape != attention.weights.shape:
        raise ValueError(f"CAC mask shape {cac_mask.shape} does not match attention {attention.weights.shape}")
    # no row renormalization: the zeroed mass is simply dropped
    return AttentionMap(attention.weights * cac_mask, attention.spatial_shape)


@dataclass
class CACInterceptor:
    """Attention interceptor applying the constraint at every layer.

    Masks are looked up in the pyramid by the map's spatial shape and
    binarized; the resulting (H*W) x N constraint matrices are cached.
    """

    pyramid: MaskPyramid
    identity_index: Optional[int]
    threshold: float = 0.5
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def cac_matrix(self, spatial_shape: tuple[int, int], n_tokens: int) -> np.ndarray:
        key = (tuple(spatial_shape), n_tokens)
        cac = self._cache.get(key)
        if cac is None:
            with self._lock:
                cac = self._cache.get(key)
                if cac is None:
                    level = self.pyramid.binary_level(spatial_shape, self.threshold)
                    cac = build_cac_mask(level, n_tokens, self.identity_index)
                    cac.setflags(write=False)
                    self._cache[key] = cac
        return cac

    def __call__(self, attention: AttentionMap, meta: Optional[AttentionMeta] = None) -> AttentionMap:
        if self.identity_index is None:
            return attention
        return apply_cac(attention, self.cac_matrix(attention.spatial_shape, attention.n_tokens))


def cac_layer_hook(backend_tap, head_mask_pyramid: MaskPyramid, identity_index: Optional[int]) -> CACInterceptor:
    """Build the interceptor for a backend; ``backend_tap`` is the backend or its descriptor.

    Pyramid levels for the backend's declared attention resolutions are
    built eagerly when the descriptor is available.
    """
    descriptor = getattr(backend_tap, "descriptor", backend_tap)
    interceptor = CACInterceptor(head_mask_pyramid, identity_index)
    for res in getattr(descriptor, "attention_resolutions", ()) or ():
        head_mask_pyramid.binary_level(res.shape if hasattr(res, "shape") else res[:2])
    return interceptor


def compose_interceptors(*interceptors: AttentionInterceptor) -> AttentionInterceptor:
    """Chain interceptors left to right (one per subject in multi-subject runs)."""

    def chained(attention: AttentionMap, meta: Optional[AttentionMeta] = None) -> AttentionMap:
        for f in interceptors:
            attention = f(attention, meta)
        return attention

    return chained
