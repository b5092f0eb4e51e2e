"""Denoiser backend contract plus a deterministic toy implementation.

A backend exposes ``descriptor``, ``predict_noise``, ``scheduler_step`` and
``decode``. The two hooks accepted by ``predict_noise`` (an attention
interceptor and a residual override) are the only integration points the
fusion pipeline needs, so a real U-Net adapter only has to route its
cross-attention probabilities and skip features through them.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np

from .attention import AttentionInterceptor, AttentionMap, AttentionMeta, ConditioningSequence
from .masks import area_resize
from .merge import Branch, LatentGrid, ResidualStack

ResidualOverride = Union[ResidualStack, Callable[[ResidualStack], ResidualStack]]


@dataclass(frozen=True)
class AttentionSite:
    name: str
    shape: tuple[int, int]
    n_tokens: int


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    latent_shape: tuple[int, int, int]
    attention_resolutions: tuple[AttentionSite, ...]
    residual_layer_shapes: tuple[tuple[int, int, int], ...]
    supports_identity_token: bool = True

    def __post_init__(self):
        if any(s < 1 for s in self.latent_shape):
            raise ValueError(f"latent shape must be positive, got {self.latent_shape}")
        if len(self.residual_layer_shapes) < 1:
            raise ValueError("a backend needs at least one residual layer")
        for shp in self.residual_layer_shapes:
            if len(shp) != 3 or any(s < 1 for s in shp):
                raise ValueError(f"bad residual layer shape {shp}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "latent_shape": list(self.latent_shape),
            "attention_resolutions": [[a.name, list(a.shape), a.n_tokens] for a in self.attention_resolutions],
            "residual_layer_shapes": [list(s) for s in self.residual_layer_shapes],
            "supports_identity_token": self.supports_identity_token,
        }


@dataclass(frozen=True)
class SchedulerParams:
    total_steps: int
    step_coefficients: tuple[float, ...]
    sampler_name: str = "toy"

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if len(self.step_coefficients) != self.total_steps:
            raise ValueError("need one step coefficient per step")
        if not all(np.isfinite(self.step_coefficients)):
            raise ValueError("step coefficients must be finite")

    @classmethod
    def toy(cls, total_steps: int) -> "SchedulerParams":
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        return cls(total_steps, tuple([1.0 / total_steps] * total_steps), "toy")


@dataclass(eq=False)
class DenoiseOutput:
    predicted_noise: np.ndarray
    residuals: ResidualStack
    attention_maps: Optional[list[AttentionMap]] = None


class DenoiserBackend(Protocol):
    descriptor: BackendDescriptor

    def predict_noise(self, z: LatentGrid, t: int, cond: ConditioningSequence,
                      attention_interceptor: Optional[AttentionInterceptor] = None,
                      residual_override: Optional[ResidualOverride] = None,
                      return_attention: bool = False) -> DenoiseOutput: ...

    def scheduler_step(self, z: LatentGrid, noise: np.ndarray, t: int, params: SchedulerParams) -> LatentGrid: ...

    def decode(self, z0: LatentGrid) -> np.ndarray: ...


def scheduler_step(z: LatentGrid, noise: np.ndarray, t: int, params: SchedulerParams) -> LatentGrid:
    """Toy sampler: z_{t-1} = z_t - gamma_t * noise.

    ``t`` is the 0-based step index, the latent moves from timestep t+1 to t.
    """
    if not 0 <= t < params.total_steps:
        raise ValueError(f"step index {t} outside [0, {params.total_steps})")
    if z.timestep != t + 1:
        raise ValueError(f"step index {t} expects a latent at timestep {t + 1}, got {z.timestep}")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z.shape:
        raise ValueError(f"noise shape {noise.shape} does not match latent {z.shape}")
    if params.sampler_name != "toy":
        raise ValueError(f"unsupported sampler {params.sampler_name!r}")
    gamma = params.step_coefficients[t]
    return LatentGrid(z.values - gamma * noise, t, z.branch_tag)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ToySpec:
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    L: int = 3
    N: int = 16
    D: int = 8
    seed: int = 0
    upscale: int = 8
    name: str = "toy"

    def __post_init__(self):
        if len(self.latent_shape) != 3 or any(int(s) < 1 for s in self.latent_shape):
            raise ValueError(f"latent_shape must be three positive ints, got {self.latent_shape}")
        for key in ("L", "N", "D", "upscale"):
            if int(getattr(self, key)) < 1:
                raise ValueError(f"{key} must be positive")


class ToyBackend:
    """Linear denoiser with genuine cross-attention and skip taps.

    eps(z, t, C) = W_t z + U mean(C) + sum_a up(A_a V_a) + sum_l up(S_l r_l)

    where the A_a are softmax cross-attention maps at each declared
    resolution and r_l = down(P_l z) are the skip residuals. All weights
    are drawn once from ``default_rng(seed)``.
    """

    def __init__(self, spec: ToySpec = ToySpec()):
        self.spec = spec
        C, H, W = (int(s) for s in spec.latent_shape)
        rng = np.random.default_rng(spec.seed)
        self._dk = 8

        res_shapes = []
        for l in range(spec.L):
            f = 2**l
            res_shapes.append((C * min(f, 2), max(1, -(-H // f)), max(1, -(-W // f))))
        att_shapes = [(H, W)]
        if H > 1 or W > 1:
            att_shapes.append((max(1, -(-H // 2)), max(1, -(-W // 2))))
        self.descriptor = BackendDescriptor(
            name=f"{spec.name}:seed={spec.seed}",
            latent_shape=(C, H, W),
            attention_resolutions=tuple(
                AttentionSite(f"attn{i}", s, spec.N) for i, s in enumerate(att_shapes)
            ),
            residual_layer_shapes=tuple(res_shapes),
        )

        self._W = rng.standard_normal((C, C)) * (0.3 / np.sqrt(C))
        self._U = rng.standard_normal((C, spec.D)) * (0.3 / np.sqrt(spec.D))
        self._att = [
            (
                rng.standard_normal((C, self._dk)) / np.sqrt(C),
                rng.standard_normal((spec.D, self._dk)) / np.sqrt(spec.D),
                rng.standard_normal((spec.D, C)) * (0.5 / np.sqrt(spec.D)),
            )
            for _ in att_shapes
        ]
        self._P = [rng.standard_normal((c, C)) / np.sqrt(C) for c, _, _ in res_shapes]
        self._S = [rng.standard_normal((C, c)) * (0.2 / np.sqrt(c)) for c, _, _ in res_shapes]

    def __repr__(self):
        return f"ToyBackend({self.spec})"

    def _check_inputs(self, z: LatentGrid, cond: ConditioningSequence):
        if z.shape != self.descriptor.latent_shape:
            raise ValueError(f"latent shape {z.shape} does not match backend {self.descriptor.latent_shape}")
        if cond.tokens.shape != (self.spec.N, self.spec.D):
            raise ValueError(f"conditioning must be {self.spec.N} x {self.spec.D}, got {cond.tokens.shape}")

    def encode_residuals(self, z: LatentGrid, t: int) -> ResidualStack:
        x = z.values
        gain = 1.0 + 0.05 * np.sin(0.2 * t)
        layers = []
        for l, (P, shp) in enumerate(zip(self._P, self.descriptor.residual_layer_shapes)):
            feat = np.einsum("ij,jhw->ihw", P, x)
            layers.append((l, gain * area_resize(feat, shp[1:])))
        return ResidualStack(tuple(layers), Branch.SD)

    def _resolve_override(self, own: ResidualStack, override: Optional[ResidualOverride]) -> ResidualStack:
        if override is None:
            return own
        used = override(own) if callable(override) else override
        if used.shapes != own.shapes:
            raise ValueError(f"residual override shapes {used.shapes} do not match {own.shapes}")
        return used

    def predict_noise(self, z: LatentGrid, t: int, cond: ConditioningSequence,
                      attention_interceptor: Optional[AttentionInterceptor] = None,
                      residual_override: Optional[ResidualOverride] = None,
                      return_attention: bool = False) -> DenoiseOutput:
        self._check_inputs(z, cond)
        if t < 0:
            raise ValueError(f"negative step index {t}")
        x = z.values
        C, H, W = x.shape
        tokens = cond.tokens

        eps = 0.5 * x + (1.0 + 0.25 * np.cos(0.1 * t)) * np.einsum("ij,jhw->ihw", self._W, x)
        eps = eps + (self._U @ tokens.mean(axis=0))[:, None, None]

        maps = []
        for site, (Wq, Wk, Wv) in zip(self.descriptor.attention_resolutions, self._att):
            q = area_resize(x, site.shape).reshape(C, -1).T @ Wq
            k = tokens @ Wk
            A = AttentionMap(_softmax_rows(q @ k.T / np.sqrt(self._dk)), site.shape)
            if attention_interceptor is not None:
                A = attention_interceptor(A, AttentionMeta(site.name, t))
                if A.weights.shape != (site.shape[0] * site.shape[1], tokens.shape[0]):
                    raise ValueError(f"interceptor changed attention shape at {site.name}")
            maps.append(A)
            attended = (A.weights @ (tokens @ Wv)).T.reshape(C, *site.shape)
            eps = eps + area_resize(attended, (H, W))

        own = self.encode_residuals(z, t)
        skips = self._resolve_override(own, residual_override)
        for S, r in zip(self._S, skips.tensors):
            eps = eps + area_resize(np.einsum("ij,jhw->ihw", S, r), (H, W))

        return DenoiseOutput(eps, own, maps if return_attention else None)

    def scheduler_step(self, z: LatentGrid, noise: np.ndarray, t: int, params: SchedulerParams) -> LatentGrid:
        return scheduler_step(z, noise, t, params)

    def decode(self, z0: LatentGrid) -> np.ndarray:
        if z0.timestep != 0:
            raise ValueError(f"decode expects a latent at timestep 0, got {z0.timestep}")
        x = z0.values
        chans = x[[i % x.shape[0] for i in range(3)]]
        img = np.clip(0.5 + 0.5 * chans, 0.0, 1.0).transpose(1, 2, 0)
        f = self.spec.upscale
        return np.repeat(np.repeat(img, f, axis=0), f, axis=1)


def toy_backend(spec=None, **kwargs) -> ToyBackend:
    if spec is None:
        spec = ToySpec(**kwargs)
    elif isinstance(spec, dict):
        spec = ToySpec(**{**spec, **kwargs})
    return ToyBackend(spec)


@dataclass
class CallRecord:
    t: int
    identity_index: Optional[int]
    token_digest: str
    intercepted: bool
    residuals: ResidualStack
    skip_inputs: Optional[ResidualStack]
    attention_maps: list


class RecordingBackend:
    """Wraps a backend and logs every ``predict_noise`` call.

    Not thread-safe; use one instance per generation run.
    """

    def __init__(self, inner):
        self.inner = inner
        self.descriptor = inner.descriptor
        self.calls: list[CallRecord] = []

    def predict_noise(self, z, t, cond, attention_interceptor=None, residual_override=None, return_attention=False):
        captured = {}
        wrapped = residual_override
        if residual_override is not None:
            def wrapped(own):
                used = residual_override(own) if callable(residual_override) else residual_override
                captured["skip"] = used
                return used

        out = self.inner.predict_noise(z, t, cond, attention_interceptor, wrapped, return_attention=True)
        self.calls.append(CallRecord(
            t=t,
            identity_index=cond.identity_index,
            token_digest=hashlib.sha256(cond.tokens.tobytes()).hexdigest()[:16],
            intercepted=attention_interceptor is not None,
            residuals=out.residuals,
            skip_inputs=captured.get("skip"),
            attention_maps=out.attention_maps,
        ))
        if not return_attention:
            out = DenoiseOutput(out.predicted_noise, out.residuals, None)
        return out

    def scheduler_step(self, z, noise, t, params):
        return self.inner.scheduler_step(z, noise, t, params)

    def decode(self, z0):
        return self.inner.decode(z0)


CLASS_WORDS = ("man", "woman", "person", "boy", "girl")


@dataclass
class ToyConditioner:
    """Hash-based text encoder producing fixed-size conditioning sequences.

    Each word maps to a pseudo-random embedding seeded from its sha256, so
    the encoding is stable across processes. Identity embeddings are
    derived the same way from the reference descriptor and fused into the
    class-word token (e.g. "man") when the identity is active.
    """

    n_tokens: int = 16
    dim: int = 8
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def _vector(self, key: str) -> np.ndarray:
        if key not in self._cache:
            digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            self._cache[key] = rng.standard_normal(self.dim) / np.sqrt(self.dim)
        return self._cache[key]

    @staticmethod
    def words(prompt: str) -> list[str]:
        return re.findall(r"[a-z0-9']+", prompt.lower())

    def class_token_index(self, prompt: str) -> int:
        words = self.words(prompt)[: self.n_tokens - 1]
        for i, w in enumerate(words):
            if w in CLASS_WORDS:
                return i + 1
        return max(1, len(words))

    def encode(self, prompt: str) -> ConditioningSequence:
        words = self.words(prompt)[: self.n_tokens - 1]
        rows = [self._vector("<bos>")] + [self._vector("w:" + w) for w in words]
        rows += [self._vector("<pad>")] * (self.n_tokens - len(rows))
        return ConditioningSequence(np.stack(rows), None, prompt)

    def identity_embedding(self, reference: str) -> np.ndarray:
        return self._vector("id:" + reference)

    def encode_personalized(self, prompt: str, reference: str, active: bool) -> ConditioningSequence:
        base = self.encode(prompt)
        if not active:
            return base
        idx = self.class_token_index(prompt)
        tokens = base.tokens.copy()
        tokens[idx] = (tokens[idx] + self.identity_embedding(reference)) / np.sqrt(2.0)
        return ConditioningSequence(tokens, idx, prompt)

    def to_dict(self) -> dict:
        return {"n_tokens": self.n_tokens, "dim": self.dim, "seed": self.seed}


def sample_initial_latent(shape: Sequence[int], seed: int, total_steps: int) -> LatentGrid:
    rng = np.random.default_rng(seed)
    return LatentGrid(rng.standard_normal(tuple(shape)), total_steps, Branch.SD)


def _parse_kv(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise ValueError(f"bad backend option {part!r}; expected key=value")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def make_backend(spec: str):
    """Instantiate a backend from a spec string.

    ``toy[:seed=1,L=3,N=16,D=8,latent=4x8x8,upscale=8]`` builds a
    :class:`ToyBackend`; ``python:package.module:factory`` imports a
    factory returning any object that satisfies the backend contract.
    """
    if spec.startswith("python:"):
        import importlib

        target = spec[len("python:"):]
        mod_name, _, attr = target.rpartition(":")
        if not mod_name:
            raise ValueError(f"python backend spec needs module:factory, got {spec!r}")
        return getattr(importlib.import_module(mod_name), attr)()
    kind, _, opts = spec.partition(":")
    if kind != "toy":
        raise ValueError(f"unknown backend {kind!r}")
    kv = _parse_kv(opts)
    kwargs = {}
    for key, value in kv.items():
        if key == "latent":
            kwargs["latent_shape"] = tuple(int(v) for v in value.lower().split("x"))
        elif key in ("seed", "L", "N", "D", "upscale"):
            kwargs[key] = int(value)
        else:
            raise ValueError(f"unknown toy backend option {key!r}")
    return ToyBackend(ToySpec(**kwargs))
