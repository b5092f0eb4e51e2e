"""Two-stage dual-branch generation.

Stage 1 runs the SD branch alone, decodes and segments the head. Stage 2
runs SD and PFD in lockstep from the same initial latent; at every step the
head mask drives the attention constraint on PFD, the residual merge into
the PFD decoder, and the latent merge whose result feeds both branches.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .attention import CACInterceptor, ConditioningSequence, compose_interceptors
from .backend import (
    SchedulerParams,
    ToyConditioner,
    make_backend,
    sample_initial_latent,
)
from .filters import (
    FilterMode,
    KernelSchedule,
    build_kernel,
    eval_schedule,
    kernel_size_from_mask,
)
from .masks import HeadMask, MaskPyramid, MaskSource, mask_area, union
from .merge import Branch, LatentGrid, ResidualStack, latent_merge, residual_merge

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
INJECTION_CONVENTION = (
    "injection_step counts completed denoising steps from the start; "
    "the identity token is active at step index s iff s >= injection_step"
)


class NoHeadFoundError(RuntimeError):
    def __init__(self, image: np.ndarray, message: str = "segmentor found no head region"):
        super().__init__(message)
        self.image = image


class PipelineError(RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None, manifest: Optional[dict] = None):
        super().__init__(message)
        self.step = step
        self.manifest = manifest


def array_checksum(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class MergeConfig:
    enable_cac: bool = True
    enable_latent_merge: bool = True
    enable_residual_merge: bool = True
    filter_mode: FilterMode = FilterMode.LOW_HIGH
    kernel_schedule: Optional[KernelSchedule] = None
    injection_step: int = 0
    seed: int = 0
    total_steps: int = 50
    residual_layers: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.injection_step <= self.total_steps:
            raise ValueError(f"injection_step must lie in [0, {self.total_steps}], got {self.injection_step}")
        object.__setattr__(self, "filter_mode", FilterMode.parse(self.filter_mode))
        sched = self.kernel_schedule or KernelSchedule(2.5, 0.5, self.total_steps)
        if sched.total_steps != self.total_steps:
            sched = sched.with_steps(self.total_steps)
        object.__setattr__(self, "kernel_schedule", sched)
        if self.residual_layers is not None:
            object.__setattr__(self, "residual_layers", tuple(int(i) for i in self.residual_layers))

    @property
    def toggles(self) -> tuple[bool, bool, bool]:
        return (self.enable_cac, self.enable_latent_merge, self.enable_residual_merge)

    def toggle_label(self) -> str:
        on = [n for n, f in zip(("CAC", "LM", "RM"), self.toggles) if f]
        return "+".join(on) if on else "none"

    def to_dict(self) -> dict:
        return {
            "enable_cac": self.enable_cac,
            "enable_latent_merge": self.enable_latent_merge,
            "enable_residual_merge": self.enable_residual_merge,
            "filter_mode": self.filter_mode.value,
            "kernel_schedule": self.kernel_schedule.to_dict(),
            "injection_step": self.injection_step,
            "seed": self.seed,
            "total_steps": self.total_steps,
            "residual_layers": list(self.residual_layers) if self.residual_layers is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MergeConfig":
        d = dict(d)
        if isinstance(d.get("kernel_schedule"), dict):
            d["kernel_schedule"] = KernelSchedule(**d["kernel_schedule"])
        if d.get("residual_layers") is not None:
            d["residual_layers"] = tuple(d["residual_layers"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass(frozen=True, eq=False)
class IdentityConditioning:
    """PFD conditioning before and after the identity token activates."""

    text_only: ConditioningSequence
    with_identity: ConditioningSequence

    @classmethod
    def coerce(cls, cond) -> "IdentityConditioning":
        if isinstance(cond, cls):
            return cond
        text = ConditioningSequence(cond.tokens, None, cond.descriptor)
        return cls(text, cond)

    def at_step(self, step: int, injection_step: int) -> ConditioningSequence:
        return self.with_identity if step >= injection_step else self.text_only


Segmentor = Callable[[np.ndarray], Optional[HeadMask]]


@dataclass
class ThresholdSegmentor:
    """Stand-in segmentor: marks the brightest ``fraction`` of pixels in one channel."""

    fraction: float = 0.15
    channel: int = 0

    def __call__(self, image: np.ndarray) -> Optional[HeadMask]:
        plane = np.asarray(image)[..., self.channel]
        if plane.max() <= plane.min():
            return None
        cut = np.quantile(plane, 1.0 - self.fraction)
        m = (plane >= cut).astype(np.float64)
        if not m.any():
            return None
        return HeadMask(m, MaskSource.SEGMENTOR)


@dataclass
class FixedMaskSegmentor:
    mask: Optional[HeadMask]

    def __call__(self, image: np.ndarray) -> Optional[HeadMask]:
        return self.mask


@dataclass(eq=False)
class StepTrace:
    step: int
    t: int
    alpha: float
    kernel_size: int
    identity_active: bool
    z_sd_in: LatentGrid
    z_pfd_in: LatentGrid
    eps_sd: np.ndarray
    eps_pfd: np.ndarray
    r_sd: ResidualStack
    r_pfd: ResidualStack
    r_merged: Optional[ResidualStack]
    z_sd_out: LatentGrid
    z_pfd_out: LatentGrid
    z_merged: Optional[LatentGrid]


@dataclass(eq=False)
class GenerationResult:
    image: np.ndarray
    final_latent: LatentGrid
    manifest: dict
    stage1_image: Optional[np.ndarray] = None
    head_mask: Optional[HeadMask] = None

    @property
    def checksum(self) -> str:
        return array_checksum(image_to_uint8(self.image))


def rollout(backend, cond_for_step: Union[ConditioningSequence, Callable[[int], ConditioningSequence]],
            z_T: LatentGrid, params: SchedulerParams) -> LatentGrid:
    """Run one branch alone for all steps, no hooks."""
    T = params.total_steps
    if z_T.timestep != T:
        raise ValueError(f"initial latent must be at timestep {T}, got {z_T.timestep}")
    get = cond_for_step if callable(cond_for_step) else (lambda s: cond_for_step)
    z = z_T
    for s in range(T):
        t = T - 1 - s
        out = backend.predict_noise(z, t, get(s))
        z = backend.scheduler_step(z, out.predicted_noise, t, params)
    return z


def stage1_layout(sd_backend, prompt_cond: ConditioningSequence, z_T: LatentGrid, params: SchedulerParams,
                  segmentor: Segmentor, fallback_mask: Optional[HeadMask] = None) -> tuple[np.ndarray, HeadMask]:
    z0 = rollout(sd_backend, prompt_cond, z_T, params)
    image = sd_backend.decode(z0)
    mask = segmentor(image)
    if mask is None:
        if fallback_mask is None:
            raise NoHeadFoundError(image)
        log.info("segmentor found no head; using the user-supplied mask")
        mask = fallback_mask
    elif mask.shape != image.shape[:2]:
        raise ValueError(f"segmentor returned mask {mask.shape} for image {image.shape[:2]}")
    return image, mask


def _step_record(step, t, alpha, kernel, active, cac_applied) -> dict:
    return {
        "step": step,
        "t": t,
        "alpha": alpha,
        "kernel_size": kernel.size,
        "sigma": kernel.sigma,
        "identity_active": active,
        "cac_applied": cac_applied,
    }


def stage2_fused_generate(sd_backend, pfd_backend, cond_sd: ConditioningSequence, cond_pfd,
                          head_mask: HeadMask, z_T: LatentGrid, config: MergeConfig, params: SchedulerParams,
                          subject_masks: Optional[Sequence[tuple[int, HeadMask]]] = None,
                          on_step: Optional[Callable[[StepTrace], None]] = None) -> GenerationResult:
    """Lockstep SD/PFD denoising with the three fusion mechanisms.

    ``subject_masks`` optionally lists (identity token index, mask) pairs
    for several subjects; each gets its own attention constraint and the
    merges use the union of the masks.
    """
    T = params.total_steps
    if config.total_steps != T:
        raise ValueError(f"config has {config.total_steps} steps but scheduler has {T}")
    if z_T.timestep != T:
        raise ValueError(f"initial latent must be at timestep {T}, got {z_T.timestep}")
    if sd_backend.descriptor.latent_shape != pfd_backend.descriptor.latent_shape:
        raise ValueError("SD and PFD backends disagree on latent shape")
    cond_pfd = IdentityConditioning.coerce(cond_pfd)

    if subject_masks:
        head_mask = union([m for _, m in subject_masks])
        pyramids = [(idx, MaskPyramid(m)) for idx, m in subject_masks]
    else:
        pyramids = None
    pyramid = MaskPyramid(head_mask)
    latent_mask = pyramid.level(z_T.shape[1:])
    area = mask_area(latent_mask)

    def interceptor_for(cond: ConditioningSequence):
        if pyramids is not None:
            return compose_interceptors(*(CACInterceptor(p, idx) for idx, p in pyramids))
        return CACInterceptor(pyramid, cond.identity_index)

    interceptors = {}
    steps = []
    z_sd = z_T.retag(Branch.SD)
    z_pfd = z_T.retag(Branch.PFD)
    s = -1
    try:
        for s in range(T):
            t = T - 1 - s
            active = s >= config.injection_step
            c_pfd = cond_pfd.at_step(s, config.injection_step)
            alpha = eval_schedule(config.kernel_schedule, s)
            kernel = build_kernel(kernel_size_from_mask(area, alpha))

            out_sd = sd_backend.predict_noise(z_sd, t, cond_sd)

            interceptor = None
            cac_applied = config.enable_cac and active and (c_pfd.identity_index is not None or pyramids is not None)
            if cac_applied:
                key = id(c_pfd)
                if key not in interceptors:
                    interceptors[key] = interceptor_for(c_pfd)
                interceptor = interceptors[key]

            merged_box = {}
            override = None
            if config.enable_residual_merge:
                def override(own: ResidualStack, _r_sd=out_sd.residuals, _k=kernel) -> ResidualStack:
                    merged = residual_merge(own, _r_sd, pyramid, _k, config.filter_mode, config.residual_layers)
                    merged_box["r"] = merged
                    return merged

            out_pfd = pfd_backend.predict_noise(z_pfd, t, c_pfd, interceptor, override)

            z_sd_next = sd_backend.scheduler_step(z_sd, out_sd.predicted_noise, t, params)
            z_pfd_next = pfd_backend.scheduler_step(z_pfd, out_pfd.predicted_noise, t, params)
            z_merged = None
            if config.enable_latent_merge:
                z_merged = latent_merge(z_pfd_next, z_sd_next, latent_mask)
                z_sd_new, z_pfd_new = z_merged, z_merged
            else:
                z_sd_new, z_pfd_new = z_sd_next, z_pfd_next

            steps.append(_step_record(s, t, alpha, kernel, active, bool(cac_applied)))
            if on_step is not None:
                on_step(StepTrace(
                    step=s, t=t, alpha=alpha, kernel_size=kernel.size, identity_active=active,
                    z_sd_in=z_sd, z_pfd_in=z_pfd, eps_sd=out_sd.predicted_noise, eps_pfd=out_pfd.predicted_noise,
                    r_sd=out_sd.residuals, r_pfd=out_pfd.residuals, r_merged=merged_box.get("r"),
                    z_sd_out=z_sd_next, z_pfd_out=z_pfd_next, z_merged=z_merged,
                ))
            z_sd, z_pfd = z_sd_new, z_pfd_new

        final = z_pfd
        image = pfd_backend.decode(final)
    except Exception as exc:
        manifest = {"config": config.to_dict(), "steps": steps, "failed_step": s, "error": repr(exc)}
        raise PipelineError(f"stage 2 failed at step {s}: {exc}", step=s, manifest=manifest) from exc

    manifest = {
        "config": config.to_dict(),
        "steps": steps,
        "checksums": {
            "stage2_z_T": array_checksum(z_T.values),
            "final_latent": array_checksum(final.values),
            "image": array_checksum(image_to_uint8(image)),
        },
    }
    return GenerationResult(image=image, final_latent=final, manifest=manifest, head_mask=head_mask)


@dataclass
class BackendPair:
    """The two branch backends plus the conditioning encoder shared by both."""

    sd: object
    pfd: object
    conditioner: ToyConditioner
    sd_spec: str = "toy:seed=1"
    pfd_spec: str = "toy:seed=2"

    @classmethod
    def from_specs(cls, sd_spec: str = "toy:seed=1", pfd_spec: str = "toy:seed=2") -> "BackendPair":
        sd, pfd = make_backend(sd_spec), make_backend(pfd_spec)
        n_tokens = sd.descriptor.attention_resolutions[0].n_tokens
        dim = getattr(getattr(sd, "spec", None), "D", 8)
        return cls(sd, pfd, ToyConditioner(n_tokens=n_tokens, dim=dim), sd_spec, pfd_spec)

    def scheduler_params(self, total_steps: int) -> SchedulerParams:
        return SchedulerParams.toy(total_steps)


def _mask_provenance(mask: HeadMask, fallback_used: bool, extra: Optional[dict] = None) -> dict:
    d = {
        "source": mask.source.value,
        "fallback_used": fallback_used,
        "shape": list(mask.shape),
        "area": mask_area(mask),
        "checksum": array_checksum(mask.values),
    }
    if extra:
        d.update(extra)
    return d


def generate(reference_descriptor: str, prompt: str, config: MergeConfig, backends: BackendPair,
             segmentor: Optional[Segmentor] = None, fallback_mask: Optional[HeadMask] = None,
             mask_info: Optional[dict] = None, on_step=None) -> GenerationResult:
    """Full two-stage run. With ``segmentor=None`` the ``fallback_mask`` is used directly."""
    params = backends.scheduler_params(config.total_steps)
    z_T = sample_initial_latent(backends.sd.descriptor.latent_shape, config.seed, config.total_steps)
    cond_sd = backends.conditioner.encode(prompt)

    seg = segmentor if segmentor is not None else FixedMaskSegmentor(None)
    if segmentor is None and fallback_mask is None:
        raise ValueError("need a segmentor or a user-supplied mask")
    image_sd, mask = stage1_layout(backends.sd, cond_sd, z_T, params, seg, fallback_mask)
    fallback_used = mask is fallback_mask

    cond_pfd = IdentityConditioning(
        backends.conditioner.encode(prompt),
        backends.conditioner.encode_personalized(prompt, reference_descriptor, True),
    )
    result = stage2_fused_generate(backends.sd, backends.pfd, cond_sd, cond_pfd, mask, z_T, config, params,
                                   on_step=on_step)
    stage2 = result.manifest
    manifest = {
        "schema": SCHEMA_VERSION,
        "config": config.to_dict(),
        "prompt": prompt,
        "subject": reference_descriptor,
        "backends": {
            "sd": {"spec": backends.sd_spec, "descriptor": backends.sd.descriptor.to_dict()},
            "pfd": {"spec": backends.pfd_spec, "descriptor": backends.pfd.descriptor.to_dict()},
            "conditioner": backends.conditioner.to_dict(),
        },
        "mask_provenance": _mask_provenance(mask, fallback_used, mask_info),
        "injection_convention": INJECTION_CONVENTION,
        "steps": stage2["steps"],
        "outputs": {},
        "checksums": {
            "stage1_z_T": array_checksum(z_T.values),
            "stage1_image": array_checksum(image_to_uint8(image_sd)),
            **stage2["checksums"],
        },
    }
    return GenerationResult(result.image, result.final_latent, manifest, image_sd, mask)


# ---------------------------------------------------------------- ablations

TOGGLE_GRID = (
    ("full", (True, True, True)),
    ("minus-LM", (True, False, True)),
    ("minus-RM", (True, True, False)),
    ("minus-CAC", (False, True, True)),
    ("baseline", (False, False, False)),
)


@dataclass
class SweepAxes:
    toggles: Optional[Sequence[tuple[str, tuple[bool, bool, bool]]]] = None
    filter_modes: Optional[Sequence[FilterMode]] = None
    alphas: Optional[Sequence[KernelSchedule]] = None
    injection_steps: Optional[Sequence[int]] = None

    def is_empty(self) -> bool:
        return not any((self.toggles, self.filter_modes, self.alphas, self.injection_steps))


@dataclass(eq=False)
class SweepRow:
    config: MergeConfig
    result: Optional[GenerationResult]
    summary: dict
    error: Optional[str] = None


def sweep_configs(base: MergeConfig, axes: SweepAxes) -> list[tuple[str, MergeConfig]]:
    if axes.is_empty():
        raise ValueError("ablation sweep needs at least one non-empty axis")
    toggles = axes.toggles or [(None, base.toggles)]
    modes = axes.filter_modes or [base.filter_mode]
    alphas = axes.alphas or [base.kernel_schedule]
    injects = axes.injection_steps or [base.injection_step]
    cells = []
    for (tname, (cac, lm, rm)), mode, sched, inj in itertools.product(toggles, modes, alphas, injects):
        cfg = replace(base, enable_cac=cac, enable_latent_merge=lm, enable_residual_merge=rm,
                      filter_mode=FilterMode.parse(mode), kernel_schedule=sched.with_steps(base.total_steps),
                      injection_step=inj)
        cells.append((tname or cfg.toggle_label(), cfg))
    return cells


def summary_row(label: str, cfg: MergeConfig, result: Optional[GenerationResult], error: Optional[str]) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "label": label,
        "toggles": cfg.toggle_label(),
        "filter_mode": cfg.filter_mode.value,
        "alpha_schedule": cfg.kernel_schedule.label(),
        "inject_step": cfg.injection_step,
        "output_checksum": result.checksum if result is not None else "",
        "status": "ok" if error is None else "failed",
        "error": error or "",
    }


def ablation_sweep(base_config: MergeConfig, axes: SweepAxes, reference_descriptor: str, prompt: str,
                   backends: BackendPair, segmentor: Optional[Segmentor] = None,
                   fallback_mask: Optional[HeadMask] = None, jobs: int = 1,
                   run_cell: Optional[Callable] = None) -> list[SweepRow]:
    """Cartesian sweep in (toggles, filter mode, alpha, injection step) order.

    A failing cell is recorded with its error and the sweep continues.
    """
    cells = sweep_configs(base_config, axes)

    def run(cell):
        label, cfg = cell
        try:
            if run_cell is not None:
                res = run_cell(label, cfg)
            else:
                res = generate(reference_descriptor, prompt, cfg, backends, segmentor, fallback_mask)
            return SweepRow(cfg, res, summary_row(label, cfg, res, None))
        except Exception as exc:  # recorded per cell
            log.warning("sweep cell %s failed: %s", label, exc)
            return SweepRow(cfg, None, summary_row(label, cfg, None, repr(exc)), repr(exc))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, cells))
    return [run(c) for c in cells]
