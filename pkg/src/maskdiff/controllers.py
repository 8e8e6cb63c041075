"""Mask-guided sampling: the blend primitive, the anatomy-guided pass, the
pathology inpainting pass, and the two-stage pipeline that chains them.

One reverse loop serves both controllers; they differ only in the keep-mask
and in how many initial steps are guided:

  * anatomy pass: keep = latent anatomy union, guided for the first ``s``
    of T steps, reference = encoded proxy radiograph of the mask;
  * pathology pass: keep = complement of the latent pathology box, guided
    for all T steps, reference = encoded input image, denoiser conditioned
    on the pathology label throughout.

At each guided step the kept region is pinned to the forward-diffused
reference (fresh eps per step) before the denoiser runs. Full-strength
guidance (s = T) ends with an exact clean re-pin of the kept region (the
t = 0 blend of the reference procedure); partial guidance does not. The
final reverse step adds no noise (z = 0 at t = 1).

Every run draws all noise from one seeded generator in a fixed order, so a
(seed, inputs) pair reproduces bit-identically; the GenerationManifest records
everything needed to replay a run against fingerprint-verified inputs.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .denoiser import DenoiserCheckpoint, check_schedule_compat, predict_noise
from .errors import ConfigError, ShapeError
from .labels import NO_FINDING, PathologyLabel, coerce_label
from .masks import MaskSet, is_binary
from .schedule import NoiseSchedule, forward_diffuse, reverse_step
from .vae import VaeCheckpoint, anatomy_to_proxy, decode, encode


class ModelBundle(NamedTuple):
    """The three trained networks a generation run needs."""

    ldm_vae: VaeCheckpoint
    anatomy_vae: VaeCheckpoint
    denoiser: DenoiserCheckpoint


@dataclass
class GenerationManifest:
    """Everything needed to reproduce a run bit-for-bit given the same inputs."""

    stage: str
    seed: int
    s: int
    T: int
    label: str
    schedule: dict
    mask_fingerprints: dict
    checkpoint_fingerprints: dict
    image_size: int
    timing_ms: float = 0.0
    outputs: dict = field(default_factory=dict)  # fingerprints of files written from this run
    stages: list = field(default_factory=list)  # sub-manifests for composite runs

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationManifest":
        stages = [cls.from_dict(s) for s in d.get("stages", [])]
        kwargs = {k: v for k, v in d.items() if k != "stages"}
        return cls(stages=stages, **kwargs)

    @classmethod
    def load(cls, path) -> "GenerationManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _checkpoint_fingerprints(models: ModelBundle) -> dict:
    return {
        "ldm_vae": models.ldm_vae.fingerprint or "",
        "anatomy_vae": models.anatomy_vae.fingerprint or "",
        "denoiser": models.denoiser.fingerprint or "",
    }


def _as_keep_mask(keep_mask, latent_shape) -> torch.Tensor:
    mask = np.asarray(keep_mask)
    if not is_binary(mask):
        raise ConfigError("keep mask must be exactly {0,1}-valued")
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape != (1, *latent_shape[1:]) and mask.shape != tuple(latent_shape):
        raise ShapeError(f"keep mask shape {mask.shape} incompatible with latent shape {tuple(latent_shape)}")
    return torch.from_numpy(mask.astype(np.bool_))


def blend_masked(x_ref, prev: torch.Tensor, keep_mask, t: int, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Pin the kept region to the forward-diffused reference, keep the rest.

    output = forward_diffuse(x_ref, t, eps) where keep_mask == 1, else prev.
    Selection is exact (torch.where), kept and complement regions are
    bit-identical to their sources.
    """
    if tuple(x_ref.shape) != tuple(prev.shape):
        raise ShapeError(f"x_ref shape {tuple(x_ref.shape)} != prev shape {tuple(prev.shape)}")
    keep = _as_keep_mask(keep_mask, x_ref.shape)
    noised = forward_diffuse(x_ref, t, eps, sched)
    return torch.where(keep, noised, prev)


def _sample_guided(x_ref: torch.Tensor, keep_mask, label: PathologyLabel, s: int,
                   sched: NoiseSchedule, denoiser: DenoiserCheckpoint,
                   generator: torch.Generator, strict: bool = True, trace: list | None = None) -> torch.Tensor:
    """Reverse loop t = T..1 with mask-pinned guidance on the first ``s`` steps.

    Noise draw order per run: initial state; then per guided step eps; then z
    (t > 1 only). ``trace``, when given, records (t, eps, prev, blended) per
    guided step for contract tests.
    """
    T = sched.T
    if not 0 <= s <= T:
        raise ConfigError(f"guided step count s={s} out of range 0..{T}")
    check_schedule_compat(denoiser, sched, strict=strict)
    keep = _as_keep_mask(keep_mask, x_ref.shape)
    x_prev = torch.randn(x_ref.shape, generator=generator)
    for t in range(T, 0, -1):
        if t > T - s:
            eps = torch.randn(x_ref.shape, generator=generator)
            x_t = blend_masked(x_ref, x_prev, keep_mask, t, eps, sched)
            if trace is not None:
                trace.append((t, eps.clone(), x_prev.clone(), x_t.clone()))
        else:
            x_t = x_prev
        eps_hat = predict_noise(x_t, t, label, denoiser)
        z = torch.randn(x_ref.shape, generator=generator) if t > 1 else torch.zeros_like(x_ref)
        x_prev = reverse_step(x_t, t, eps_hat, z, sched)
    if s >= T:  # the t = 0 blend: re-pin the kept region to the clean reference
        x_prev = torch.where(keep, x_ref, x_prev)
    return x_prev


def generate_with_anatomy(mask: MaskSet, label, s: int, seed: int, models: ModelBundle,
                          sched: NoiseSchedule, strict: bool = True):
    """Anatomy-guided generation: proxy radiograph -> latent pinning for s steps.

    Returns (image (1, H, W), manifest).
    """
    t0 = time.perf_counter()
    label = coerce_label(label)
    if mask.size != models.ldm_vae.config.image_size:
        raise ShapeError(f"mask size {mask.size} != model image size {models.ldm_vae.config.image_size}")
    proxy = anatomy_to_proxy(mask, models.anatomy_vae)
    x_ref = encode(proxy, models.ldm_vae)
    g = torch.Generator().manual_seed(int(seed))
    latent = _sample_guided(x_ref, mask.latent_anatomy, label, s, sched, models.denoiser, g, strict=strict)
    image = decode(latent, models.ldm_vae)
    manifest = GenerationManifest(
        stage="anatomy", seed=int(seed), s=int(s), T=sched.T, label=label.name,
        schedule=sched.params(),
        mask_fingerprints={"mask_set": mask.fingerprint()},
        checkpoint_fingerprints=_checkpoint_fingerprints(models),
        image_size=mask.size,
        timing_ms=round((time.perf_counter() - t0) * 1e3, 3),
    )
    return image, manifest


def infuse_pathology(image, mask: MaskSet, label, seed: int, models: ModelBundle,
                     sched: NoiseSchedule, strict: bool = True):
    """Inpainting pass: pin everything outside the pathology box for all T steps.

    ``label`` may be NO_FINDING, which regenerates the box with healthy tissue
    (pathology removal). A non-empty box is required for any other label.
    """
    t0 = time.perf_counter()
    label = coerce_label(label)
    if mask.box is None and label != NO_FINDING:
        raise ConfigError(f"pathology {label.name} requires a non-empty pathology box")
    x = image.float() if isinstance(image, torch.Tensor) else torch.from_numpy(np.asarray(image)).float()
    x_ref = encode(x, models.ldm_vae)
    keep = 1 - mask.latent_pathology
    g = torch.Generator().manual_seed(int(seed))
    latent = _sample_guided(x_ref, keep, label, sched.T, sched, models.denoiser, g, strict=strict)
    out = decode(latent, models.ldm_vae)
    manifest = GenerationManifest(
        stage="pathology", seed=int(seed), s=sched.T, T=sched.T, label=label.name,
        schedule=sched.params(),
        mask_fingerprints={"mask_set": mask.fingerprint()},
        checkpoint_fingerprints=_checkpoint_fingerprints(models),
        image_size=mask.size,
        timing_ms=round((time.perf_counter() - t0) * 1e3, 3),
    )
    return out, manifest


def generate_two_stage(mask: MaskSet, label, seed: int, models: ModelBundle, sched: NoiseSchedule,
                       s: int = 50, strict: bool = True):
    """Full pipeline: unconditional anatomy pass, then pathology infusion.

    Stage seeds are derived from the run seed (seed for stage 1, seed + 1 for
    stage 2) so the composite is reproducible from one number.
    """
    t0 = time.perf_counter()
    label = coerce_label(label)
    stage1, man1 = generate_with_anatomy(mask, NO_FINDING, s, seed, models, sched, strict=strict)
    stage2, man2 = infuse_pathology(stage1, mask, label, int(seed) + 1, models, sched, strict=strict)
    manifest = GenerationManifest(
        stage="two_stage", seed=int(seed), s=int(s), T=sched.T, label=label.name,
        schedule=sched.params(),
        mask_fingerprints={"mask_set": mask.fingerprint()},
        checkpoint_fingerprints=_checkpoint_fingerprints(models),
        image_size=mask.size,
        timing_ms=round((time.perf_counter() - t0) * 1e3, 3),
        stages=[man1, man2],
    )
    return stage2, manifest
