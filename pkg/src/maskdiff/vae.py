"""Factor-4 convolutional VAEs.

Two instances of one architecture:
  * the latent-space autoencoder (image -> 3-channel latent -> image) used by
    the diffusion model, trained with reconstruction + tiny KL plus a weak
    structure prior that ties the latent channel-mean to the 4x-downsampled
    image (keeps the latent spatially aligned with pixel-space masks);
  * the anatomy translator (organ-mask channels -> proxy radiograph).

Encoding is deterministic (posterior mean) at inference; stochastic sampling
is used only inside VAE training. Checkpoints are immutable after load and
encode/decode are reentrant.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, ShapeError, TrainingError
from .masks import MaskSet, ORGAN_CLASSES
from .util import log_event

DOWN_FACTOR = 4


@dataclass(frozen=True)
class VaeConfig:
    kind: str  # "ldm" | "anatomy"
    image_size: int = 64
    in_channels: int = 1
    out_channels: int = 1
    latent_channels: int = 3
    base_width: int = 32
    down_factor: int = DOWN_FACTOR
    kl_weight: float = 1e-6
    structure_weight: float = 0.05

    def __post_init__(self):
        if self.kind not in ("ldm", "anatomy"):
            raise ConfigError(f"unknown VAE kind {self.kind!r}")
        if self.image_size % self.down_factor:
            raise ConfigError(f"image size {self.image_size} not divisible by factor {self.down_factor}")
        if self.down_factor != DOWN_FACTOR:
            raise ConfigError(f"only down factor {DOWN_FACTOR} is supported, got {self.down_factor}")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.down_factor


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class VaeModel(nn.Module):
    """Three-stage encoder (strides 2, 2, 1) and mirrored decoder."""

    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        c1, c2, z = config.base_width, config.base_width * 2, config.latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(config.in_channels, c1, 3, stride=2, padding=1), _gn(c1), nn.SiLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), _gn(c2), nn.SiLU(),
            nn.Conv2d(c2, c2, 3, stride=1, padding=1), _gn(c2), nn.SiLU(),
            nn.Conv2d(c2, 2 * z, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(z, c2, 3, padding=1), _gn(c2), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c2, c1, 3, padding=1), _gn(c1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c1, c1, 3, padding=1), _gn(c1), nn.SiLU(),
            nn.Conv2d(c1, config.out_channels, 3, padding=1),
        )

    def encode_dist(self, x: torch.Tensor):
        mu, logvar = torch.chunk(self.encoder(x), 2, dim=1)
        return mu, torch.clamp(logvar, -30.0, 20.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.decoder(z))

    def forward(self, x: torch.Tensor):
        mu, logvar = self.encode_dist(x)
        z = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)
        return self.decode(z), mu, logvar


class VaeCheckpoint:
    """Loaded VAE: immutable weights + config + training metadata."""

    def __init__(self, config: VaeConfig, model: VaeModel, metadata: dict, fingerprint: str | None = None):
        self.config = config
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.metadata = dict(metadata)
        self.fingerprint = fingerprint

    def save(self, path) -> str:
        tensors = {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        self.fingerprint = save_checkpoint(path, f"vae_{self.config.kind}", asdict(self.config), self.metadata, tensors)
        return self.fingerprint

    @classmethod
    def load(cls, path) -> "VaeCheckpoint":
        kind, config_dict, metadata, tensors, fingerprint = load_checkpoint(path)
        if not kind.startswith("vae_"):
            raise CheckpointError(f"{path} holds a {kind!r} checkpoint, not a VAE")
        config = VaeConfig(**config_dict)
        torch.manual_seed(0)
        model = VaeModel(config)
        state = {k: torch.from_numpy(v) for k, v in tensors.items()}
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint {path} does not match config {config}: {exc}") from exc
        return cls(config, model, metadata, fingerprint)


def _to_tensor(x, name: str) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.float()
    return torch.from_numpy(np.ascontiguousarray(x)).float()


def encode(image, vae: VaeCheckpoint, sample: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
    """Image (C, H, W) -> latent (z, H/4, W/4); posterior mean unless ``sample``."""
    x = _to_tensor(image, "image")
    cfg = vae.config
    if x.shape != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"image shape {tuple(x.shape)} does not match VAE config "
                         f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
    with torch.no_grad():
        mu, logvar = vae.model.encode_dist(x[None])
        if sample:
            g = generator
            noise = torch.randn(mu.shape, generator=g, dtype=mu.dtype)
            mu = mu + torch.exp(0.5 * logvar) * noise
    return mu[0]


def decode(latent, vae: VaeCheckpoint) -> torch.Tensor:
    """Latent (z, H/4, W/4) -> image (C, H, W), clamped to [-1, 1]."""
    z = _to_tensor(latent, "latent")
    cfg = vae.config
    if z.shape != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
        raise ShapeError(f"latent shape {tuple(z.shape)} does not match VAE config "
                         f"({cfg.latent_channels}, {cfg.latent_size}, {cfg.latent_size})")
    with torch.no_grad():
        out = vae.model.decode(z[None])[0]
    return out.clamp(-1.0, 1.0)


def mask_channels(mask: MaskSet) -> np.ndarray:
    """Organ channels stacked (3, H, W) float32 in renderer class order."""
    return np.stack([mask.organ_channels[n] for n in ORGAN_CLASSES]).astype(np.float32)


def anatomy_to_proxy(mask: MaskSet, vae: VaeCheckpoint) -> torch.Tensor:
    """Translate an anatomy mask into the proxy radiograph D(E(m))."""
    if vae.config.kind != "anatomy":
        raise ConfigError(f"anatomy_to_proxy needs an anatomy VAE, got kind {vae.config.kind!r}")
    channels = mask_channels(mask)
    if channels.shape[0] != vae.config.in_channels:
        raise ConfigError(f"mask has {channels.shape[0]} organ channels, VAE expects {vae.config.in_channels}")
    return decode(encode(channels, vae), vae)


def _kl_term(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.sum(mu.pow(2) + logvar.exp() - 1.0 - logvar, dim=[1, 2, 3]).mean()


def _check_finite_params(model: nn.Module, epoch: int) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingError(f"non-finite parameter {name} after epoch {epoch}")


def _train_vae(inputs: np.ndarray, targets: np.ndarray, config: VaeConfig, *, epochs: int,
               lr: float, batch_size: int, seed: int, val_fraction: float = 0.1,
               min_samples: int = 500, dataset_fingerprint: str = "") -> VaeCheckpoint:
    n = len(inputs)
    if n == 0:
        raise ConfigError("training dataset is empty")
    if len(targets) != n:
        raise ConfigError(f"input/target pair count mismatch: {n} vs {len(targets)}")
    if n < min_samples:
        raise ConfigError(f"need at least {min_samples} training samples, got {n}")

    torch.manual_seed(seed)
    model = VaeModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)

    x_all = torch.from_numpy(np.ascontiguousarray(inputs)).float()
    y_all = torch.from_numpy(np.ascontiguousarray(targets)).float()
    n_val = max(1, int(n * val_fraction))
    perm = torch.randperm(n, generator=g)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    pool = F.avg_pool2d

    losses = []
    for epoch in range(1, epochs + 1):
        model.train()
        order = train_idx[torch.randperm(len(train_idx), generator=g)]
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            x, y = x_all[idx], y_all[idx]
            recon, mu, logvar = model(x)
            loss = F.mse_loss(recon, y) + config.kl_weight * _kl_term(mu, logvar)
            if config.structure_weight > 0:
                loss = loss + config.structure_weight * F.mse_loss(
                    mu.mean(dim=1, keepdim=True), pool(y, config.down_factor))
            if not torch.isfinite(loss):
                raise TrainingError(f"VAE loss became non-finite at epoch {epoch} (lr={lr}, batch={batch_size})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * len(idx)
        _check_finite_params(model, epoch)
        losses.append(epoch_loss / len(order))
        log_event("vae_epoch", kind=config.kind, epoch=epoch, loss=round(losses[-1], 6))

    model.eval()
    with torch.no_grad():
        xv, yv = x_all[val_idx], y_all[val_idx]
        mu, _ = model.encode_dist(xv)
        recon = model.decode(mu)
        val_mse = float(F.mse_loss(recon, yv))
        mu2, _ = model.encode_dist(recon) if config.in_channels == config.out_channels else (mu, None)
        latent_rt = float(F.mse_loss(mu2, mu))
        # per-image correlation between upsampled latent channel-mean and the target
        up = F.interpolate(mu.mean(dim=1, keepdim=True), scale_factor=config.down_factor, mode="nearest")
        flat_a = up.flatten(1)
        flat_b = yv.flatten(1)
        a = flat_a - flat_a.mean(dim=1, keepdim=True)
        b = flat_b - flat_b.mean(dim=1, keepdim=True)
        corr = float((a * b).sum(dim=1).div((a.norm(dim=1) * b.norm(dim=1)).clamp_min(1e-12)).mean())

    metadata = {
        "epochs": epochs, "lr": lr, "batch_size": batch_size, "seed": seed,
        "n_train": int(len(train_idx)), "n_val": int(n_val),
        "loss_curve": [round(v, 8) for v in losses],
        "final_train_loss": losses[-1],
        "val_recon_mse": val_mse,
        "recon_floor": 1.5 * val_mse,
        "latent_roundtrip_mse": latent_rt,
        "latent_floor": max(1.5 * latent_rt, 1e-4),
        "structure_corr": corr,
        "dataset_fingerprint": dataset_fingerprint,
        "torch_version": torch.__version__,
    }
    return VaeCheckpoint(config, model, metadata)


def train_ldm_vae(images: np.ndarray, config: VaeConfig | None = None, *, epochs: int = 20,
                  lr: float = 2e-3, batch_size: int = 16, seed: int = 0,
                  dataset_fingerprint: str = "") -> VaeCheckpoint:
    """Train the latent-space autoencoder on phantom images (N, 1, H, W)."""
    images = np.asarray(images)
    if config is None:
        size = images.shape[-1] if images.ndim == 4 else 64
        config = VaeConfig(kind="ldm", image_size=size)
    if config.kind != "ldm":
        raise ConfigError("train_ldm_vae requires a config with kind='ldm'")
    return _train_vae(images, images, config, epochs=epochs, lr=lr, batch_size=batch_size,
                      seed=seed, dataset_fingerprint=dataset_fingerprint)


def train_anatomy_vae(masks: np.ndarray, images: np.ndarray, config: VaeConfig | None = None, *,
                      epochs: int = 20, lr: float = 2e-3, batch_size: int = 16, seed: int = 0,
                      dataset_fingerprint: str = "") -> VaeCheckpoint:
    """Train the mask->image translator on (N, 3, H, W) organ stacks and (N, 1, H, W) targets."""
    masks = np.asarray(masks)
    images = np.asarray(images)
    if config is None:
        size = images.shape[-1] if images.ndim == 4 else 64
        config = VaeConfig(kind="anatomy", image_size=size, in_channels=len(ORGAN_CLASSES),
                           structure_weight=0.0)
    if config.kind != "anatomy":
        raise ConfigError("train_anatomy_vae requires a config with kind='anatomy'")
    return _train_vae(masks, images, config, epochs=epochs, lr=lr, batch_size=batch_size,
                      seed=seed, dataset_fingerprint=dataset_fingerprint)
