"""Conditional noise predictor over latents.

A small U-Net with sinusoidal timestep embedding plus a learned pathology
label embedding added to it (label id 0 = NO_FINDING doubles as the
unconditional case and as the label-dropout target during training).
Self-attention runs at the coarsest resolution only. The output convolution
is small-initialized (not zero) so the conditioning paths carry gradient
from the first step.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, ContractError, ShapeError, TrainingError
from .labels import LABEL_NAMES, PathologyLabel, coerce_label, label_by_id
from .schedule import NoiseSchedule
from .util import log_event


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 3
    latent_size: int = 16
    base_width: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 2)
    emb_dim: int = 128
    labels: tuple[str, ...] = LABEL_NAMES
    T: int = 100
    beta_start: float = 0.0015
    beta_end: float = 0.0295
    schedule_fingerprint: str = ""

    def __post_init__(self):
        if self.base_width % 2:
            raise ConfigError("base_width must be even (sinusoidal embedding)")
        if self.latent_size % (2 ** (len(self.channel_mults) - 1)):
            raise ConfigError(f"latent size {self.latent_size} too small for {len(self.channel_mults)} resolutions")
        if len(self.labels) < 2 or self.labels[0] != "NO_FINDING":
            raise ConfigError("label set must start with NO_FINDING and contain at least one pathology")

    def schedule_params(self) -> dict:
        from .schedule import SIGMA_RULE

        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "sigma_rule": SIGMA_RULE}


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    angles = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = _gn(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, c_out)
        self.norm2 = _gn(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        # shift after the norm so group statistics cannot cancel the embedding
        h = self.conv2(F.silu(self.norm2(h) + self.emb_proj(emb)[:, :, None, None]))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = _gn(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.scale = channels ** -0.5

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k * self.scale, dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class CondUnet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        w, ed = config.base_width, config.emb_dim
        widths = [w * m for m in config.channel_mults]
        self.time_mlp = nn.Sequential(nn.Linear(w, ed), nn.SiLU(), nn.Linear(ed, ed))
        self.label_emb = nn.Embedding(len(config.labels), ed)
        self.in_conv = nn.Conv2d(config.latent_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, width in enumerate(widths):
            self.down_blocks.append(ResBlock(width, width, ed))
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(width, widths[i + 1], 3, stride=2, padding=1))

        mid = widths[-1]
        self.mid_block1 = ResBlock(mid, mid, ed)
        self.mid_attn = SelfAttention2d(mid)
        self.mid_block2 = ResBlock(mid, mid, ed)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths))):
            self.up_blocks.append(ResBlock(widths[i] * 2, widths[i], ed))
            if i > 0:
                self.upsamples.append(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1))

        self.out_norm = _gn(widths[0])
        self.out_conv = nn.Conv2d(widths[0], config.latent_channels, 3, padding=1)
        with torch.no_grad():  # small (not zero) init keeps conditioning gradients live
            self.out_conv.weight.mul_(1e-3)
            self.out_conv.bias.zero_()

    def forward(self, x: torch.Tensor, t: torch.Tensor, label_ids: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.config.base_width))
        emb = emb + self.label_emb(label_ids)
        h = self.in_conv(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        h = self.mid_block1(h, emb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, emb)
        for i, block in enumerate(self.up_blocks):
            skip = skips.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
            if i < len(self.upsamples):
                h = self.upsamples[i](h)
        return self.out_conv(F.silu(self.out_norm(h)))


class DenoiserCheckpoint:
    def __init__(self, config: DenoiserConfig, model: CondUnet, metadata: dict, fingerprint: str | None = None):
        self.config = config
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.metadata = dict(metadata)
        self.fingerprint = fingerprint

    def save(self, path) -> str:
        config = asdict(self.config)
        config["channel_mults"] = list(self.config.channel_mults)
        config["labels"] = list(self.config.labels)
        tensors = {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        self.fingerprint = save_checkpoint(path, "denoiser", config, self.metadata, tensors)
        return self.fingerprint

    @classmethod
    def load(cls, path) -> "DenoiserCheckpoint":
        kind, config_dict, metadata, tensors, fingerprint = load_checkpoint(path)
        if kind != "denoiser":
            raise CheckpointError(f"{path} holds a {kind!r} checkpoint, not a denoiser")
        config_dict["channel_mults"] = tuple(config_dict["channel_mults"])
        config_dict["labels"] = tuple(config_dict["labels"])
        config = DenoiserConfig(**config_dict)
        torch.manual_seed(0)
        model = CondUnet(config)
        try:
            model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()}, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from exc
        return cls(config, model, metadata, fingerprint)


def check_schedule_compat(model: DenoiserCheckpoint, sched: NoiseSchedule, strict: bool = True) -> None:
    """Compare the sampling schedule against the one the model was trained with."""
    if model.config.schedule_fingerprint and model.config.schedule_fingerprint != sched.fingerprint():
        message = ("sampling schedule does not match the denoiser's training schedule "
                   f"({sched.params()} vs fingerprint {model.config.schedule_fingerprint[:12]}...)")
        if strict:
            raise ContractError(message)
        warnings.warn(message, stacklevel=2)


def predict_noise(xt, t: int, label, model: DenoiserCheckpoint) -> torch.Tensor:
    """Predicted noise for a single latent (z, s, s) at step t under a label."""
    x = xt.float() if isinstance(xt, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(xt)).float()
    cfg = model.config
    expected = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    if tuple(x.shape) != expected:
        raise ShapeError(f"latent shape {tuple(x.shape)} does not match model config {expected}")
    if isinstance(t, bool) or not isinstance(t, (int, np.integer)) or not 1 <= int(t) <= cfg.T:
        raise IndexError(f"step index {t!r} out of range 1..{cfg.T}")
    lab = coerce_label(label, tuple(PathologyLabel(i, n) for i, n in enumerate(cfg.labels)))
    with torch.no_grad():
        out = model.model(x[None], torch.tensor([float(t)]), torch.tensor([lab.id]))
    return out[0]


def train_denoiser(latents, label_ids, sched: NoiseSchedule, config: DenoiserConfig | None = None, *,
                   epochs: int = 30, lr: float = 2e-4, batch_size: int = 8, seed: int = 0,
                   label_dropout: float = 0.1, val_fraction: float = 0.1,
                   dataset_fingerprint: str = "") -> DenoiserCheckpoint:
    """Standard epsilon-prediction MSE training over precomputed latents."""
    x_all = latents.float() if isinstance(latents, torch.Tensor) else torch.from_numpy(np.asarray(latents)).float()
    y_all = torch.as_tensor(np.asarray(label_ids), dtype=torch.long)
    if x_all.ndim != 4:
        raise ShapeError(f"latents must be (N, C, h, w), got {tuple(x_all.shape)}")
    n = len(x_all)
    if n == 0 or len(y_all) != n:
        raise ConfigError(f"latents/labels disagree: {n} vs {len(y_all)}")
    if config is None:
        config = DenoiserConfig(latent_channels=x_all.shape[1], latent_size=x_all.shape[2],
                                T=sched.T, beta_start=sched.beta_start, beta_end=sched.beta_end,
                                schedule_fingerprint=sched.fingerprint())
    if config.T != sched.T:
        raise ConfigError(f"config T={config.T} does not match schedule T={sched.T}")
    if config.schedule_fingerprint and config.schedule_fingerprint != sched.fingerprint():
        raise ConfigError("config schedule fingerprint does not match the supplied schedule")
    if tuple(x_all.shape[1:]) != (config.latent_channels, config.latent_size, config.latent_size):
        raise ShapeError(f"latent shape {tuple(x_all.shape[1:])} does not match config")
    if int(y_all.min()) < 0 or int(y_all.max()) >= len(config.labels):
        raise ConfigError(f"label ids must lie in 0..{len(config.labels) - 1}")
    if not bool((y_all == 0).any()) or not bool((y_all > 0).any()):
        raise ConfigError("training labels must cover NO_FINDING and at least one pathology")

    torch.manual_seed(seed)
    model = CondUnet(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)

    sqrt_ab = torch.from_numpy(np.sqrt(sched.alpha_bars)).float()
    sqrt_om = torch.from_numpy(np.sqrt(1.0 - sched.alpha_bars)).float()

    n_val = max(1, int(n * val_fraction))
    perm = torch.randperm(n, generator=g)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    # fixed validation draws keep held-out eps-MSE comparable across epochs
    vg = torch.Generator().manual_seed(seed + 1)
    val_t = torch.randint(1, sched.T + 1, (n_val,), generator=vg)
    val_eps = torch.randn(x_all[val_idx].shape, generator=vg)
    val_x0, val_lab = x_all[val_idx], y_all[val_idx]
    val_xt = sqrt_ab[val_t - 1][:, None, None, None] * val_x0 + sqrt_om[val_t - 1][:, None, None, None] * val_eps

    def noise(shape):
        return torch.randn(shape, generator=g)

    losses, val_curve = [], []
    for epoch in range(1, epochs + 1):
        model.train()
        order = train_idx[torch.randperm(len(train_idx), generator=g)]
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            x0, lab = x_all[idx], y_all[idx].clone()
            if label_dropout > 0:
                drop = torch.rand(len(idx), generator=g) < label_dropout
                lab[drop] = 0
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=g)
            eps = noise(x0.shape)
            xt = sqrt_ab[t - 1][:, None, None, None] * x0 + sqrt_om[t - 1][:, None, None, None] * eps
            loss = F.mse_loss(model(xt, t.float(), lab), eps)
            if not torch.isfinite(loss):
                raise TrainingError(f"denoiser loss became non-finite at epoch {epoch} (lr={lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * len(idx)
        for name, p in model.named_parameters():
            if not torch.isfinite(p).all():
                raise TrainingError(f"non-finite parameter {name} after epoch {epoch}")
        model.eval()
        with torch.no_grad():
            val_mse = 0.0
            for start in range(0, n_val, 64):
                sl = slice(start, start + 64)
                pred = model(val_xt[sl], val_t[sl].float(), val_lab[sl])
                val_mse += float(F.mse_loss(pred, val_eps[sl], reduction="sum"))
            val_mse /= val_eps.numel()
        losses.append(epoch_loss / len(order))
        val_curve.append(val_mse)
        log_event("denoiser_epoch", epoch=epoch, loss=round(losses[-1], 6), val_eps_mse=round(val_mse, 6))

    metadata = {
        "epochs": epochs, "lr": lr, "batch_size": batch_size, "seed": seed,
        "label_dropout": label_dropout, "n_train": int(len(train_idx)), "n_val": int(n_val),
        "loss_curve": [round(v, 8) for v in losses],
        "val_eps_mse_curve": [round(v, 8) for v in val_curve],
        "final_train_loss": losses[-1], "val_eps_mse": val_curve[-1],
        "dataset_fingerprint": dataset_fingerprint, "torch_version": torch.__version__,
    }
    return DenoiserCheckpoint(config, model, metadata)
