"""Layered run configuration: flat JSON files with dotted keys plus overrides.

Precedence (low to high): built-in defaults, config file (--config), explicit
flag overrides. Unknown keys are rejected; values must match the default's
type. The resolved config is fingerprinted into checkpoints and manifests.
"""
from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .phantoms import PhantomSpec
from .schedule import NoiseSchedule, make_linear_schedule
from .util import fingerprint_obj

DEFAULTS: dict = {
    "seed": 0,
    "image.size": 64,
    "image.latent_channels": 3,
    "image.down_factor": 4,
    "schedule.T": 100,
    "schedule.beta_start": 0.0015,
    "schedule.beta_end": 0.0295,
    "phantom.count": 2000,
    "phantom.noise_sigma": 0.02,
    "generate.s": 50,
    "train.ldm_vae.epochs": 12,
    "train.ldm_vae.lr": 2e-3,
    "train.ldm_vae.batch": 16,
    "train.ldm_vae.base_width": 32,
    "train.ldm_vae.kl_weight": 1e-6,
    "train.ldm_vae.structure_weight": 0.05,
    "train.anatomy_vae.epochs": 14,
    "train.anatomy_vae.lr": 2e-3,
    "train.anatomy_vae.batch": 16,
    "train.anatomy_vae.base_width": 32,
    "train.anatomy_vae.kl_weight": 1e-6,
    "train.denoiser.epochs": 36,
    "train.denoiser.lr": 2e-4,
    "train.denoiser.batch": 8,
    "train.denoiser.base_width": 64,
    "train.denoiser.emb_dim": 128,
    "train.denoiser.label_dropout": 0.1,
    "train.classifier.epochs": 12,
    "train.classifier.lr": 1e-3,
    "train.classifier.batch": 32,
    "train.classifier.base_width": 16,
    "train.classifier.feature_dim": 64,
    "eval.suite_size": 200,
    "eval.msssim_levels": 3,
    "eval.monotonicity_s": [0, 10, 25, 50],
    "eval.blur_sigma": 2.5,
    "eval.box_sweep_positions": 4,
}


def _check_value(key: str, value, default) -> None:
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")


class RunConfig:
    """Immutable resolved configuration (treat instances as read-only)."""

    def __init__(self, values: dict | None = None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            _check_value(key, value, DEFAULTS[key])
            merged[key] = value
        self._values = merged

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        values: dict = {}
        if path is not None:
            try:
                file_values = json.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(file_values, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")
            values.update(file_values)
        values.update(overrides or {})
        return cls(values)

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = {k: v for k, v in self._values.items() if v != DEFAULTS[k]}
        merged.update(overrides)
        return RunConfig(merged)

    def to_dict(self) -> dict:
        return dict(self._values)

    def fingerprint(self) -> str:
        return fingerprint_obj(self._values)

    # concrete object builders -------------------------------------------------

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self["schedule.T"], self["schedule.beta_start"],
                                    self["schedule.beta_end"])

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(size=self["image.size"], noise_sigma=self["phantom.noise_sigma"])
