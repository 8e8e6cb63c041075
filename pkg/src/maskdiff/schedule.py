"""Closed-form diffusion mathematics.

Owns the linear beta schedule and the three pure tensor operations built on it:
forward noising, the ancestral reverse step, and direct x0 prediction. All
schedule tables are precomputed in float64; the tensor ops work elementwise on
numpy arrays or torch tensors alike and are deterministic functions of their
arguments.

Step indexing is 1-based: t runs 1..T and table entry [t-1] belongs to step t.
The reverse loop is run t = T..1 with the no-noise rule (z = 0) at t = 1; the
added reverse noise scale is sigma_t = sqrt(beta_t).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .util import fingerprint_obj

SIGMA_RULE = "sqrt_beta"


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha/alpha_bar/sigma tables for T diffusion steps.

    Safe to share across concurrent workers; all arrays are float64 and must
    not be mutated after construction.
    """

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def _check_t(self, t: int) -> int:
        if isinstance(t, bool) or not isinstance(t, (int, np.integer)):
            raise IndexError(f"step index must be an integer, got {t!r}")
        if not 1 <= t <= self.T:
            raise IndexError(f"step index {t} out of range 1..{self.T}")
        return int(t)

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check_t(t) - 1])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._check_t(t) - 1])

    def params(self) -> dict:
        """Serializable parameters, embedded in checkpoints and manifests."""
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "sigma_rule": SIGMA_RULE,
        }

    def fingerprint(self) -> str:
        return fingerprint_obj(self.params())


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build the linear beta schedule with T-1 equal increments, endpoints inclusive.

    For T = 1 the single beta equals beta_start.
    """
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    return NoiseSchedule(
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
    )


def schedule_from_params(params: dict) -> NoiseSchedule:
    """Rebuild a schedule from its serialized ``params()`` dict."""
    if params.get("sigma_rule", SIGMA_RULE) != SIGMA_RULE:
        raise ConfigError(f"unsupported sigma rule {params.get('sigma_rule')!r}")
    return make_linear_schedule(params["T"], params["beta_start"], params["beta_end"])


def _check_same_shape(name_a: str, a, name_b: str, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{name_a} shape {tuple(a.shape)} != {name_b} shape {tuple(b.shape)}")


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form noising: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    _check_same_shape("x0", x0, "eps", eps)
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def reverse_step(xt, t: int, eps_pred, z, sched: NoiseSchedule):
    """One ancestral reverse step.

    x_{t-1} = (xt - (1 - alpha_t) / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t)
              + sigma_t * z

    z must be all-zeros at t = 1 (no noise is added on the final step).
    """
    _check_same_shape("xt", xt, "eps_pred", eps_pred)
    _check_same_shape("xt", xt, "z", z)
    t = sched._check_t(t)
    if t == 1 and bool((z != 0).any()):
        raise ContractError("z must be all-zeros at t=1")
    alpha = sched.alpha(t)
    abar = sched.alpha_bar(t)
    coeff = (1.0 - alpha) / math.sqrt(1.0 - abar)
    mean = (xt - coeff * eps_pred) / math.sqrt(alpha)
    return mean + sched.sigma(t) * z


def predict_x0(xt, t: int, eps_pred, sched: NoiseSchedule):
    """Algebraic inversion of the forward process: (xt - sqrt(1-abar_t) * eps_pred) / sqrt(abar_t)."""
    _check_same_shape("xt", xt, "eps_pred", eps_pred)
    abar = sched.alpha_bar(t)
    return (xt - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)
