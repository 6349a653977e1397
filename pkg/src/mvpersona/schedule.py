"""Variance-preserving cosine noise schedule and the deterministic DDIM rule.

alpha[t]^2 + sigma[t]^2 = 1 for all t; alpha[0] = 1 and sigma[0] = 0 so
t=0 is clean data. alpha_bar is floored so the terminal signal level stays
strictly positive and the x0 reconstruction in DDIM remains finite.
"""

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError

_COSINE_S = 0.008
_ALPHA_BAR_FLOOR = 1e-4


@dataclass
class NoiseSchedule:
    T: int = 1000
    alpha: torch.Tensor = field(init=False, repr=False)  # sqrt(alpha_bar), len T+1
    sigma: torch.Tensor = field(init=False, repr=False)  # sqrt(1 - alpha_bar)

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("schedule needs T >= 1")
        t = torch.arange(self.T + 1, dtype=torch.float64)
        f = torch.cos((t / self.T + _COSINE_S) / (1 + _COSINE_S) * math.pi / 2) ** 2
        alpha_bar = torch.clamp(f / f[0], min=_ALPHA_BAR_FLOOR)
        alpha_bar[0] = 1.0  # exact endpoint regardless of rounding
        self.alpha = torch.sqrt(alpha_bar)
        self.sigma = torch.sqrt(1.0 - alpha_bar)
        self.alpha[0] = 1.0
        self.sigma[0] = 0.0

    def check_t(self, t: int):
        if not 0 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [0, {self.T}]")


def add_noise(z0: torch.Tensor, t: int, eps: torch.Tensor,
              schedule: NoiseSchedule) -> torch.Tensor:
    """alpha_t * z0 + sigma_t * eps, exactly."""
    schedule.check_t(t)
    if z0.shape != eps.shape:
        raise ConfigError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    return schedule.alpha[t] * z0 + schedule.sigma[t] * eps


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
               schedule: NoiseSchedule) -> torch.Tensor:
    schedule.check_t(t)
    return (z_t - schedule.sigma[t] * eps_hat) / schedule.alpha[t]


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
              schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta=0) DDIM update: reconstruct x0, re-noise to t_prev."""
    schedule.check_t(t)
    schedule.check_t(t_prev)
    if not t_prev < t:
        raise ConfigError(f"ddim_step needs t_prev < t, got {t_prev} >= {t}")
    x0_hat = predict_x0(z_t, eps_hat, t, schedule)
    return schedule.alpha[t_prev] * x0_hat + schedule.sigma[t_prev] * eps_hat


def ddim_invert_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
                     t_next: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Inverse of ddim_step: carry z from t up to t_next > t."""
    schedule.check_t(t)
    schedule.check_t(t_next)
    if not t_next > t:
        raise ConfigError(f"ddim_invert_step needs t_next > t, got {t_next} <= {t}")
    x0_hat = predict_x0(z_t, eps_hat, t, schedule)
    return schedule.alpha[t_next] * x0_hat + schedule.sigma[t_next] * eps_hat


def ddim_timesteps(T: int, num_steps: int) -> list:
    """Descending uniform-stride timesteps ending above 0, e.g. T=1000,
    num_steps=50 -> [1000, 980, ..., 20]; the final update targets t=0."""
    if num_steps < 1:
        raise ConfigError("num_steps must be >= 1")
    if num_steps > T:
        raise ConfigError(f"num_steps {num_steps} exceeds T {T}")
    stride = T // num_steps
    return [stride * k for k in range(num_steps, 0, -1)]
