"""Forward diffusion: noise schedules, noising, targets, synthetic data.

The data side is plain numpy; tensors enter the picture only at the model
boundary. The synthetic task is a class-conditional Gaussian mixture over
token grids whose per-token noise scale ramps across positions, so spatial
expert allocation has an actual signal to find.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .routing import ConfigError

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_diffuse",
    "make_target",
    "DiffusionBatch",
    "SyntheticTask",
]

_MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention coefficients alpha_bar[0..T].

    alpha_bar[0] = 1 and alpha_bar[T] is within a floor of 0; strictly
    decreasing in between. betas are the per-step noise rates implied by
    consecutive ratios, capped so the terminal value stays positive.
    """

    total_steps: int
    alpha_bar: np.ndarray  # (T + 1,)
    betas: np.ndarray  # (T,), betas[i] applies to the step t = i + 1

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.total_steps + 1,):
            raise ConfigError(f"alpha_bar must have length T+1, got {ab.shape}")
        if ab[0] != 1.0 or np.any(np.diff(ab) >= 0):
            raise ConfigError("alpha_bar must start at 1 and decrease strictly")


def build_schedule(total_steps: int, kind: str = "cosine") -> NoiseSchedule:
    if total_steps < 2:
        raise ConfigError(f"need at least 2 timesteps, got {total_steps}")
    t = np.arange(total_steps + 1, dtype=np.float64)
    if kind == "cosine":
        s = 0.008
        f = np.cos((t / total_steps + s) / (1.0 + s) * np.pi / 2.0) ** 2
        raw = f / f[0]
    elif kind == "linear":
        # DDPM's 1e-4..2e-2 range is calibrated for 1000 steps; rescale so
        # the terminal alpha_bar stays near zero for any T
        scale = 1000.0 / total_steps
        betas = np.linspace(1e-4 * scale, 2e-2 * scale, total_steps)
        raw = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; use 'cosine' or 'linear'")

    # cap the implied betas so alpha_bar never hits exactly zero, keeping
    # the reverse-process arithmetic finite
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, _MAX_BETA)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(total_steps=total_steps, alpha_bar=alpha_bar, betas=betas)


def _per_sample(coeffs: np.ndarray, t: np.ndarray, x_ndim: int) -> np.ndarray:
    """Index per-sample schedule values and shape them for broadcasting."""
    vals = coeffs[t]
    return vals.reshape(vals.shape + (1,) * (x_ndim - 1))


def forward_diffuse(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.total_steps):
        raise ConfigError(f"timesteps must lie in [0, {schedule.total_steps}]")
    ab = _per_sample(schedule.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def make_target(
    x0: np.ndarray,
    eps: np.ndarray,
    t: np.ndarray,
    schedule: NoiseSchedule,
    parameterization: str,
) -> np.ndarray:
    """Regression target: the noise, the clean sample, or the velocity
    v = sqrt(1 - alpha_bar) * eps - sqrt(alpha_bar) * x0."""
    if parameterization == "eps":
        return eps.copy()
    if parameterization == "x0":
        return x0.copy()
    if parameterization == "v":
        ab = _per_sample(schedule.alpha_bar, np.asarray(t), x0.ndim)
        return np.sqrt(1.0 - ab) * eps - np.sqrt(ab) * x0
    raise ConfigError(f"unknown parameterization {parameterization!r}; use eps, x0 or v")


@dataclass
class DiffusionBatch:
    x0: np.ndarray  # (B, L, D)
    t: np.ndarray  # (B,) integer timesteps
    eps: np.ndarray  # (B, L, D)
    x_t: np.ndarray  # (B, L, D)
    y: np.ndarray  # (B, L, D) regression target
    c: np.ndarray  # (B,) class labels


@dataclass
class SyntheticTask:
    """Class-conditional Gaussian mixture over token grids.

    Each class gets a fixed mean grid (L, D); samples add noise scaled by a
    per-token sigma profile that ramps quadratically from sigma_lo to
    sigma_hi across token positions. Deterministic given the seed.
    """

    num_classes: int
    tokens: int
    dim: int
    seed: int
    class_separation: float = 2.0
    sigma_lo: float = 0.2
    sigma_hi: float = 1.0
    means: np.ndarray = field(init=False)
    token_sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.means = rng.normal(0.0, 1.0, size=(self.num_classes, self.tokens, self.dim))
        self.means *= self.class_separation / np.sqrt(self.dim)
        ramp = np.linspace(0.0, 1.0, self.tokens) ** 2
        self.token_sigma = self.sigma_lo + (self.sigma_hi - self.sigma_lo) * ramp

    def sample_x0(self, rng: np.random.Generator, batch: int) -> tuple[np.ndarray, np.ndarray]:
        c = rng.integers(0, self.num_classes, size=batch)
        noise = rng.normal(size=(batch, self.tokens, self.dim))
        x0 = self.means[c] + self.token_sigma[None, :, None] * noise
        return x0, c

    def sample_batch(
        self,
        rng: np.random.Generator,
        batch: int,
        schedule: NoiseSchedule,
        parameterization: str = "eps",
        t: np.ndarray | None = None,
    ) -> DiffusionBatch:
        x0, c = self.sample_x0(rng, batch)
        if t is None:
            t = rng.integers(1, schedule.total_steps + 1, size=batch)
        else:
            t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,)).copy()
        eps = rng.normal(size=x0.shape)
        x_t = forward_diffuse(x0, t, eps, schedule)
        y = make_target(x0, eps, t, schedule, parameterization)
        return DiffusionBatch(x0=x0, t=t, eps=eps, x_t=x_t, y=y, c=c)
