"""DDPM noise schedule with edit-friendly inversion and replay.

Timesteps run ``t = 1..T``; index 0 of every per-step array is the clean
end of the chain (``alpha_bar[0] == 1``). Latents are plain float64 arrays
of shape ``(V, C, H, W)`` here; ``eps_model(z, t)`` is any callable returning
the noise prediction for a fixed prompt.

Replay convention: for ``t >= 2`` a step is ``z_{t-1} = mu(z_t) + sigma_t *
eta_t``. The final step has ``sigma_1 = 0``; when replaying an inversion the
stored ``eta_1`` is the raw residual ``z_0 - mu(z_1)`` and is added with unit
weight, which keeps reconstruction exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .containers import read_container, write_container
from .errors import ConfigError, DataError, NumericalError

EpsModel = Callable[[np.ndarray, int], np.ndarray]

TRAJ_MAGIC = b"NOISTRAJ"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float = 0.0
    beta_end: float = 0.0

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def replay_scale(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.sigma[t])

    def posterior_mean(self, z_t, eps, t):
        """DDPM mean ``(z_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(1 - beta_t)``."""
        b = self.betas[t]
        return (z_t - b / np.sqrt(1.0 - self.alpha_bar[t]) * eps) / np.sqrt(1.0 - b)

    def denoised_estimate(self, z_t, eps, t):
        ab = self.alpha_bar[t]
        return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp over ``T`` steps with DDPM posterior standard deviations."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha_bar = np.cumprod(1.0 - betas)
    sigma = np.zeros(T + 1)
    for t in range(2, T + 1):
        sigma[t] = np.sqrt((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * betas[t])
    return NoiseSchedule(betas, alpha_bar, sigma, float(beta_start), float(beta_end))


def timestep_rngs(seed: int, T: int) -> list[np.random.Generator]:
    """One independent generator per timestep; index 0 is unused."""
    children = np.random.SeedSequence(seed).spawn(T)
    return [None] + [np.random.default_rng(c) for c in children]


def sample_forward_noise(shape, T: int, seed: int) -> np.ndarray:
    """``eps_t ~ N(0, I)`` drawn independently for ``t = 1..T``; row 0 is zeros."""
    rngs = timestep_rngs(seed, T)
    eps = np.zeros((T + 1,) + tuple(shape))
    for t in range(1, T + 1):
        eps[t] = rngs[t].standard_normal(shape)
    return eps


@dataclass(eq=False)
class NoiseTrajectory:
    latents: np.ndarray  # (T+1, V, C, H, W); latents[0] is z_0
    noise: np.ndarray  # (T+1, V, C, H, W); noise[t] is eta_t, noise[0] unused
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.latents.shape[0] - 1

    @property
    def z_T(self) -> np.ndarray:
        return self.latents[-1]

    def save(self, path) -> None:
        meta = dict(self.meta, seed=int(self.seed), T=self.T)
        write_container(path, TRAJ_MAGIC, meta, {"latents": self.latents, "noise": self.noise})

    @classmethod
    def load(cls, path) -> "NoiseTrajectory":
        meta, arrays = read_container(path, TRAJ_MAGIC)
        try:
            lat, noise = arrays["latents"], arrays["noise"]
        except KeyError as exc:
            raise DataError(f"{path}: trajectory file lacks {exc}") from exc
        if lat.shape != noise.shape:
            raise DataError(f"{path}: latents {lat.shape} and noise {noise.shape} disagree")
        return cls(lat, noise, int(meta.get("seed", 0)), meta)


def step_from_eps(z_t, eps, t, schedule: NoiseSchedule, noise=None, rng=None):
    """Ancestral step from a precomputed noise prediction."""
    mu = schedule.posterior_mean(z_t, eps, t)
    if noise is not None:
        return mu + schedule.replay_scale(t) * noise
    sigma = schedule.sigma[t]
    if sigma == 0.0:
        return mu
    rng = rng if rng is not None else np.random.default_rng()
    return mu + sigma * rng.standard_normal(np.shape(z_t))


def sample_step(z_t, t, eps_model: EpsModel, schedule: NoiseSchedule, noise=None, rng=None):
    """``z_{t-1} = mu_theta(z_t, t) + sigma_t * noise``; fresh noise when ``noise`` is None."""
    schedule.check_t(t)
    return step_from_eps(z_t, eps_model(z_t, t), t, schedule, noise, rng)


def forward_invert(z0, schedule: NoiseSchedule, seed: int, eps_model: EpsModel, **meta) -> NoiseTrajectory:
    """Edit-friendly DDPM inversion.

    Builds ``z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps_t`` with an
    independent ``eps_t`` per step, then solves each ancestral step for the
    noise map that lands exactly on ``z_{t-1}``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    T = schedule.T
    eps = sample_forward_noise(z0.shape, T, seed)
    ab = schedule.alpha_bar
    latents = np.empty((T + 1,) + z0.shape)
    latents[0] = z0
    for t in range(1, T + 1):
        latents[t] = np.sqrt(ab[t]) * z0 + np.sqrt(1.0 - ab[t]) * eps[t]

    noise = np.zeros_like(latents)
    for t in range(T, 0, -1):
        mu = schedule.posterior_mean(latents[t], eps_model(latents[t], t), t)
        resid = latents[t - 1] - mu
        if t == 1:
            noise[1] = resid
            continue
        sigma = schedule.sigma[t]
        if sigma == 0.0:
            if np.max(np.abs(resid)) > 1e-12 * max(1.0, np.max(np.abs(mu))):
                raise NumericalError(f"sigma_{t} = 0 but z_{t - 1} differs from the predicted mean")
            continue
        noise[t] = resid / sigma
    meta.setdefault("beta_start", schedule.beta_start)
    meta.setdefault("beta_end", schedule.beta_end)
    return NoiseTrajectory(latents, noise, seed, meta)


def replay(trajectory: NoiseTrajectory, eps_model: EpsModel, schedule: NoiseSchedule, start=None):
    """Run the ancestral chain from ``z_T`` injecting the stored noise maps."""
    if trajectory.T != schedule.T:
        raise DataError(f"trajectory has T={trajectory.T}, schedule has T={schedule.T}")
    z = trajectory.z_T if start is None else np.asarray(start, dtype=np.float64)
    for t in range(schedule.T, 0, -1):
        z = sample_step(z, t, eps_model, schedule, noise=trajectory.noise[t])
    return z
