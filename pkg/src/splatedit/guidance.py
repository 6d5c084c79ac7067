"""Geometry-regularised guidance applied to the blended latent.

The regulariser is evaluated on the decoded geometry of the denoised
estimate ``x0 = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)``. By default the
gradient treats ``eps`` as a constant (truncated guidance); with
``full_backprop`` the denoiser Jacobian term is included through a
reverse-mode vector-Jacobian product.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .codec import Codec, LatentTensor
from .denoiser import PromptEmbedding, ToyDenoiser
from .diffusion import NoiseSchedule
from .errors import ConfigError, DataError, NumericalError
from .masks import minmax


@dataclass(frozen=True)
class GeoGuidanceParams:
    lambda_o: float = 1.0
    lambda_sigma: float = 1.0
    gamma_o: float = 5.0
    gamma_sigma: float = 1.0
    scale: float = 0.1
    full_backprop: bool = False

    def __post_init__(self):
        for k in ("lambda_o", "lambda_sigma", "gamma_o", "gamma_sigma", "scale"):
            v = getattr(self, k)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"guidance parameter {k} must be a non-negative number, got {v}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RelevanceMask:
    values: np.ndarray  # (V, H, W) in [0, 1]
    distance: np.ndarray  # unnormalised per-cell L1 gap

    @property
    def shape(self):
        return self.values.shape


def relevance_from_eps(eps_src, eps_edit) -> RelevanceMask:
    D = np.abs(np.asarray(eps_edit) - np.asarray(eps_src)).sum(axis=1)
    return RelevanceMask(minmax(D), D)


def relevance_mask(z_t, t: int, p: PromptEmbedding, p_star: PromptEmbedding, denoiser: ToyDenoiser) -> RelevanceMask:
    if p.tokens == p_star.tokens and np.array_equal(p.embeddings, p_star.embeddings):
        zero = np.zeros((z_t.shape[0],) + z_t.shape[2:])
        return RelevanceMask(zero, zero.copy())
    return relevance_from_eps(denoiser.eps(z_t, t, p), denoiser.eps(z_t, t, p_star))


def geo_penalty(opacity, trace, R, params: GeoGuidanceParams):
    """Loss and its partials with respect to opacity and covariance trace."""
    R = R.values if isinstance(R, RelevanceMask) else np.asarray(R, dtype=np.float64)
    e_o = params.lambda_o * R * np.exp(-params.gamma_o * np.asarray(opacity))
    e_s = params.lambda_sigma * R * np.exp(-params.gamma_sigma * np.asarray(trace))
    return float(e_o.sum() + e_s.sum()), -params.gamma_o * e_o, -params.gamma_sigma * e_s


def x0_estimate(z_t, eps, t: int, schedule: NoiseSchedule):
    return schedule.denoised_estimate(np.asarray(z_t, dtype=np.float64), eps, t)


def geo_loss(z_t, eps, t: int, R, params: GeoGuidanceParams, codec: Codec, schedule: NoiseSchedule) -> float:
    x0 = LatentTensor(x0_estimate(z_t, eps, t, schedule), "estimate")
    o, tr = codec.decode_geometry(x0)
    return geo_penalty(o, tr, R, params)[0]


def geo_loss_grad(z_t, eps, t: int, R, params: GeoGuidanceParams, codec: Codec, schedule: NoiseSchedule,
                  denoiser: ToyDenoiser | None = None, prompt: PromptEmbedding | None = None):
    """``(L, dL/dz_t)``. With ``params.full_backprop`` the denoiser path is
    included and ``eps`` is recomputed from ``denoiser(z_t, prompt)``."""
    ab = schedule.alpha_bar[t]
    if params.full_backprop:
        if denoiser is None or prompt is None:
            raise ConfigError("full-backprop guidance needs the denoiser and prompt")
        eps = denoiser.eps(z_t, t, prompt)
    x0 = LatentTensor(x0_estimate(z_t, eps, t, schedule), "estimate")
    o, tr = codec.decode_geometry(x0)
    L, d_o, d_tr = geo_penalty(o, tr, R, params)
    g_x0 = codec.geometry_vjp(x0, d_o, d_tr)
    grad = g_x0 / np.sqrt(ab)
    if params.full_backprop:
        _, jt = denoiser.eps_vjp(z_t, t, prompt, g_x0)
        grad = grad - np.sqrt(1.0 - ab) / np.sqrt(ab) * jt
    return L, grad


def guided_step(z_hat, z_t, params: GeoGuidanceParams, grad_fn: Callable, mask=None):
    """``z_hat - s * M * grad L(z_t)``; returns ``(z, L)``. ``L`` is None when
    guidance is off."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if params.scale == 0.0:
        return z_hat, None
    L, grad = grad_fn(z_t)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != z_hat.shape:
        raise DataError(f"guidance gradient {grad.shape} does not match latent {z_hat.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite guidance gradient")
    if mask is not None:
        m = mask.values if hasattr(mask, "values") else np.asarray(mask)
        grad = grad * m[:, None]
    return z_hat - params.scale * grad, L
