"""Timestep-dependent spectral scaling of skip features.

Early in denoising (``t > tau``) the low band ``r < r_thresh`` is scaled by
``s_l``; late (``t <= tau``) the high band ``r >= r_thresh`` is scaled by
``s_h``. ``r`` is the centred frequency radius normalised so the Nyquist
corner sits at ``r = 1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AnnealParams:
    s_l: float = 1.2
    s_h: float = 1.1
    tau: float = 25.0
    r_thresh: float = 0.25
    layer_s_l: dict = field(default_factory=dict)  # per-skip overrides
    layer_s_h: dict = field(default_factory=dict)

    def __post_init__(self):
        scales = [self.s_l, self.s_h, *self.layer_s_l.values(), *self.layer_s_h.values()]
        if any(not np.isfinite(s) or s <= 0 for s in scales):
            raise ConfigError("annealing scales must be positive")
        if not 0.0 <= self.r_thresh <= 1.0:
            raise ConfigError(f"r_thresh must lie in [0, 1], got {self.r_thresh}")

    @classmethod
    def neutral(cls, tau: float = 0.0) -> "AnnealParams":
        return cls(1.0, 1.0, tau, 0.25)

    @property
    def is_neutral(self) -> bool:
        scales = [self.s_l, self.s_h, *self.layer_s_l.values(), *self.layer_s_h.values()]
        return all(s == 1.0 for s in scales)

    def for_layer(self, layer: str | None) -> "AnnealParams":
        if layer is None:
            return self
        return AnnealParams(self.layer_s_l.get(layer, self.s_l), self.layer_s_h.get(layer, self.s_h),
                            self.tau, self.r_thresh)

    def to_dict(self):
        return asdict(self)


def frequency_radius(shape) -> np.ndarray:
    """Normalised radius on the unshifted FFT grid; DC is 0, Nyquist corner is 1."""
    H, W = shape
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    # |fftfreq| peaks at 0.5 for even sizes and (n-1)/(2n) for odd sizes
    ny = max(np.abs(np.fft.fftfreq(H)).max(), 1e-300) if H > 1 else 1.0
    nx = max(np.abs(np.fft.fftfreq(W)).max(), 1e-300) if W > 1 else 1.0
    return np.sqrt((fy / ny) ** 2 + (fx / nx) ** 2) / np.sqrt(2.0)


def modulation_mask(shape, t: int, params: AnnealParams) -> np.ndarray:
    r = frequency_radius(shape)
    beta = np.ones(r.shape)
    if t > params.tau:
        beta[r < params.r_thresh] = params.s_l
    else:
        beta[r >= params.r_thresh] = params.s_h
    return beta


def modulate_skip(h, t: int, params: AnnealParams, layer: str | None = None) -> np.ndarray:
    """Scale the 2-D spectrum of every ``(view, channel)`` slice by ``beta``."""
    h = np.asarray(h, dtype=np.float64)
    p = params.for_layer(layer)
    beta = modulation_mask(h.shape[-2:], t, p)
    out = np.fft.ifft2(np.fft.fft2(h, axes=(-2, -1)) * beta, axes=(-2, -1))
    return out.real


def band_energy(h, shape_mask) -> float:
    """Spectral energy (unnormalised DFT) inside a boolean frequency mask."""
    F = np.fft.fft2(np.asarray(h, dtype=np.float64), axes=(-2, -1))
    return float(np.sum(np.abs(F) ** 2 * shape_mask))


def make_skip_hook(t: int, params: AnnealParams):
    """Skip hook for the denoiser; ``None`` when annealing is neutral."""
    if params.is_neutral:
        return None
    return lambda layer, h: modulate_skip(h, t, params, layer)
