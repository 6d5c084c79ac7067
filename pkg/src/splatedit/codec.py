"""Latent codecs standing in for the Gaussian VAE.

Both codecs keep the spatial layout (one latent cell per Gaussian) and 12
latent channels. ``encode`` is a fixed per-cell channel mix ``Q``:
the identity for :class:`IdentityCodec`, a seeded orthogonal matrix for
:class:`OrthogonalCodec`. ``decode`` applies ``Q^T`` and then forces the
attribute invariants with hard clamps.

:meth:`Codec.decode_geometry` is the differentiable path used by geometry
guidance. It replaces the hard clamps on opacity and scale with a C1
"knee" that is exactly the identity away from the bounds, so on the valid
interior it agrees with :meth:`Codec.decode` to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .splat import NUM_CHANNELS, OPACITY, RGB, DEPTH, ROTATION, SCALE, CameraRig, SplatGrid

SCALE_FLOOR = 1e-4
KNEE_WIDTH = 0.01  # half-width of the quadratic transition at each clamp bound
_QUAT_RENORM_TOL = 1e-7


@dataclass(frozen=True, eq=False)
class LatentTensor:
    values: np.ndarray  # (V, C, H, W) float64
    provenance: str = "source"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 4:
            raise DataError(f"latent must be 4-D (V, C, H, W), got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise NumericalError("latent contains non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values, provenance=None) -> "LatentTensor":
        return LatentTensor(values, self.provenance if provenance is None else provenance)


# smooth clamp pieces -------------------------------------------------------


def knee(x, w=KNEE_WIDTH):
    """Smoothed ``max(x, 0)``: 0 below -w, x above +w, quadratic in between."""
    x = np.asarray(x, dtype=np.float64)
    mid = (x + w) ** 2 / (4 * w)
    return np.where(x <= -w, 0.0, np.where(x >= w, x, mid))


def knee_grad(x, w=KNEE_WIDTH):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= -w, 0.0, np.where(x >= w, 1.0, (x + w) / (2 * w)))


def smooth_unit_clip(x):
    """Smoothed clip to [0, 1]; equals x on [w, 1-w]. Value at 0 is w/4."""
    return knee(x) - knee(x - 1.0)


def smooth_unit_clip_grad(x):
    return knee_grad(x) - knee_grad(x - 1.0)


def smooth_positive(x):
    """Smoothed ``max(x, SCALE_FLOOR)``; equals x for x >= SCALE_FLOOR + w."""
    return SCALE_FLOOR + knee(x - SCALE_FLOOR)


def smooth_positive_grad(x):
    return knee_grad(x - SCALE_FLOOR)


# codecs --------------------------------------------------------------------


class Codec:
    kind = "base"

    def __init__(self, mix: np.ndarray, views=None, height=None, width=None, seed=None):
        self.mix = np.asarray(mix, dtype=np.float64)
        self.seed = seed
        self.views, self.height, self.width = views, height, width
        self.latent_channels = NUM_CHANNELS

    def _check_dims(self, shape, what):
        V, C, H, W = shape
        if C != NUM_CHANNELS:
            raise DataError(f"{what} has {C} channels, codec expects {NUM_CHANNELS}")
        for name, want, got in (("views", self.views, V), ("height", self.height, H), ("width", self.width, W)):
            if want is not None and want != got:
                raise DataError(f"{what} {name}={got} does not match codec config {name}={want}")

    def _mix(self, x):
        return np.einsum("ab,vbhw->vahw", self.mix, x)

    def _unmix(self, z):
        return np.einsum("ba,vbhw->vahw", self.mix, z)

    def encode(self, grid: SplatGrid) -> LatentTensor:
        self._check_dims(grid.attributes.shape, "grid")
        return LatentTensor(self._mix(grid.attributes.astype(np.float64)), "source")

    def raw_attributes(self, latent: LatentTensor) -> np.ndarray:
        """Unmixed channels before any clamping."""
        self._check_dims(latent.shape, "latent")
        return self._unmix(latent.values)

    def decode(self, latent: LatentTensor, rig: CameraRig) -> SplatGrid:
        a = self.raw_attributes(latent).copy()
        a[:, RGB] = np.clip(a[:, RGB], 0.0, 1.0)
        a[:, DEPTH] = np.maximum(a[:, DEPTH], 0.0)
        a[:, SCALE] = np.maximum(a[:, SCALE], SCALE_FLOOR)
        q = a[:, ROTATION]
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        identity = np.array([1.0, 0.0, 0.0, 0.0])[None, :, None, None]
        # leave already-unit quaternions alone so identity roundtrips stay bit exact
        renorm = np.abs(qn - 1.0) > _QUAT_RENORM_TOL
        q = np.where(renorm, q / np.where(qn > 0, qn, 1.0), q)
        a[:, ROTATION] = np.where(qn > 1e-12, q, identity)
        a[:, OPACITY] = np.clip(a[:, OPACITY], 0.0, 1.0)
        return SplatGrid(a, rig)

    def decode_geometry(self, latent: LatentTensor) -> tuple[np.ndarray, np.ndarray]:
        """Smooth ``(opacity, Tr(Sigma))`` per Gaussian, each ``(V, H, W)``."""
        a = self.raw_attributes(latent)
        opacity = smooth_unit_clip(a[:, OPACITY])
        trace = np.sum(smooth_positive(a[:, SCALE]) ** 2, axis=1)
        return opacity, trace

    def geometry_vjp(self, latent: LatentTensor, d_opacity, d_trace) -> np.ndarray:
        """Pull back cotangents on ``(opacity, trace)`` to the latent values."""
        a = self.raw_attributes(latent)
        d_raw = np.zeros_like(a)
        d_raw[:, OPACITY] = np.asarray(d_opacity) * smooth_unit_clip_grad(a[:, OPACITY])
        s = a[:, SCALE]
        d_raw[:, SCALE] = (np.asarray(d_trace)[:, None] * 2 * smooth_positive(s)) * smooth_positive_grad(s)
        return self._mix(d_raw)


class IdentityCodec(Codec):
    kind = "identity"

    def __init__(self, views=None, height=None, width=None):
        super().__init__(np.eye(NUM_CHANNELS), views, height, width)

    def _mix(self, x):
        return np.array(x, dtype=np.float64, copy=True)

    _unmix = _mix


class OrthogonalCodec(Codec):
    kind = "orthogonal"

    def __init__(self, seed: int = 0, views=None, height=None, width=None):
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((NUM_CHANNELS, NUM_CHANNELS)))
        q = q * np.sign(np.diag(r))[None, :]
        super().__init__(q, views, height, width, seed=seed)


def make_codec(kind: str = "identity", seed: int = 0, **dims) -> Codec:
    if kind == "identity":
        return IdentityCodec(**dims)
    if kind == "orthogonal":
        return OrthogonalCodec(seed, **dims)
    raise ConfigError(f"unknown codec {kind!r}")

