"""Edit-region masks over latent cells and latent blending."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .denoiser import AttentionRecord
from .errors import DataError

DEGENERATE_RANGE = 1e-12
MASK_PATTERN = "mask_view{}.png"
PIXEL_COVERED = 128


@dataclass(frozen=True, eq=False)
class EditMask:
    values: np.ndarray  # (V, H, W), entries in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise DataError(f"edit mask must be (V, H, W), got {v.shape}")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise DataError("edit mask values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape))

    @classmethod
    def ones(cls, shape):
        return cls(np.ones(shape))

    def coverage(self) -> float:
        return float(self.values.mean())

    def stats(self) -> dict:
        return {"coverage": self.coverage(), "cells": int(np.count_nonzero(self.values)), "shape": list(self.shape)}


def minmax(x):
    """Global min-max normalisation; degenerate ranges map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo < DEGENERATE_RANGE:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _resolve_token(record: AttentionRecord, token) -> int:
    if isinstance(token, (int, np.integer)):
        if record.tokens and not 0 <= token < len(record.tokens):
            raise DataError(f"token index {token} outside prompt of {len(record.tokens)} tokens")
        return int(token)
    if token not in record.tokens:
        raise DataError(f"token {token!r} not in prompt {' '.join(record.tokens)!r}")
    return record.tokens.index(token)


def averaged_column(record: AttentionRecord, token, layers=None) -> np.ndarray:
    """Mean of one token's cross-attention column over every recorded step and layer,
    reshaped to the attention grid ``(V, Ha, Wa)``."""
    j = _resolve_token(record, token)
    maps = record.select("cross", layers)
    if not maps:
        raise DataError("record holds no cross-attention maps")
    col = np.mean([W[:, j] for W in maps], axis=0)
    if record.grid_shape is None:
        raise DataError("record lacks the attention grid shape")
    return col.reshape(record.grid_shape)


def upsample_nearest(x, shape) -> np.ndarray:
    """Nearest-neighbour resize of the trailing two axes by integer factors."""
    H, W = shape
    h, w = x.shape[-2:]
    if H % h or W % w:
        raise DataError(f"cannot upsample {h}x{w} to {H}x{W} by an integer factor")
    return np.repeat(np.repeat(x, H // h, axis=-2), W // w, axis=-1)


def attention_mask(record: AttentionRecord, token, threshold: float = 0.5, latent_hw=None, layers=None) -> EditMask:
    col = minmax(averaged_column(record, token, layers))
    m = (col >= threshold).astype(np.float64)
    if col.max() == 0.0:  # degenerate record: no edit region
        m[:] = 0.0
    if latent_hw is not None:
        m = upsample_nearest(m, latent_hw)
    return EditMask(m)


def _binary_image(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim == 3:
        a = a[..., :3].mean(axis=-1) if a.shape[-1] >= 3 else a[..., 0]
    if a.dtype == np.uint8:
        return a >= PIXEL_COVERED
    return np.asarray(a, dtype=np.float64) >= 0.5


def lift_view_masks(images, dims) -> EditMask:
    """Per-view mask images to latent cells; a cell is on if any of its pixels is."""
    V, H, W = dims
    if len(images) != V:
        raise DataError(f"got {len(images)} mask images for {V} views")
    out = np.zeros((V, H, W))
    for i, img in enumerate(images):
        b = _binary_image(img)
        h, w = b.shape
        if h % H == 0 and w % W == 0:
            out[i] = b.reshape(H, h // H, W, w // W).any(axis=(1, 3))
        elif H % h == 0 and W % w == 0:
            out[i] = upsample_nearest(b.astype(np.float64), (H, W))
        else:
            raise DataError(f"mask {i} size {h}x{w} is not commensurate with latent {H}x{W}")
    return EditMask(out)


def load_view_masks(directory, num_views: int) -> list[np.ndarray]:
    d = Path(directory)
    imgs = []
    for i in range(num_views):
        p = d / MASK_PATTERN.format(i)
        if not p.exists():
            raise DataError(f"missing mask image {p}")
        with Image.open(p) as im:
            imgs.append(np.asarray(im.convert("L")))
    return imgs


def save_view_masks(mask: EditMask, directory, scale: int = 1) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(mask.values):
        img = upsample_nearest(m, (m.shape[0] * scale, m.shape[1] * scale))
        p = d / MASK_PATTERN.format(i)
        Image.fromarray(np.round(img * 255).astype(np.uint8), "L").save(p)
        paths.append(p)
    return paths


def union_masks(a: EditMask, b: EditMask) -> EditMask:
    if a.shape != b.shape:
        raise DataError(f"mask shapes {a.shape} and {b.shape} differ")
    return EditMask(np.maximum(a.values, b.values))


def blend_latents(z, z_star, mask) -> np.ndarray:
    """``(1 - M) * z + M * z_star`` with M broadcast over channels."""
    z = np.asarray(z, dtype=np.float64)
    z_star = np.asarray(z_star, dtype=np.float64)
    m = mask.values if isinstance(mask, EditMask) else np.asarray(mask, dtype=np.float64)
    if z.shape != z_star.shape:
        raise DataError(f"latent shapes {z.shape} and {z_star.shape} differ")
    if m.shape != (z.shape[0],) + z.shape[2:]:
        raise DataError(f"mask {m.shape} does not match latent {z.shape}")
    m = m[:, None]
    # select instead of multiply where the mask is binary so untouched cells stay bit exact
    return np.where(m == 0.0, z, np.where(m == 1.0, z_star, (1.0 - m) * z + m * z_star))
