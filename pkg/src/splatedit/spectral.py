"""Attention-structure analysis: per-token heat over splats and Laplacian
eigenvector colouring of the self-attention graph."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import eigsh

from .denoiser import AttentionRecord
from .errors import DataError
from .masks import averaged_column, minmax, upsample_nearest
from .render import rasterize
from .splat import SplatGrid

DENSE_LIMIT = 2048
NEUTRAL = 0.5
_DEFLATE_SHIFT = 3.0  # lifts the trivial eigenvalue above the spectral bound 2

# "hot" colormap knots: black, red, yellow, white
_HOT_X = np.array([0.0, 1 / 3, 2 / 3, 1.0])
_HOT_RGB = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])


def heat_colormap(x) -> np.ndarray:
    """Values in [0, 1] to RGB, appended as a trailing axis."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(x, _HOT_X, _HOT_RGB[:, c]) for c in range(3)], axis=-1)


@dataclass(frozen=True, eq=False)
class TokenHeat:
    heat: np.ndarray  # (V, H, W) normalised averaged attention
    renders: list


def token_heat(record: AttentionRecord, token, grid_hw, layers=None) -> np.ndarray:
    col = minmax(averaged_column(record, token, layers))
    return upsample_nearest(col, grid_hw)


def token_heatmap(record: AttentionRecord, token, grid: SplatGrid, resolution=None, layers=None,
                  background=(0.0, 0.0, 0.0)) -> TokenHeat:
    """Render every view with the token's heat colours in place of rgb."""
    V, H, W = grid.shape
    heat = token_heat(record, token, (H, W), layers)
    if heat.shape[0] != V:
        raise DataError(f"record covers {heat.shape[0]} views, grid has {V}")
    rgb = np.moveaxis(heat_colormap(heat), -1, 1)
    renders = [rasterize(grid, v, resolution, background, rgb=rgb) for v in range(V)]
    return TokenHeat(heat, renders)


@dataclass(frozen=True, eq=False)
class LaplacianSpectrum:
    laplacian: np.ndarray  # over connected (non-isolated) nodes
    eigenvalues: np.ndarray  # ascending, full spectrum when solved densely
    nodes: np.ndarray  # indices of non-isolated nodes
    isolated: np.ndarray


def normalized_laplacian(W):
    """``I - D^{-1/2} A D^{-1/2}`` with ``A = (W + W^T) / 2`` on non-isolated nodes."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DataError(f"self-attention map must be square, got {W.shape}")
    A = 0.5 * (W + W.T)
    deg = A.sum(axis=1)
    nodes = np.flatnonzero(deg > 0)
    isolated = np.flatnonzero(deg <= 0)
    A = A[np.ix_(nodes, nodes)]
    dinv = 1.0 / np.sqrt(deg[nodes])
    L = np.eye(len(nodes)) - dinv[:, None] * A * dinv[None, :]
    return 0.5 * (L + L.T), np.sqrt(deg[nodes]), nodes, isolated


def _smallest(M, k):
    n = M.shape[0]
    if n <= DENSE_LIMIT or k >= n - 1:
        vals, vecs = np.linalg.eigh(M)
        return vals[:k], vecs[:, :k], vals
    vals, vecs = eigsh(M, k=k, which="SA", v0=np.ones(n) / np.sqrt(n))
    order = np.argsort(vals)
    return vals[order], vecs[:, order], vals[order]


def _fix_sign(vecs):
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    return vecs * np.where(signs == 0, 1.0, signs)


@dataclass(frozen=True, eq=False)
class EigenColoring:
    colors: np.ndarray  # (n, k) in [0, 1]
    eigenvalues: np.ndarray  # eigenvalues of the chosen vectors
    spectrum: np.ndarray  # ascending spectrum of L (dense) or the computed part
    isolated: np.ndarray


def laplacian_eigencolors(W, k: int = 3, drop_trivial: bool = True) -> EigenColoring:
    """Min-max normalised eigenvectors of the normalised Laplacian, one per channel.

    With ``drop_trivial`` the known null vector ``D^{1/2} 1`` is deflated so
    the returned vectors are the next ``k``; on a disconnected graph the
    remaining null vectors are then orthogonal to it and separate components.
    Isolated nodes get the neutral colour and are listed in ``isolated``.
    """
    L, dsqrt, nodes, isolated = normalized_laplacian(W)
    n_total = np.shape(W)[0]
    colors = np.full((n_total, k), NEUTRAL)
    if len(nodes) == 0:
        return EigenColoring(colors, np.zeros(0), np.zeros(0), isolated)
    spectrum = np.linalg.eigvalsh(L) if len(nodes) <= DENSE_LIMIT else None
    M = L
    if drop_trivial:
        u0 = dsqrt / np.linalg.norm(dsqrt)
        M = L + _DEFLATE_SHIFT * np.outer(u0, u0)
    kk = min(k, len(nodes) - (1 if drop_trivial else 0))
    if kk <= 0:
        return EigenColoring(colors, np.zeros(0), spectrum if spectrum is not None else np.zeros(0), isolated)
    vals, vecs, part = _smallest(M, kk)
    vecs = _fix_sign(vecs)
    for c in range(kk):
        colors[nodes, c] = minmax(vecs[:, c]) if np.ptp(vecs[:, c]) > 1e-12 else NEUTRAL
    return EigenColoring(colors, vals, spectrum if spectrum is not None else part, isolated)


def eigencolor_grid(coloring: EigenColoring, attn_shape, grid_hw) -> np.ndarray:
    """Per-cell colours ``(V, 3, H, W)`` from attention-resolution eigencolours."""
    V, Ha, Wa = attn_shape
    c = coloring.colors
    if c.shape[1] < 3:
        c = np.concatenate([c, np.full((c.shape[0], 3 - c.shape[1]), NEUTRAL)], axis=1)
    c = c[:, :3].reshape(V, Ha, Wa, 3)
    return upsample_nearest(np.moveaxis(c, -1, 1), grid_hw)


def write_eigenvalues_csv(values, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue"])
        for i, v in enumerate(values):
            w.writerow([i, f"{v:.12g}"])
    return path
