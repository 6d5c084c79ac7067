"""Deterministic CPU splat rasterizer and image helpers.

Every Gaussian of the grid is unprojected to world space, transformed into
the target camera and projected with the local affine (Jacobian)
approximation. A small isotropic dilation keeps sub-pixel Gaussians
visible. Footprints are cut at 3 sigma. Gaussians are composited front to
back after a canonical sort: view depth first, then attribute values, so
the result does not depend on input order.

:class:`ViewFootprints` caches the geometry-only part of one view so that
colour and opacity can be re-rendered and differentiated cheaply.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .splat import OPACITY, RGB, ROTATION, SCALE, Camera, SplatGrid, covariance_matrix, unproject_grid

NEAR = 1e-2
DILATION = 0.3  # pixels^2 added to the projected covariance
CUTOFF_SIGMA = 3.0
ALPHA_MAX = 1.0 - 1e-7
PSNR_CAP = 99.0
ROW_CHUNK = 64


@dataclass(frozen=True, eq=False)
class RenderedView:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    view: int


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """Flat world-space Gaussians, index ``n = (v * H + row) * W + col``."""

    means: np.ndarray  # (N, 3)
    covs: np.ndarray  # (N, 3, 3)
    rgb: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)

    def __len__(self):
        return len(self.opacity)

    def take(self, idx) -> "GaussianSet":
        return GaussianSet(self.means[idx], self.covs[idx], self.rgb[idx], self.opacity[idx])


def flat_attributes(grid: SplatGrid) -> np.ndarray:
    return np.moveaxis(grid.attributes.astype(np.float64), 1, -1).reshape(-1, grid.attributes.shape[1])


def gaussians_from_grid(grid: SplatGrid) -> GaussianSet:
    a = flat_attributes(grid)
    return GaussianSet(unproject_grid(grid).reshape(-1, 3), covariance_matrix(a[:, SCALE], a[:, ROTATION]),
                       a[:, RGB], a[:, OPACITY])


def project(g: GaussianSet, cam: Camera):
    """Image-plane means, inverse 2-D covariances and view depths."""
    x = g.means @ cam.rotation.T + cam.translation
    z = x[:, 2]
    valid = z > NEAR
    zs = np.where(valid, z, 1.0)
    mean2d = np.stack([cam.fx * x[:, 0] / zs + cam.cx, cam.fy * x[:, 1] / zs + cam.cy], axis=-1)
    J = np.zeros((len(g), 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x[:, 0] / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * x[:, 1] / zs ** 2
    M = J @ cam.rotation
    cov2d = M @ g.covs @ np.swapaxes(M, 1, 2) + DILATION * np.eye(2)
    return mean2d, np.linalg.inv(cov2d), z, valid


def canonical_order(g: GaussianSet, depth) -> np.ndarray:
    """Sort by depth, breaking ties by the attribute values themselves."""
    keys = [g.opacity, *g.rgb.T[::-1], *g.covs.reshape(len(g), 9).T[::-1], *g.means.T[::-1], depth]
    return np.lexsort(keys)


def footprint(mean2d, inv2d, cam: Camera, rows) -> np.ndarray:
    """Gaussian falloff ``(P, K)`` for pixel centres of the given rows."""
    v, u = np.meshgrid(np.asarray(rows) + 0.5, np.arange(cam.width) + 0.5, indexing="ij")
    px = np.stack([u.ravel(), v.ravel()], axis=-1)
    d = px[:, None, :] - mean2d[None, :, :]
    m2 = (inv2d[None, :, 0, 0] * d[..., 0] ** 2 + 2 * inv2d[None, :, 0, 1] * d[..., 0] * d[..., 1]
          + inv2d[None, :, 1, 1] * d[..., 1] ** 2)
    return np.where(m2 <= CUTOFF_SIGMA ** 2, np.exp(-0.5 * m2), 0.0)


def composite(A, rgb, background):
    """Front-to-back compositing of alphas ``A (P, K)`` with colours ``(K, 3)``
    shared by all pixels or ``(P, K, 3)`` per pixel; returns ``(colour (P, 3), transmittance (P, K), final T (P,))``."""
    one_minus = 1.0 - A
    T_incl = np.cumprod(one_minus, axis=1)
    T = np.concatenate([np.ones((A.shape[0], 1)), T_incl[:, :-1]], axis=1) if A.shape[1] else np.ones((A.shape[0], 0))
    T_final = T_incl[:, -1] if A.shape[1] else np.ones(A.shape[0])
    w = T * A
    colour = w @ rgb if rgb.ndim == 2 else np.einsum("pk,pkc->pc", w, rgb)
    colour = colour + T_final[:, None] * np.asarray(background, dtype=np.float64)[None, :]
    return colour, T, T_final


def _camera_for(cam: Camera, resolution):
    if resolution is None:
        return cam
    w, h = (resolution, resolution) if np.isscalar(resolution) else resolution
    return cam.scaled(int(w), int(h))


def render_gaussians(g: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0), view: int = 0) -> RenderedView:
    mean2d, inv2d, z, valid = project(g, cam)
    keep = np.flatnonzero(valid & (g.opacity > 0))
    order = keep[canonical_order(g.take(keep), z[keep])]
    colours, alphas = [], []
    bg = np.asarray(background, dtype=np.float64)
    for r0 in range(0, cam.height, ROW_CHUNK):
        rows = np.arange(r0, min(r0 + ROW_CHUNK, cam.height))
        A = np.minimum(g.opacity[order][None, :] * footprint(mean2d[order], inv2d[order], cam, rows), ALPHA_MAX)
        c, _, T_final = composite(A, g.rgb[order], bg)
        colours.append(c)
        alphas.append(1.0 - T_final)
    rgb = np.concatenate(colours).reshape(cam.height, cam.width, 3)
    alpha = np.concatenate(alphas).reshape(cam.height, cam.width)
    return RenderedView(rgb, alpha, view)


def rasterize(grid: SplatGrid, view: int = 0, resolution=None, background=(0.0, 0.0, 0.0),
              camera: Camera | None = None, rgb=None) -> RenderedView:
    """Render ``grid`` through camera ``view`` of its rig (or an explicit camera).
    ``rgb`` optionally overrides the per-Gaussian colours, shape ``(V, 3, H, W)``."""
    if camera is None:
        if not 0 <= view < grid.num_views:
            raise DataError(f"view {view} outside rig of {grid.num_views}")
        camera = grid.rig[view]
    g = gaussians_from_grid(grid)
    if rgb is not None:
        g = GaussianSet(g.means, g.covs, np.moveaxis(np.asarray(rgb, dtype=np.float64), 1, -1).reshape(-1, 3), g.opacity)
    return render_gaussians(g, _camera_for(camera, resolution), background, view)


def render_views(grid: SplatGrid, resolution=None, background=(0.0, 0.0, 0.0), rgb=None) -> list[RenderedView]:
    return [rasterize(grid, v, resolution, background, rgb=rgb) for v in range(grid.num_views)]


class ViewFootprints:
    """Cached geometry of one view as padded per-pixel lists.

    ``index[p, k]`` is the k-th Gaussian (front to back) touching pixel ``p``
    and ``G[p, k]`` its falloff; padding entries point at slot ``N`` with zero
    falloff. With geometry fixed, the render is a function of colour and
    opacity only; :meth:`render` and :meth:`vjp` evaluate it and its gradient.
    """

    def __init__(self, grid: SplatGrid, cam: Camera, background=(0.0, 0.0, 0.0)):
        g = gaussians_from_grid(grid)
        mean2d, inv2d, z, valid = project(g, cam)
        keep = np.flatnonzero(valid)
        order = keep[canonical_order(g.take(keep), z[keep])]
        G = footprint(mean2d[order], inv2d[order], cam, np.arange(cam.height))
        hit = G > 0
        K = max(int(hit.sum(axis=1).max(initial=0)), 1)
        cols = np.argsort(~hit, axis=1, kind="stable")[:, :K]
        self.N = len(g)
        self.G = np.take_along_axis(G, cols, axis=1)
        self.index = np.where(self.G > 0, order[cols], self.N)
        self.cam = cam
        self.background = np.asarray(background, dtype=np.float64)

    def _gather(self, rgb, opacity):
        op = np.append(opacity, 0.0)[self.index]
        c = np.concatenate([rgb, np.zeros((1, 3))])[self.index]
        raw = op * self.G
        return np.minimum(raw, ALPHA_MAX), raw < ALPHA_MAX, c

    def render(self, rgb, opacity) -> np.ndarray:
        A, _, c = self._gather(rgb, opacity)
        return composite(A, c, self.background)[0]

    def _scatter(self, values):
        return np.bincount(self.index.ravel(), weights=values.ravel(), minlength=self.N + 1)[: self.N]

    def vjp(self, rgb, opacity, d_colour):
        """Pull ``d_colour (P, 3)`` back to ``(d_rgb (N, 3), d_opacity (N,), colour, J-diagonals)``.

        The diagonals are the per-parameter squared Jacobian column norms,
        used as a Gauss-Newton preconditioner.
        """
        A, live, c = self._gather(rgb, opacity)
        colour, T, T_final = composite(A, c, self.background)
        w = T * A
        # colour behind Gaussian k, weighted by T_k: S_{k+1} / (1 - A_k)
        contrib = w[:, :, None] * c
        suffix = np.flip(np.cumsum(np.flip(contrib, 1), axis=1), 1) - contrib
        suffix += T_final[:, None, None] * self.background[None, None, :]
        dC_dA = T[:, :, None] * c - suffix / (1.0 - A)[:, :, None]
        dC_do = dC_dA * (self.G * live)[:, :, None]
        d_rgb = np.stack([self._scatter(w * d_colour[:, None, ch]) for ch in range(3)], axis=1)
        d_op = self._scatter(np.einsum("pkc,pc->pk", dC_do, d_colour))
        h_rgb = self._scatter(w ** 2)
        h_op = self._scatter(np.sum(dC_do ** 2, axis=2))
        return d_rgb, d_op, colour, (h_rgb, h_op)


# -- metrics and image io ------------------------------------------------------


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"image shapes {a.shape} and {b.shape} differ")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB for images on the [0, 1] scale; identical images give the cap."""
    m = mse(a, b)
    if m == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(m)))


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = to_uint8(img)
    Image.fromarray(a, "L" if a.ndim == 2 else "RGB").save(path)
    return path


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def contact_sheet(images, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Horizontal strip of equally sized ``(H, W, 3)`` images."""
    images = [np.asarray(i, dtype=np.float64) for i in images]
    H, W = images[0].shape[:2]
    if any(i.shape[:2] != (H, W) for i in images):
        raise DataError("contact sheet images must share one size")
    sheet = np.full((H, len(images) * (W + pad) - pad, 3), fill)
    for k, img in enumerate(images):
        sheet[:, k * (W + pad):k * (W + pad) + W] = img if img.ndim == 3 else img[..., None]
    return sheet
