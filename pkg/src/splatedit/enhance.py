"""Iterative dataset update: render, enhance in 2-D, blend, refit the grid."""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, DivergenceError, NumericalError, SplatEditError
from .render import ViewFootprints, load_png, psnr, render_views, save_png, flat_attributes
from .splat import NUM_CHANNELS, OPACITY, RGB, SCALE, SplatGrid

log = logging.getLogger(__name__)

MAX_FAILED_STEPS = 10
BACKTRACK_HALVINGS = 20


# -- plugins -----------------------------------------------------------------


class EnhancerPlugin:
    """``plugin(image, noise_strength) -> image`` on ``(H, W, 3)`` arrays in [0, 1]."""

    name = "base"

    def enhance(self, image: np.ndarray, noise_strength: float) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, image, noise_strength: float = 0.0) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        out = np.asarray(self.enhance(image, noise_strength), dtype=np.float64)
        if out.shape != image.shape:
            raise DataError(f"enhancer {self.name!r} changed image shape {image.shape} -> {out.shape}")
        if not np.all(np.isfinite(out)) or out.min() < 0.0 or out.max() > 1.0:
            raise DataError(f"enhancer {self.name!r} produced values outside [0, 1]")
        return out


class IdentityEnhancer(EnhancerPlugin):
    name = "identity"

    def enhance(self, image, noise_strength):
        return image.copy()


class UnsharpEnhancer(EnhancerPlugin):
    name = "unsharp"

    def __init__(self, sigma: float = 1.0, amount: float = 0.8):
        self.sigma, self.amount = sigma, amount

    def enhance(self, image, noise_strength):
        blur = gaussian_filter(image, sigma=(self.sigma, self.sigma, 0), mode="nearest")
        return np.clip(image + self.amount * (image - blur), 0.0, 1.0)


class ExternalEnhancer(EnhancerPlugin):
    """Runs ``command`` with input and output PNG paths.

    ``{input}``, ``{output}`` and ``{noise}`` placeholders are substituted;
    without placeholders the two paths are appended.
    """

    name = "external"

    def __init__(self, command: str, timeout: float = 600.0):
        self.command = command
        self.timeout = timeout

    def enhance(self, image, noise_strength):
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp) / "in.png", Path(tmp) / "out.png"
            save_png(image, src)
            if "{input}" in self.command:
                cmd = shlex.split(self.command.format(input=src, output=dst, noise=noise_strength))
            else:
                cmd = shlex.split(self.command) + [str(src), str(dst)]
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise SplatEditError(f"enhancer command failed ({proc.returncode}): {proc.stderr.strip()}")
            if not dst.exists():
                raise DataError("enhancer command wrote no output image")
            return load_png(dst)


def make_enhancer(spec: str) -> EnhancerPlugin:
    if spec == "identity":
        return IdentityEnhancer()
    if spec == "unsharp":
        return UnsharpEnhancer()
    if not spec.strip():
        raise ConfigError("empty enhancer specification")
    return ExternalEnhancer(spec)


# -- blending and refit --------------------------------------------------------


def blend_images(I_e, I_src, M) -> np.ndarray:
    """``M * I_e + (1 - M) * I_src`` per pixel."""
    I_e, I_src = np.asarray(I_e, dtype=np.float64), np.asarray(I_src, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if I_e.shape != I_src.shape:
        raise DataError(f"image shapes {I_e.shape} and {I_src.shape} differ")
    if M.shape != I_e.shape[:2]:
        raise DataError(f"mask {M.shape} does not match image {I_e.shape[:2]}")
    M = M[..., None]
    return np.where(M == 0.0, I_src, np.where(M == 1.0, I_e, M * I_e + (1.0 - M) * I_src))


@dataclass
class ReoptResult:
    grid: SplatGrid
    losses: list = field(default_factory=list)
    stopped: str = "iterations"

    @property
    def psnr(self) -> float:
        m = self.losses[-1] if self.losses else 0.0
        return 99.0 if m <= 0 else float(min(99.0, -10 * np.log10(m)))


class _Problem:
    """Mean squared render error across views, with fixed geometry."""

    def __init__(self, grid, targets, background):
        self.targets = [np.asarray(t, dtype=np.float64).reshape(-1, 3) for t in targets]
        self.views = []
        for v, t in enumerate(targets):
            h, w = np.shape(t)[:2]
            self.views.append(ViewFootprints(grid, grid.rig[v].scaled(w, h), background))
        self.count = sum(t.size for t in self.targets)

    def loss(self, rgb, opacity):
        return sum(np.sum((fp.render(rgb, opacity) - t) ** 2) for fp, t in zip(self.views, self.targets)) / self.count

    def grad(self, rgb, opacity):
        g_rgb, g_op = np.zeros_like(rgb), np.zeros_like(opacity)
        h_rgb, h_op = np.zeros(len(rgb)), np.zeros(len(opacity))
        total = 0.0
        for fp, t in zip(self.views, self.targets):
            C = fp.render(rgb, opacity)
            r = C - t
            total += np.sum(r ** 2)
            dr, do, _, (hr, ho) = fp.vjp(rgb, opacity, 2.0 * r / self.count)
            g_rgb += dr
            g_op += do
            h_rgb += hr
            h_op += ho
        scale = 2.0 / self.count
        return total / self.count, g_rgb, g_op, scale * h_rgb, scale * h_op


def _grid_from_flat(grid: SplatGrid, flat: np.ndarray) -> SplatGrid:
    V, H, W = grid.shape
    return SplatGrid(np.moveaxis(flat.reshape(V, H, W, NUM_CHANNELS), -1, 1), grid.rig)


def _precondition(g, h):
    damp = 1e-12 + 1e-6 * (h.max() if h.size else 0.0)
    return g / (h + damp)


def reoptimize_splats(grid: SplatGrid, targets, iterations: int = 200, lr: float = 0.05,
                      optimize_scale: bool = False, seed: int = 0, background=(0.0, 0.0, 0.0),
                      tol: float = 1e-14) -> ReoptResult:
    """Fit rgb and opacity (optionally scale) so renders match ``targets``.

    Gauss-Newton-diagonal preconditioned gradient descent with backtracking:
    a step is accepted only if the loss does not increase, so the loss trace
    is non-increasing. Ten consecutive iterations without an acceptable step,
    while the gradient is still significant, raise :class:`DivergenceError`.
    Scale updates use a seeded two-point simultaneous-perturbation estimate.
    """
    if len(targets) != grid.num_views:
        raise DataError(f"got {len(targets)} targets for {grid.num_views} views")
    if iterations <= 0:
        return ReoptResult(grid, [], "no iterations")
    flat = flat_attributes(grid)
    rgb, op = flat[:, RGB].copy(), flat[:, OPACITY].copy()
    problem = _Problem(grid, targets, background)
    rng = np.random.default_rng(seed)
    loss = problem.loss(rgb, op)
    losses = [loss]
    failed = 0
    stopped = "iterations"
    for it in range(iterations):
        if loss <= tol:
            stopped = "converged"
            break
        _, g_rgb, g_op, h_rgb, h_op = problem.grad(rgb, op)
        step_rgb = _precondition(g_rgb, h_rgb[:, None])
        step_op = _precondition(g_op, h_op)
        if max(np.abs(step_rgb).max(initial=0), np.abs(step_op).max(initial=0)) < 1e-12:
            stopped = "stationary"
            break
        eta = lr
        accepted = False
        for _ in range(BACKTRACK_HALVINGS):
            new_rgb = np.clip(rgb - eta * step_rgb, 0.0, 1.0)
            new_op = np.clip(op - eta * step_op, 0.0, 1.0)
            new_loss = problem.loss(new_rgb, new_op)
            if not np.isfinite(new_loss):
                raise NumericalError(f"non-finite loss at iteration {it}")
            if new_loss <= loss:
                accepted = True
                break
            eta *= 0.5
        if accepted:
            rgb, op, loss = new_rgb, new_op, new_loss
            failed = 0
        else:
            failed += 1
            if failed >= MAX_FAILED_STEPS:
                raise DivergenceError(f"no descent step for {failed} consecutive iterations", losses)
        if optimize_scale:
            flat[:, RGB], flat[:, OPACITY] = rgb, op
            flat, loss, problem = _spsa_scale_step(grid, flat, targets, background, rng, loss, problem)
            rgb, op = flat[:, RGB].copy(), flat[:, OPACITY].copy()
        losses.append(loss)
    flat[:, RGB], flat[:, OPACITY] = rgb, op
    return ReoptResult(_grid_from_flat(grid, flat), losses, stopped)


def _spsa_scale_step(grid, flat, targets, background, rng, loss, problem, c=0.02, step=0.01):
    """One accept-if-better perturbation step on log-scale."""
    delta = rng.choice([-1.0, 1.0], size=flat[:, SCALE].shape)
    log_s = np.log(np.maximum(flat[:, SCALE], 1e-4))

    def evaluate(ls):
        trial = flat.copy()
        trial[:, SCALE] = np.exp(ls)
        p = _Problem(_grid_from_flat(grid, trial), targets, background)
        return p.loss(trial[:, RGB], trial[:, OPACITY]), trial, p

    lp, _, _ = evaluate(log_s + c * delta)
    lm, _, _ = evaluate(log_s - c * delta)
    g = (lp - lm) / (2 * c) * delta
    if not np.any(g):
        return flat, loss, problem
    new_loss, trial, p = evaluate(log_s - step * np.sign(g))
    if new_loss <= loss:
        return trial, new_loss, p
    return flat, loss, problem


# -- loop ----------------------------------------------------------------------


@dataclass
class EnhanceResult:
    grid: SplatGrid
    trace: list = field(default_factory=list)  # per round: psnr vs targets and vs input renders


def enhance_loop(grid: SplatGrid, masks, enhancer: EnhancerPlugin, rounds: int = 2, iterations: int = 200,
                 lr: float = 0.05, resolution=None, source_images=None, noise_strength: float = 0.0,
                 workers: int = 1, background=(0.0, 0.0, 0.0), seed: int = 0) -> EnhanceResult:
    """``rounds`` of render -> enhance -> blend -> refit.

    ``masks`` are per-view ``(H_img, W_img)`` arrays in [0, 1]; ``source_images``
    default to renders of the input grid.
    """
    if not isinstance(enhancer, EnhancerPlugin):
        raise ConfigError("enhancer must be an EnhancerPlugin")
    if rounds < 0:
        raise ConfigError("rounds must be >= 0")
    if rounds == 0:
        return EnhanceResult(grid, [])
    initial = [r.rgb for r in render_views(grid, resolution, background)]
    src = initial if source_images is None else [np.asarray(s, dtype=np.float64) for s in source_images]
    if len(masks) != grid.num_views or len(src) != grid.num_views:
        raise DataError("need one mask and one source image per view")
    trace = []
    current = grid
    for k in range(rounds):
        renders = [r.rgb for r in render_views(current, resolution, background)]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            enhanced = list(pool.map(lambda im: enhancer(im, noise_strength), renders))
        targets = [blend_images(e, s, m) for e, s, m in zip(enhanced, src, masks)]
        result = reoptimize_splats(current, targets, iterations, lr, seed=seed + k, background=background)
        current = result.grid
        after = [r.rgb for r in render_views(current, resolution, background)]
        entry = {
            "round": k,
            "psnr_to_targets": float(np.mean([psnr(a, t) for a, t in zip(after, targets)])),
            "psnr_to_input": float(np.mean([psnr(a, i) for a, i in zip(after, initial)])),
            "final_loss": float(result.losses[-1]) if result.losses else 0.0,
            "stopped": result.stopped,
        }
        log.info("enhance round %d: %s", k, entry)
        trace.append(entry)
    return EnhanceResult(current, trace)
