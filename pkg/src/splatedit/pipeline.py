"""End-to-end edit: invert, dual-branch denoise with injection, blending,
guidance and annealing, decode, optional enhancement.

Per timestep the order is fixed: source branch, edit branch (with injected
maps and modulated skips), latent blend with the mask, then the guidance
update on the blended latent.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .anneal import AnnealParams, make_skip_hook
from .attention import InjectionConfig, align_tokens, dual_branch_step
from .codec import Codec, LatentTensor, make_codec
from .denoiser import AttentionRecord, DenoiserConfig, ToyDenoiser
from .diffusion import NoiseTrajectory, forward_invert, make_schedule
from .enhance import enhance_loop, make_enhancer
from .errors import ConfigError, DataError, SplatEditError
from .guidance import GeoGuidanceParams, geo_loss_grad, guided_step, relevance_from_eps
from .masks import (EditMask, attention_mask, blend_latents, lift_view_masks, load_view_masks, union_masks,
                    upsample_nearest)
from .render import render_views
from .splat import SplatGrid

log = logging.getLogger(__name__)

MASK_SOURCES = ("none", "attention", "files", "union", "user")


@dataclass
class EditConfig:
    """Flat, JSON-serialisable edit settings. ``None`` taus resolve from ``T``."""

    source_prompt: str = ""
    edit_prompt: str = ""
    edit_token: Optional[str] = None

    T: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.2
    seed: int = 0

    tau_cross: Optional[float] = None  # default 0.4 T
    tau_self: Optional[float] = None  # default 0.6 T
    cross_enabled: bool = True
    self_enabled: bool = True
    inject_layers: Optional[list] = None
    inject_blend: float = 1.0

    anneal_tau: Optional[float] = None  # default 0.5 T
    s_l: float = 1.2
    s_h: float = 1.1
    r_thresh: float = 0.25
    layer_s_l: dict = field(default_factory=dict)
    layer_s_h: dict = field(default_factory=dict)

    lambda_o: float = 1.0
    lambda_sigma: float = 1.0
    gamma_o: float = 5.0
    gamma_sigma: float = 1.0
    guidance_scale: float = 0.1
    full_backprop: bool = False

    mask_source: str = "none"
    mask_threshold: float = 0.5
    mask_dir: Optional[str] = None
    user_mask: Optional[str] = None

    enhance: bool = False
    enhancer: str = "unsharp"
    enhance_rounds: int = 2
    enhance_iterations: int = 200
    enhance_lr: float = 0.05
    enhance_resolution: Optional[int] = None
    noise_strength: float = 0.0

    codec: str = "identity"
    codec_seed: int = 0
    weight_seed: int = 0
    attn_sharpness: float = 3.0
    record_self_every: int = 5

    def __post_init__(self):
        self.validate()

    # resolved values
    @property
    def tau_cross_value(self) -> float:
        return 0.4 * self.T if self.tau_cross is None else float(self.tau_cross)

    @property
    def tau_self_value(self) -> float:
        return 0.6 * self.T if self.tau_self is None else float(self.tau_self)

    @property
    def anneal_tau_value(self) -> float:
        return 0.5 * self.T if self.anneal_tau is None else float(self.anneal_tau)

    def validate(self) -> None:
        if not isinstance(self.T, int) or self.T < 1:
            raise ConfigError(f"T must be a positive integer, got {self.T!r}")
        for name in ("tau_cross", "tau_self", "anneal_tau"):
            v = getattr(self, f"{name}_value")
            if not 0 <= v <= self.T:
                raise ConfigError(f"{name}={v} outside [0, T={self.T}]")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}, got {self.mask_source!r}")
        if self.mask_source in ("attention", "union") and not self.edit_token:
            raise ConfigError(f"mask_source={self.mask_source!r} needs edit_token")
        if self.mask_source in ("files", "union"):
            if not self.mask_dir or not Path(self.mask_dir).is_dir():
                raise ConfigError(f"mask_dir {self.mask_dir!r} does not exist")
        if self.mask_source == "user" and (not self.user_mask or not Path(self.user_mask).is_file()):
            raise ConfigError(f"user_mask {self.user_mask!r} does not exist")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ConfigError("mask_threshold must lie in [0, 1]")
        if self.record_self_every < 1:
            raise ConfigError("record_self_every must be >= 1")
        if self.enhance_rounds < 0 or self.enhance_iterations < 0:
            raise ConfigError("enhancement rounds and iterations must be >= 0")
        self.guidance_params()
        self.anneal_params()

    def injection(self) -> InjectionConfig:
        layers = None if self.inject_layers is None else tuple(self.inject_layers)
        return InjectionConfig(self.tau_cross_value, self.tau_self_value, self.cross_enabled,
                               self.self_enabled, layers, self.inject_blend)

    def anneal_params(self) -> AnnealParams:
        return AnnealParams(self.s_l, self.s_h, self.anneal_tau_value, self.r_thresh,
                            dict(self.layer_s_l), dict(self.layer_s_h))

    def guidance_params(self) -> GeoGuidanceParams:
        return GeoGuidanceParams(self.lambda_o, self.lambda_sigma, self.gamma_o, self.gamma_sigma,
                                 self.guidance_scale, self.full_backprop)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(weight_seed=self.weight_seed, attn_sharpness=self.attn_sharpness)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EditConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **kw) -> "EditConfig":
        return dataclasses.replace(self, **kw)


def load_config(path) -> EditConfig:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return EditConfig.from_dict(d)


def save_config(config: EditConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def identity_config(prompt: str = "a sphere", T: int = 50, **kw) -> EditConfig:
    """Same prompt on both branches, injection throughout, no guidance, neutral annealing."""
    base = dict(source_prompt=prompt, edit_prompt=prompt, T=T, tau_cross=0.0, tau_self=0.0,
                s_l=1.0, s_h=1.0, guidance_scale=0.0, mask_source="none", enhance=False)
    base.update(kw)
    return EditConfig(**base)


@dataclass
class EditResult:
    grid: SplatGrid
    latent: np.ndarray
    source_latent: np.ndarray
    trajectory: NoiseTrajectory
    mask: Optional[EditMask]
    report: dict
    source_record: AttentionRecord
    edit_record: AttentionRecord


class StepError(SplatEditError):
    """A module error raised at a specific denoising step."""

    def __init__(self, t: int, cause: Exception):
        super().__init__(f"step t={t}: {type(cause).__name__}: {cause}")
        self.t = t
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


def _denoise(z_T, trajectory, p, ps, config, denoiser, codec, schedule, mask, guidance: bool, collect: bool):
    inj = config.injection()
    anneal = config.anneal_params()
    gp = config.guidance_params()
    alignment = align_tokens(p, ps)
    z_src = z_T.copy()
    z_edit = z_T.copy()
    steps = []
    src_rec = AttentionRecord(p.tokens)
    edit_rec = AttentionRecord(ps.tokens)
    for t in range(schedule.T, 0, -1):
        try:
            record_self = collect and (t % config.record_self_every == 0 or t == schedule.T)
            step = dual_branch_step(z_src, z_edit, t, p, ps, inj, denoiser, schedule, trajectory.noise[t],
                                    alignment, make_skip_hook(t, anneal), record_self)
            z_hat = step.z_edit if mask is None else blend_latents(step.z_src, step.z_edit, mask)
            entry = {"t": t, "loss_geo": None}
            if guidance and gp.scale > 0:
                eps_p = denoiser.eps(z_edit, t, p)
                eps_ps = denoiser.eps(z_edit, t, ps)
                R = relevance_from_eps(eps_p, eps_ps)

                def grad_fn(z, _t=t, _eps=eps_ps, _R=R):
                    return geo_loss_grad(z, _eps, _t, _R, gp, codec, schedule, denoiser, ps)

                z_next, L = guided_step(z_hat, z_edit, gp, grad_fn, mask)
                entry.update(loss_geo=L, relevance_mean=float(R.values.mean()))
            else:
                z_next = z_hat
            entry["branch_gap"] = float(np.max(np.abs(z_next - step.z_src)))
            steps.append(entry)
            if collect:
                src_rec.grid_shape = step.source_record.grid_shape
                edit_rec.grid_shape = step.edit_record.grid_shape
                src_rec.merge(step.source_record)
                edit_rec.merge(step.edit_record)
            z_src, z_edit = step.z_src, z_next
        except StepError:
            raise
        except (SplatEditError, ValueError, ArithmeticError) as exc:
            raise StepError(t, exc) from exc
    return z_src, z_edit, steps, src_rec, edit_rec


def _build_mask(config: EditConfig, shape, prepass_record: AttentionRecord | None) -> EditMask | None:
    V, _, H, W = shape
    src = config.mask_source
    if src == "none":
        return None
    if src == "user":
        m = np.load(config.user_mask)
        if m.shape != (V, H, W):
            raise DataError(f"user mask has shape {m.shape}, latent grid is {(V, H, W)}")
        return EditMask(m)
    parts = []
    if src in ("attention", "union"):
        parts.append(attention_mask(prepass_record, config.edit_token, config.mask_threshold, (H, W)))
    if src in ("files", "union"):
        parts.append(lift_view_masks(load_view_masks(config.mask_dir, V), (V, H, W)))
    out = parts[0]
    for m in parts[1:]:
        out = union_masks(out, m)
    return out


def run_edit(asset: SplatGrid, config: EditConfig, p: str | None = None, p_star: str | None = None,
             trajectory: NoiseTrajectory | None = None, denoiser: ToyDenoiser | None = None,
             codec: Codec | None = None) -> EditResult:
    """Edit ``asset`` from prompt ``p`` towards ``p_star`` (defaults from the config)."""
    t0 = time.perf_counter()
    p = config.source_prompt if p is None else p
    p_star = config.edit_prompt if p_star is None else p_star
    V, H, W = asset.shape
    codec = codec or make_codec(config.codec, config.codec_seed, views=V, height=H, width=W)
    denoiser = denoiser or ToyDenoiser(config.denoiser_config())
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    pe, pse = denoiser.embed(p), denoiser.embed(p_star)
    if config.edit_token is not None and config.mask_source in ("attention", "union"):
        pse.index(config.edit_token)

    z0 = codec.encode(asset).values
    if trajectory is None:
        trajectory = forward_invert(z0, schedule, config.seed, denoiser.conditioned(pe), prompt=p)
    else:
        if trajectory.T != schedule.T or trajectory.latents.shape[1:] != z0.shape:
            raise DataError("trajectory does not match the asset or schedule")
        if np.max(np.abs(trajectory.latents[0] - z0)) > 1e-6:
            raise DataError("trajectory was inverted from a different asset")
    z_T = trajectory.z_T

    prepass = None
    if config.mask_source in ("attention", "union"):
        _, _, _, _, prepass = _denoise(z_T, trajectory, pe, pse, config, denoiser, codec, schedule,
                                       None, guidance=False, collect=True)
    mask = _build_mask(config, z0.shape, prepass)

    z_src, z_edit, steps, src_rec, edit_rec = _denoise(z_T, trajectory, pe, pse, config, denoiser, codec,
                                                        schedule, mask, guidance=True, collect=True)
    grid = codec.decode(LatentTensor(z_edit, "edited"), asset.rig)

    enhance_trace = []
    if config.enhance and config.enhance_rounds > 0:
        res = config.enhance_resolution or W
        if mask is None:
            view_masks = [np.ones((res, res))] * V
        else:
            view_masks = [upsample_nearest(m, (res, res)) for m in mask.values]
        src_images = [r.rgb for r in render_views(asset, res)]
        out = enhance_loop(grid, view_masks, make_enhancer(config.enhancer), config.enhance_rounds,
                           config.enhance_iterations, config.enhance_lr, res, src_images,
                           config.noise_strength, seed=config.seed)
        grid, enhance_trace = out.grid, out.trace

    report = {
        "source_prompt": p,
        "edit_prompt": p_star,
        "seed": config.seed,
        "config": config.to_dict(),
        "steps": steps,
        "mask": None if mask is None else mask.stats(),
        "source_reconstruction_error": float(np.max(np.abs(z_src - z0))),
        "edit_distance": float(np.max(np.abs(z_edit - z0))),
        "enhance": enhance_trace,
        "seconds": time.perf_counter() - t0,
    }
    return EditResult(grid, z_edit, z_src, trajectory, mask, report, src_rec, edit_rec)


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, default=float) + "\n")
