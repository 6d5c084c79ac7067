"""Token alignment and cross/self attention injection for two-branch denoising.

Timesteps count down during denoising, so "inject until tau" means the
source maps are used while ``t >= tau`` and the edit branch keeps its own
maps once ``t < tau``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .denoiser import DenoiserHooks, PromptEmbedding, ToyDenoiser
from .diffusion import NoiseSchedule, step_from_eps
from .errors import DataError


@dataclass(frozen=True)
class TokenAlignment:
    """``mapping[j]`` is the source index for edit token ``j``, or None."""

    mapping: tuple

    def __post_init__(self):
        hits = [m for m in self.mapping if m is not None]
        if len(set(hits)) != len(hits):
            raise DataError("token alignment must be injective")

    def __len__(self):
        return len(self.mapping)

    def __getitem__(self, j):
        return self.mapping[j]


def align_tokens(p: PromptEmbedding, p_star: PromptEmbedding) -> TokenAlignment:
    """Greedy left-to-right exact matching; each source token is used once."""
    used: set[int] = set()
    mapping = []
    for tok in p_star.tokens:
        match = None
        for i, src in enumerate(p.tokens):
            if i not in used and src == tok:
                match = i
                used.add(i)
                break
        mapping.append(match)
    return TokenAlignment(tuple(mapping))


def inject_cross(W_src, W_tgt, t: int, tau_cross: float, alignment: TokenAlignment, blend: float = 1.0):
    """Cross-attention map for the edit branch.

    Column ``j`` comes from the source column ``CT(j)`` once ``t >= tau_cross``
    and the token is shared; everything else keeps the edit branch's value.
    Rows are renormalised because mixing columns breaks stochasticity.
    ``blend < 1`` mixes the substituted map with the edit map.
    """
    W_src = np.asarray(W_src)
    W_tgt = np.asarray(W_tgt)
    if W_src.ndim != 2 or W_tgt.ndim != 2 or W_src.shape[0] != W_tgt.shape[0]:
        raise DataError(f"cross maps {W_src.shape} and {W_tgt.shape} have different row counts")
    if len(alignment) != W_tgt.shape[1]:
        raise DataError(f"alignment covers {len(alignment)} tokens, edit map has {W_tgt.shape[1]}")
    if any(m is not None and not 0 <= m < W_src.shape[1] for m in alignment.mapping):
        raise DataError("alignment refers to a source token outside the source map")
    hits = [(j, i) for j, i in enumerate(alignment.mapping) if i is not None]
    if t < tau_cross or not hits:
        return W_tgt
    out = W_tgt.copy()
    for j, i in hits:
        out[:, j] = W_src[:, i]
    if blend != 1.0:
        out = blend * out + (1.0 - blend) * W_tgt
    elif len(hits) == W_tgt.shape[1] == W_src.shape[1]:
        # every source column used once: rows already sum to one, keep bits intact
        return out
    return out / out.sum(axis=1, keepdims=True)


def inject_self(W_src, W_tgt, t: int, tau_self: float):
    if np.shape(W_src) != np.shape(W_tgt):
        raise DataError(f"self maps {np.shape(W_src)} and {np.shape(W_tgt)} differ in shape")
    return W_src if t >= tau_self else W_tgt


@dataclass(frozen=True)
class InjectionConfig:
    tau_cross: float
    tau_self: float
    cross_enabled: bool = True
    self_enabled: bool = True
    layers: Optional[tuple] = None  # None: every attention layer
    blend: float = 1.0

    def active(self, layer: str) -> bool:
        return self.layers is None or layer in self.layers


def make_injector(source_record, t: int, config: InjectionConfig, alignment: TokenAlignment):
    """Attention hook that substitutes source maps into the edit branch."""

    def hook(layer, kind, W):
        if not config.active(layer):
            return W
        if kind == "cross" and config.cross_enabled:
            return inject_cross(source_record.get(t, layer, "cross"), W, t, config.tau_cross, alignment, config.blend)
        if kind == "self" and config.self_enabled:
            return inject_self(source_record.get(t, layer, "self"), W, t, config.tau_self)
        return W

    return hook


@dataclass
class DualStep:
    z_src: np.ndarray
    z_edit: np.ndarray
    source_record: object
    edit_record: object
    eps_src: np.ndarray
    eps_edit: np.ndarray


def dual_branch_step(z_src, z_edit, t: int, p: PromptEmbedding, p_star: PromptEmbedding,
                     config: InjectionConfig, denoiser: ToyDenoiser, schedule: NoiseSchedule, noise,
                     alignment: TokenAlignment | None = None,
                     skip_hook: Callable | None = None, record_self: bool = True) -> DualStep:
    """One source/edit step pair. The source branch runs first and records its
    maps; the edit branch then runs with the injected maps. Both add the same
    stored noise map."""
    if noise is None:
        raise DataError(f"no stored noise map for t={t}")
    schedule.check_t(t)
    alignment = alignment if alignment is not None else align_tokens(p, p_star)

    eps_s, rec_s, _ = denoiser.predict_eps(z_src, t, p, DenoiserHooks(record=True, record_self=True))
    hooks = DenoiserHooks(attention=make_injector(rec_s, t, config, alignment), skip=skip_hook,
                          record=True, record_self=record_self)
    eps_e, rec_e, _ = denoiser.predict_eps(z_edit, t, p_star, hooks)
    if not record_self:
        rec_s.maps = {k: v for k, v in rec_s.maps.items() if k[2] != "self"}
    return DualStep(
        step_from_eps(z_src, eps_s, t, schedule, noise),
        step_from_eps(z_edit, eps_e, t, schedule, noise),
        rec_s, rec_e, eps_s, eps_e,
    )
