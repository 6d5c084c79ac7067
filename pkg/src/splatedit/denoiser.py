"""Reference text-conditioned noise predictor over multi-view splat latents.

A small two-level conv encoder/decoder with frozen, seeded weights::

    z (V,C,H,W) -> conv3x3 + time emb -> h0 ------------------(skip0)----+
                   avgpool 2 -> conv3x3 -> [self+cross attn "down"] -(skip1)--+ |
                   [self+cross attn "mid"] -> cat(skip1) -> conv1x1         | |
                   upsample 2 -> cat(skip0) -> conv3x3 -> conv1x1 -> eps    | |

Both attention layers work at half the latent resolution. Self-attention
is joint over all ``V * H/2 * W/2`` positions of every view, so the maps are
3D rather than per-image. Hooks can record or override every attention map
and transform the two skip tensors before they are concatenated back.

The network runs in torch float64; inputs and outputs are numpy arrays.
Hooks see and return numpy arrays and are only honoured on the no-grad path.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .containers import read_container, write_container
from .errors import ConfigError, DataError

ATTN_LAYERS = ("down", "mid")
SKIP_LAYERS = ("skip0", "skip1")
RECORD_MAGIC = b"ATTNRECD"


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 12
    hidden: int = 32
    text_dim: int = 32
    attn_dim: int = 32
    max_tokens: int = 16
    weight_seed: int = 0
    weight_scale: float = 1.0
    embed_seed: int = 0
    max_timestep: int = 1000
    attn_sharpness: float = 3.0  # logit multiplier; untrained weights otherwise give near-uniform maps


# --------------------------------------------------------------------------
# prompts


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    text: str
    tokens: tuple
    token_ids: tuple
    embeddings: np.ndarray  # (N_tok, D_txt), unit rows

    def __len__(self):
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise DataError(f"token {token!r} not in prompt {self.text!r}") from None


def token_id(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def token_vector(tid: int, dim: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, tid & 0xFFFFFFFF, tid >> 32])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def embed_prompt(text: str, dim: int = 32, seed: int = 0, max_tokens: int = 16) -> PromptEmbedding:
    """Whitespace tokens, each hashed to a fixed unit vector."""
    tokens = tuple(text.split())
    if not tokens:
        raise ConfigError("prompt is empty")
    if len(tokens) > max_tokens:
        raise ConfigError(f"prompt has {len(tokens)} tokens, maximum is {max_tokens}")
    ids = tuple(token_id(tok) for tok in tokens)
    emb = np.stack([token_vector(i, dim, seed) for i in ids])
    return PromptEmbedding(text, tokens, ids, emb)


def null_embedding(dim: int = 32, seed: int = 0) -> PromptEmbedding:
    """Fixed one-token unconditional embedding."""
    return embed_prompt("<null>", dim, seed)


# --------------------------------------------------------------------------
# attention records


class AttentionRecord:
    """Attention maps keyed by ``(t, layer, kind)`` with ``kind`` in {"cross", "self"}.

    Cross maps are ``(N_pos, N_tok)``, self maps ``(N_pos, N_pos)``, rows
    indexed view-major over the ``(V, Ha, Wa)`` attention grid.
    """

    def __init__(self, tokens=(), grid_shape=None, maps=None):
        self.tokens = tuple(tokens)
        self.grid_shape = None if grid_shape is None else tuple(int(x) for x in grid_shape)
        self.maps: dict[tuple[int, str, str], np.ndarray] = dict(maps or {})

    def add(self, t: int, layer: str, kind: str, W: np.ndarray) -> None:
        self.maps[(int(t), layer, kind)] = W

    def get(self, t: int, layer: str, kind: str) -> np.ndarray:
        try:
            return self.maps[(int(t), layer, kind)]
        except KeyError:
            raise DataError(f"no {kind} map recorded for layer {layer!r} at t={t}") from None

    def select(self, kind: str, layers=None) -> list[np.ndarray]:
        return [W for (t, layer, k), W in sorted(self.maps.items(), key=lambda kv: kv[0])
                if k == kind and (layers is None or layer in layers)]

    def timesteps(self) -> list[int]:
        return sorted({k[0] for k in self.maps})

    def layers(self) -> list[str]:
        return sorted({k[1] for k in self.maps})

    def merge(self, other: "AttentionRecord") -> "AttentionRecord":
        if self.tokens and other.tokens and self.tokens != other.tokens:
            raise DataError("cannot merge records of different prompts")
        self.tokens = self.tokens or other.tokens
        self.grid_shape = self.grid_shape or other.grid_shape
        self.maps.update(other.maps)
        return self

    def __len__(self):
        return len(self.maps)

    def save(self, path) -> None:
        keys = sorted(self.maps)
        meta = {"tokens": list(self.tokens), "grid_shape": self.grid_shape,
                "keys": [[t, layer, kind] for t, layer, kind in keys]}
        write_container(path, RECORD_MAGIC, meta, {f"m{i}": self.maps[k] for i, k in enumerate(keys)})

    @classmethod
    def load(cls, path) -> "AttentionRecord":
        meta, arrays = read_container(path, RECORD_MAGIC)
        maps = {(int(t), layer, kind): arrays[f"m{i}"] for i, (t, layer, kind) in enumerate(meta["keys"])}
        return cls(meta.get("tokens", ()), meta.get("grid_shape"), maps)


@dataclass
class DenoiserHooks:
    """Per-call hook bundle.

    ``attention(layer, kind, W) -> W'`` may replace any attention map (same
    shape). ``skip(layer, h) -> h'`` transforms a skip tensor. Recording of
    self maps can be switched off to save memory.
    """

    attention: Optional[Callable[[str, str, np.ndarray], np.ndarray]] = None
    skip: Optional[Callable[[str, np.ndarray], np.ndarray]] = None
    record: bool = True
    record_self: bool = True


# --------------------------------------------------------------------------
# network


def _timestep_embedding(t: float, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = float(t) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


def _init_params(cfg: DenoiserConfig) -> dict[str, torch.Tensor]:
    g = torch.Generator().manual_seed(cfg.weight_seed)
    C, D, E, A = cfg.latent_channels, cfg.hidden, cfg.text_dim, cfg.attn_dim
    s = cfg.weight_scale

    def w(*shape, fan_in):
        return torch.randn(*shape, generator=g, dtype=torch.float64) * (s / math.sqrt(fan_in))

    p = {
        "t_w": w(D, D, fan_in=D), "t_b": w(D, fan_in=D * 10),
        "in_w": w(D, C, 3, 3, fan_in=C * 9), "in_b": w(D, fan_in=D * 10),
        "down_w": w(D, D, 3, 3, fan_in=D * 9), "down_b": w(D, fan_in=D * 10),
        "dec1_w": w(D, 2 * D, 1, 1, fan_in=2 * D), "dec1_b": w(D, fan_in=D * 10),
        "dec0_w": w(D, 2 * D, 3, 3, fan_in=2 * D * 9), "dec0_b": w(D, fan_in=D * 10),
        "out_w": w(C, D, 1, 1, fan_in=D), "out_b": w(C, fan_in=C * 10),
    }
    for layer in ATTN_LAYERS:
        p[f"{layer}.self.q"] = w(D, A, fan_in=D)
        p[f"{layer}.self.k"] = w(D, A, fan_in=D)
        p[f"{layer}.self.v"] = w(D, D, fan_in=D)
        p[f"{layer}.self.o"] = w(D, D, fan_in=D)
        p[f"{layer}.cross.q"] = w(D, A, fan_in=D)
        p[f"{layer}.cross.k"] = w(E, A, fan_in=E)
        p[f"{layer}.cross.v"] = w(E, D, fan_in=E)
        p[f"{layer}.cross.o"] = w(D, D, fan_in=D)
    return p


class ToyDenoiser:
    """Frozen epsilon-predictor; ``predict_eps`` is reentrant."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), params=None):
        self.config = config
        self.params = params if params is not None else _init_params(config)
        for v in self.params.values():
            v.requires_grad_(False)

    # -- core forward -------------------------------------------------------

    def _attend(self, x, ctx, layer, kind, t, hooks, record):
        p = self.params
        q = x @ p[f"{layer}.{kind}.q"]
        k = ctx @ p[f"{layer}.{kind}.k"]
        v = ctx @ p[f"{layer}.{kind}.v"]
        W = torch.softmax(q @ k.T * (self.config.attn_sharpness / math.sqrt(q.shape[1])), dim=-1)
        if record is not None and (kind == "cross" or hooks is None or hooks.record_self):
            record.add(t, layer, kind, W.detach().numpy().copy())
        if hooks is not None and hooks.attention is not None:
            new = np.asarray(hooks.attention(layer, kind, W.detach().numpy()), dtype=np.float64)
            if new.shape != tuple(W.shape):
                raise DataError(f"injected {kind} map for {layer!r} has shape {new.shape}, expected {tuple(W.shape)}")
            W = torch.from_numpy(np.ascontiguousarray(new))
        return (W @ v) @ p[f"{layer}.{kind}.o"]

    def _attn_block(self, h, text, layer, t, hooks, record):
        V, D, Ha, Wa = h.shape
        x = h.permute(0, 2, 3, 1).reshape(V * Ha * Wa, D)
        x = x + self._attend(x, x, layer, "self", t, hooks, record)
        x = x + self._attend(x, text, layer, "cross", t, hooks, record)
        return x.reshape(V, Ha, Wa, D).permute(0, 3, 1, 2)

    def _skip(self, name, h, hooks, skips):
        if skips is not None:
            skips[name] = h.detach().numpy().copy()
        if hooks is not None and hooks.skip is not None:
            new = np.asarray(hooks.skip(name, h.detach().numpy()), dtype=np.float64)
            if new.shape != tuple(h.shape):
                raise DataError(f"skip hook for {name!r} changed shape {tuple(h.shape)} -> {new.shape}")
            h = torch.from_numpy(np.ascontiguousarray(new))
        return h

    def _forward(self, z, t, text, hooks=None, record=None, skips=None):
        p = self.params
        temb = F.silu(p["t_w"] @ _timestep_embedding(t, self.config.hidden) + p["t_b"])
        h0 = F.silu(F.conv2d(z, p["in_w"], p["in_b"], padding=1) + temb[None, :, None, None])
        x = F.avg_pool2d(h0, 2)
        x = F.silu(F.conv2d(x, p["down_w"], p["down_b"], padding=1))
        x = self._attn_block(x, text, "down", t, hooks, record)
        h1 = x
        x = self._attn_block(x, text, "mid", t, hooks, record)
        h1 = self._skip("skip1", h1, hooks, skips)
        x = F.silu(F.conv2d(torch.cat([x, h1], dim=1), p["dec1_w"], p["dec1_b"]))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        h0 = self._skip("skip0", h0, hooks, skips)
        x = F.silu(F.conv2d(torch.cat([x, h0], dim=1), p["dec0_w"], p["dec0_b"], padding=1))
        return F.conv2d(x, p["out_w"], p["out_b"])

    def _check(self, z, t, prompt):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 4 or z.shape[1] != self.config.latent_channels:
            raise DataError(f"latent shape {z.shape} does not match denoiser channels {self.config.latent_channels}")
        if z.shape[2] % 2 or z.shape[3] % 2:
            raise DataError(f"latent spatial size {z.shape[2:]} must be even")
        if not 1 <= t <= self.config.max_timestep:
            raise ConfigError(f"timestep {t} outside [1, {self.config.max_timestep}]")
        if prompt.embeddings.shape[1] != self.config.text_dim:
            raise DataError("prompt embedding width does not match denoiser text_dim")
        return torch.from_numpy(np.ascontiguousarray(z))

    # -- public -------------------------------------------------------------

    def predict_eps(self, z, t: int, prompt: PromptEmbedding, hooks: DenoiserHooks | None = None):
        """Return ``(eps, AttentionRecord, skip_features)`` for one latent."""
        zt = self._check(z, t, prompt)
        V, _, H, W = zt.shape
        record = AttentionRecord(prompt.tokens, (V, H // 2, W // 2))
        skips: dict[str, np.ndarray] = {}
        keep = record if hooks is None or hooks.record else None
        with torch.no_grad():
            eps = self._forward(zt, t, torch.from_numpy(prompt.embeddings), hooks, keep, skips)
        return eps.numpy(), record, skips

    def eps(self, z, t: int, prompt: PromptEmbedding) -> np.ndarray:
        zt = self._check(z, t, prompt)
        with torch.no_grad():
            return self._forward(zt, t, torch.from_numpy(prompt.embeddings)).numpy()

    def eps_vjp(self, z, t: int, prompt: PromptEmbedding, cotangent):
        """``(eps, J^T cotangent)`` with ``J = d eps / d z`` via reverse mode."""
        zt = self._check(z, t, prompt).clone().requires_grad_(True)
        out = self._forward(zt, t, torch.from_numpy(prompt.embeddings))
        (grad,) = torch.autograd.grad(out, zt, torch.from_numpy(np.asarray(cotangent, dtype=np.float64)))
        return out.detach().numpy(), grad.numpy()

    def conditioned(self, prompt: PromptEmbedding, hooks: DenoiserHooks | None = None):
        """``eps_model(z, t)`` bound to one prompt, as used by the diffusion core."""
        if hooks is None:
            return lambda z, t: self.eps(z, t, prompt)
        return lambda z, t: self.predict_eps(z, t, prompt, hooks)[0]

    def embed(self, text: str) -> PromptEmbedding:
        c = self.config
        return embed_prompt(text, c.text_dim, c.embed_seed, c.max_tokens)


def train_denoiser(denoiser: ToyDenoiser, latents, prompts, schedule, steps=100, lr=1e-3, seed=0):
    """Fit the epsilon objective on a few (latent, prompt) pairs.

    Optional; the editing pipeline works with untrained weights. Returns a
    new denoiser and the per-step loss trace.
    """
    rng = np.random.default_rng(seed)
    params = {k: v.detach().clone().requires_grad_(True) for k, v in denoiser.params.items()}
    trainee = ToyDenoiser(denoiser.config, params)
    for v in params.values():
        v.requires_grad_(True)
    opt = torch.optim.Adam(list(params.values()), lr=lr)
    embs = [torch.from_numpy(p.embeddings) for p in prompts]
    losses = []
    for _ in range(steps):
        i = int(rng.integers(len(latents)))
        t = int(rng.integers(1, schedule.T + 1))
        z0 = torch.from_numpy(np.asarray(latents[i], dtype=np.float64))
        noise = torch.from_numpy(rng.standard_normal(z0.shape))
        ab = float(schedule.alpha_bar[t])
        zt = math.sqrt(ab) * z0 + math.sqrt(1 - ab) * noise
        loss = torch.mean((trainee._forward(zt, t, embs[i]) - noise) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    for v in params.values():
        v.requires_grad_(False)
    return ToyDenoiser(denoiser.config, {k: v.detach() for k, v in params.items()}), losses
