"""Training-free text-driven editing of multi-view Gaussian splat grids.

A desk-scale engine: edit-friendly DDPM inversion in a latent space,
attention injection between a source and an edit branch, masked latent
blending, geometry-regularised guidance, frequency annealing of skip
features, a CPU splat rasterizer and an iterative render/enhance/refit loop.
The diffusion backbone and the latent codec are small deterministic
stand-ins with the same interfaces as pretrained models.
"""

from .codec import IdentityCodec, LatentTensor, OrthogonalCodec, make_codec
from .denoiser import AttentionRecord, DenoiserConfig, PromptEmbedding, ToyDenoiser, embed_prompt
from .diffusion import NoiseSchedule, NoiseTrajectory, forward_invert, make_schedule, replay
from .errors import ConfigError, DataError, DivergenceError, NumericalError, SplatEditError
from .pipeline import EditConfig, EditResult, identity_config, load_config, run_edit
from .render import psnr, rasterize, render_views
from .splat import Camera, CameraRig, SplatGrid, load_grid, make_demo_asset, save_grid, validate_grid

__all__ = [
    "AttentionRecord", "Camera", "CameraRig", "ConfigError", "DataError", "DenoiserConfig", "DivergenceError",
    "EditConfig", "EditResult", "IdentityCodec", "LatentTensor", "NoiseSchedule", "NoiseTrajectory",
    "NumericalError", "OrthogonalCodec", "PromptEmbedding", "SplatEditError", "SplatGrid", "ToyDenoiser",
    "embed_prompt", "forward_invert", "identity_config", "load_config", "load_grid", "make_codec",
    "make_demo_asset", "make_schedule", "psnr", "rasterize", "render_views", "replay", "run_edit", "save_grid",
    "validate_grid",
]

__version__ = "0.1.0"
