"""Inference: prompt composition, classifier-free guidance, DDIM sampling,
decoding, and image emission.

Guidance follows eps_uncond + w * (eps_cond - eps_uncond). The w=0 and w=1
endpoints skip the unused forward pass entirely, which both saves time and
makes the endpoint identities hold bitwise rather than up to rounding.
"""

from typing import Optional

import numpy as np
import torch

from . import dataio
from .backbone import BackboneState, decode_latents, predict_noise
from .config import RenderConfig, SamplerConfig
from .dataio import BenchmarkCase
from .errors import DataError
from .rng import torch_generator
from .schedule import ddim_timesteps, predict_x0
from .text import LEARNABLE_SYMBOL, encode_text

X0_CLIP = 3.5  # encode_images of [0,1] images stays well inside this


def compose_prompt(case: BenchmarkCase, token_symbol: str = LEARNABLE_SYMBOL) -> str:
    """Substitute the learned token for the case's slot word, first
    occurrence, in the edit prompt."""
    words = case.edit_prompt.split()
    slot = case.edit_slot.lower()
    for i, w in enumerate(words):
        if w.lower() == slot:
            return " ".join(words[:i] + [token_symbol] + words[i + 1:])
    raise DataError(
        f"case {case.id}: slot word '{case.edit_slot}' not found in edit prompt"
    )


def compose_source_prompt(case: BenchmarkCase,
                          token_symbol: str = LEARNABLE_SYMBOL) -> str:
    """Same substitution applied to the source prompt; this is the
    training prompt ("a photo of <s*>")."""
    words = case.source_prompt.split()
    slot = case.edit_slot.lower()
    for i, w in enumerate(words):
        if w.lower() == slot:
            return " ".join(words[:i] + [token_symbol] + words[i + 1:])
    raise DataError(
        f"case {case.id}: slot word '{case.edit_slot}' not found in source prompt"
    )


def cfg_predict(state: BackboneState, views: torch.Tensor, t: int,
                cond_encoding, poses, w: float,
                predictor=None) -> torch.Tensor:
    """Guided prediction from two joint forward passes (null + cond)."""
    if w == 0.0:
        eps_u, _ = predict_noise(state, views, t, None, poses, predictor=predictor)
        return eps_u
    if w == 1.0:
        eps_c, _ = predict_noise(state, views, t, cond_encoding, poses,
                                 predictor=predictor)
        return eps_c
    eps_u, _ = predict_noise(state, views, t, None, poses, predictor=predictor)
    eps_c, _ = predict_noise(state, views, t, cond_encoding, poses,
                             predictor=predictor)
    return eps_u + w * (eps_c - eps_u)


def sample_views(state: BackboneState, prompt: str, config: SamplerConfig,
                 seed: int, poses=None, predictor=None):
    """Full DDIM chain at the configured guidance scale.

    Returns (images (4,3,H,W) in [0,1], final latents, initial latents).
    The initial noise is drawn from its own substream before the prompt is
    touched, so changing only the prompt cannot change the draw.
    """
    config.validate()
    if poses is None:
        poses = dataio.camera_ring(RenderConfig())
    gen = torch_generator(seed, "sample_init")
    shape = (len(poses), state.config.latent_channels,
             state.config.latent_resolution, state.config.latent_resolution)
    z = torch.randn(shape, generator=gen, dtype=torch.float64)
    z_init = z.clone()
    with torch.no_grad():
        enc = encode_text(prompt, state.vocab, state.text_encoder)
        ts = ddim_timesteps(state.schedule.T, config.num_steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps_hat = cfg_predict(state, z, t, enc, poses, config.guidance_scale,
                                  predictor=predictor)
            x0 = predict_x0(z, eps_hat, t, state.schedule)
            if config.clip_denoised:
                x0 = torch.clamp(x0, -X0_CLIP, X0_CLIP)
            z = state.schedule.alpha[t_prev] * x0 + state.schedule.sigma[t_prev] * eps_hat
        images = decode_latents(state, z)
    return images, z, z_init


def emit_views(images: torch.Tensor, out_dir: str) -> list:
    """Write view_{k}.png; returns the paths in view order."""
    import os

    arr = images.detach().numpy()
    dataio.save_view_set(out_dir, arr)
    return [os.path.join(out_dir, f"view_{k}.png") for k in range(arr.shape[0])]
