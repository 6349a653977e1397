"""Backbone assembly: vocabulary, text encoder, noise predictor, schedule,
and the latent encode/decode pair, plus checkpointing.

build_backbone runs a short generic pretraining pass over procedural class
scenes so that the text and camera pathways carry real signal before any
personalization happens. Phase 1 then has conditioning worth steering, and
the frozen post-pretraining copy gives prior preservation something to
preserve. Everything is float64 and seeded through named substreams, so a
(config, seed) pair rebuilds bitwise-identically.
"""

import copy
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import dataio
from .camera import pose_features_batch
from .config import BackboneConfig, RenderConfig
from .errors import CheckpointVersionError, ConfigError, DataError
from .rng import numpy_generator, torch_generator
from .schedule import NoiseSchedule, add_noise
from .text import (CLASS_WORDS, TextEncoder, TextEncoding, TokenVocabulary,
                   build_vocabulary, encode_text)
from .unet import NoisePredictor, init_parameters

CHECKPOINT_FORMAT_VERSION = 1
LATENT_SCALE = 4.0


@dataclass
class BackboneState:
    config: BackboneConfig
    vocab: TokenVocabulary
    text_encoder: TextEncoder
    predictor: NoisePredictor
    prior_predictor: NoisePredictor   # frozen post-pretraining copy
    schedule: NoiseSchedule
    decoder_matrix: torch.Tensor      # 3 x C, orthonormal rows
    build_seed: int


def _decoder_matrix(channels: int, generator: torch.Generator) -> torch.Tensor:
    square = torch.randn(channels, channels, generator=generator, dtype=torch.float64)
    q, _ = torch.linalg.qr(square)
    return q.T[:3].contiguous()


def encode_images(state: BackboneState, images: np.ndarray) -> torch.Tensor:
    """(V, 3, H, W) images in [0,1] -> (V, C, h, w) latents.

    Area-pool to the latent resolution, center, then project through the
    transpose of the decoder matrix (orthonormal rows, so decode is exact
    on the image subspace)."""
    x = torch.as_tensor(images, dtype=torch.float64)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DataError(f"expected (V, 3, H, W) images, got {tuple(x.shape)}")
    factor = x.shape[-1] // state.config.latent_resolution
    pooled = F.avg_pool2d(x, factor) if factor > 1 else x
    centered = pooled - 0.5
    return torch.einsum("ij,vjhw->vihw", state.decoder_matrix.T, centered) * LATENT_SCALE


def decode_latents(state: BackboneState, z: torch.Tensor,
                   image_resolution: Optional[int] = None) -> torch.Tensor:
    """(V, C, h, w) latents -> (V, 3, H, W) images in [0,1]."""
    res = image_resolution or state.config.image_resolution
    img = torch.einsum("ij,vjhw->vihw", state.decoder_matrix, z) / LATENT_SCALE + 0.5
    factor = res // img.shape[-1]
    if factor > 1:
        img = img.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)
    return torch.clamp(img, 0.0, 1.0)


def forward_views(predictor: NoisePredictor, z: torch.Tensor, t: int,
                  encoding: TextEncoding, poses, record_attention: bool = False,
                  disable_cross_view: bool = False, head_taps=None):
    """View-count-flexible forward used by training; V may be 1..4."""
    cam = pose_features_batch(poses)
    return predictor(z, t, encoding.sequence_embedding, cam,
                     record_attention=record_attention,
                     disable_cross_view=disable_cross_view,
                     head_taps=head_taps)


def predict_noise(state: BackboneState, views: torch.Tensor, t: int,
                  cond, poses, record_attention: bool = False,
                  predictor: Optional[NoisePredictor] = None):
    """The public 4-view joint prediction contract.

    cond may be a TextEncoding, a prompt string, or None for the null
    condition. Returns (eps_hat, record|None).
    """
    if views.shape[0] != 4 or len(poses) != 4:
        raise ConfigError(
            f"the backbone is fixed at 4 views, got {views.shape[0]} views "
            f"and {len(poses)} poses"
        )
    state.schedule.check_t(t)
    if cond is None or isinstance(cond, str):
        cond = encode_text(cond, state.vocab, state.text_encoder)
    return forward_views(predictor or state.predictor, views, t, cond, poses,
                         record_attention=record_attention)


def parameter_checksum(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(p.detach().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# build + pretraining

_BUILD_CACHE: dict = {}


def _config_key(config: BackboneConfig) -> str:
    from dataclasses import asdict
    return json.dumps(asdict(config), sort_keys=True)


def build_backbone(config: Optional[BackboneConfig] = None, seed: int = 0,
                   cache: bool = True, progress: bool = False) -> BackboneState:
    """Deterministically construct and pretrain the toy backbone.

    The returned state is cached per (config, seed) and shared; callers
    that intend to train must take clone_state() first.
    """
    config = config or BackboneConfig()
    config.validate()
    key = (_config_key(config), int(seed))
    if cache and key in _BUILD_CACHE:
        return _BUILD_CACHE[key]

    vocab = build_vocabulary(config.text_dim, torch_generator(seed, "vocab"))
    text_encoder = TextEncoder(config.text_dim, config.max_prompt_len,
                               heads=config.attention_heads).to(torch.float64)
    init_parameters(text_encoder, torch_generator(seed, "text_encoder"))
    predictor = NoisePredictor(config.latent_channels, config.base_width,
                               config.text_dim, config.time_dim,
                               config.attention_heads,
                               config.num_train_timesteps,
                               torch_generator(seed, "predictor"))
    state = BackboneState(
        config=config,
        vocab=vocab,
        text_encoder=text_encoder,
        predictor=predictor,
        prior_predictor=predictor,  # replaced after pretraining
        schedule=NoiseSchedule(T=config.num_train_timesteps),
        decoder_matrix=_decoder_matrix(config.latent_channels,
                                       torch_generator(seed, "decoder")),
        build_seed=int(seed),
    )
    _pretrain(state, seed, progress)

    text_encoder.requires_grad_(False)
    vocab.refresh_snapshot()
    prior = copy.deepcopy(predictor)
    prior.requires_grad_(False)
    state.prior_predictor = prior
    if cache:
        _BUILD_CACHE[key] = state
    return state


# subject cells are a small fraction of the frame; without extra weight the
# color part of the residual is a rounding error next to the background and
# the noise floor, and the optimizer never routes it through the prompt
_SUBJECT_WEIGHT = 6.0
# the prompt-facing parameters see a word-specific gradient only on the
# steps that draw that word, so they learn at a fraction of the trunk's
# effective rate unless compensated
_TEXT_LR_MULT = 3.0
_TEXT_PARAM_KEYS = ("text_color", "text_where", "text_to_time", "text2", "text3")
# loss scale min(1, gamma/SNR_t): keeps the per-step gradient magnitude flat
# in t. Low-t draws otherwise carry gradients amplified by the step's
# signal-to-noise ratio, and a handful of them can whipsaw the optimizer
# state badly enough to collapse the trunk
_MINSNR_GAMMA = 5.0
# weights of the head-pinning terms: text_color(pooled prompt) is tied to
# the subject's mean latent color, and text_where(features) to the latent
# mask. Together with the analytic head scale they fully determine the
# appearance route, which is what guarantees the prompt ends up
# load-bearing for subject color: left to the reconstruction loss alone,
# the trunk wins the race by reading color off the noisy input (spatial
# pooling over the subject recovers it up to t ~ 900) and the prompt route
# settles at a few percent of the needed amplitude
_AUX_COLOR_WEIGHT = 1.0
_AUX_WHERE_WEIGHT = 1.0


def _pretrain(state: BackboneState, seed: int, progress: bool):
    cfg = state.config
    if cfg.pretrain_steps <= 0:
        return
    render = RenderConfig(image_resolution=cfg.image_resolution)
    poses = dataio.camera_ring(render)
    named = sorted(state.predictor.named_parameters(), key=lambda kv: kv[0])
    slow = [p for n, p in named if not any(k in n for k in _TEXT_PARAM_KEYS)]
    fast = [p for n, p in named if any(k in n for k in _TEXT_PARAM_KEYS)] \
        + list(state.text_encoder.parameters()) + [state.vocab.embeddings]
    params = slow + fast
    opt = torch.optim.AdamW(
        [{"params": slow, "lr": cfg.pretrain_lr},
         {"params": fast, "lr": cfg.pretrain_lr * _TEXT_LR_MULT}],
        betas=(0.9, 0.999), weight_decay=1e-2)
    snr = (state.schedule.alpha / state.schedule.sigma.clamp(min=1e-12)) ** 2
    for step in range(cfg.pretrain_steps):
        rng = numpy_generator(seed, "pretrain", step)
        gen = torch_generator(seed, "pretrain", step)
        word = CLASS_WORDS[int(rng.integers(len(CLASS_WORDS)))]
        span = dataio.sample_eye_span(rng)
        scene = dataio.class_scene_params(word, span, rng,
                                          front_azimuth_deg=render.azimuth_start_deg)
        images, masks = dataio.render_scene_views(scene, poses,
                                                  render.image_resolution)
        z0 = encode_images(state, images)
        latent_masks = torch.from_numpy(np.stack(
            [dataio.downsample_mask(m, cfg.latent_resolution)[0] for m in masks]
        ))[:, None]
        t = int(rng.integers(1, state.schedule.T + 1))
        eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
        z_t = add_noise(z0, t, eps, state.schedule)
        dropped = rng.uniform() < cfg.pretrain_null_fraction
        prompt = None if dropped else f"a photo of {word}"
        enc = encode_text(prompt, state.vocab, state.text_encoder,
                          embedding_grad="all")
        taps: dict = {}
        eps_hat, _ = forward_views(state.predictor, z_t, t, enc, poses,
                                   head_taps=taps)
        # null-condition steps train the unconditional path on structure
        # only; leaving them subject-weighted would pay the trunk to read
        # the subject's color off the input, competing with the prompt route
        weights = torch.ones_like(latent_masks) if dropped \
            else 1.0 + _SUBJECT_WEIGHT * latent_masks
        scale = min(1.0, _MINSNR_GAMMA / float(snr[t]))
        loss = scale * ((eps_hat - eps) ** 2 * weights).sum() \
            / (weights.sum() * z0.shape[1])
        loss = loss + _AUX_WHERE_WEIGHT * F.mse_loss(
            taps["where"], latent_masks.expand_as(taps["where"]))
        if not dropped:
            # pin the prompt's color proposal to the subject's actual mean
            # latent color for this scene; the analytic head scale then
            # makes the proposal correct at every noise level it reaches
            target = (z0 * latent_masks).sum(dim=(0, 2, 3)) \
                / latent_masks.sum().clamp(min=1.0)
            loss = loss + _AUX_COLOR_WEIGHT * F.mse_loss(taps["color"], target)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        if progress and (step % 100 == 0 or step == cfg.pretrain_steps - 1):
            print(f"[pretrain] step {step:4d} t {t:4d} loss {loss.item():.4f}")


def clone_state(state: BackboneState) -> BackboneState:
    """Independent deep copy; training mutates state in place, so cached
    builds must be cloned first."""
    return copy.deepcopy(state)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: BackboneState, path: str, extra_meta: Optional[dict] = None):
    """Single-archive checkpoint; deterministic bytes for identical states."""
    from dataclasses import asdict

    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(state.config),
        "build_seed": state.build_seed,
        "tokenizer_map": state.vocab.tokenizer_map,
        "learnable_indices": sorted(state.vocab.learnable_indices),
        "latent_scale": LATENT_SCALE,
        "extra": extra_meta or {},
    }
    arrays = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                              dtype=np.uint8),
        "vocab_embeddings": state.vocab.embeddings.detach().numpy(),
        "vocab_frozen_snapshot": state.vocab.frozen_snapshot.numpy(),
        "decoder_matrix": state.decoder_matrix.numpy(),
    }
    for prefix, module in (("predictor", state.predictor),
                           ("prior", state.prior_predictor),
                           ("text_encoder", state.text_encoder)):
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **dict(sorted(arrays.items())))


def load_checkpoint(path: str) -> BackboneState:
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    except Exception as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}")
    if "meta" not in archive:
        raise CheckpointVersionError(f"{path}: not a recognized checkpoint (no meta)")
    meta = json.loads(bytes(archive["meta"]).decode("utf-8"))
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version} unsupported; "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    config = BackboneConfig(**meta["config"])
    vocab = TokenVocabulary(
        embeddings=torch.from_numpy(archive["vocab_embeddings"].copy()).requires_grad_(True),
        frozen_snapshot=torch.from_numpy(archive["vocab_frozen_snapshot"].copy()),
        tokenizer_map={k: int(v) for k, v in meta["tokenizer_map"].items()},
        learnable_indices=set(meta["learnable_indices"]),
    )
    text_encoder = TextEncoder(config.text_dim, config.max_prompt_len,
                               heads=config.attention_heads).to(torch.float64)
    predictor = NoisePredictor(config.latent_channels, config.base_width,
                               config.text_dim, config.time_dim,
                               config.attention_heads, config.num_train_timesteps,
                               torch_generator(0, "load"))
    prior = NoisePredictor(config.latent_channels, config.base_width,
                           config.text_dim, config.time_dim,
                           config.attention_heads, config.num_train_timesteps,
                           torch_generator(0, "load"))

    def load_module(prefix, module):
        sd = {}
        want = set(module.state_dict().keys())
        for key in archive.files:
            if key.startswith(prefix + "/"):
                sd[key[len(prefix) + 1:]] = torch.from_numpy(archive[key].copy())
        if set(sd.keys()) != want:
            raise CheckpointVersionError(
                f"{path}: {prefix} parameter set does not match this build"
            )
        module.load_state_dict(sd)

    load_module("predictor", predictor)
    load_module("prior", prior)
    load_module("text_encoder", text_encoder)
    text_encoder.requires_grad_(False)
    prior.requires_grad_(False)
    return BackboneState(
        config=config, vocab=vocab, text_encoder=text_encoder,
        predictor=predictor, prior_predictor=prior,
        schedule=NoiseSchedule(T=config.num_train_timesteps),
        decoder_matrix=torch.from_numpy(archive["decoder_matrix"].copy()),
        build_seed=int(meta["build_seed"]),
    )


def checkpoint_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
