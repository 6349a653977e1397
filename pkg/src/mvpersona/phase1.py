"""Phase 1: textual inversion.

Only the learnable token row moves. Each step draws one shared timestep
and per-view noise, runs the joint forward with attention recording, and
optimizes

    L = masked denoising loss + mu * attention alignment loss,

then restores every non-learnable vocabulary row bitwise from the frozen
snapshot. The noise predictor itself is verified unchanged.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import BackboneState, forward_views, parameter_checksum
from .config import Phase1Config
from .errors import ConfigError, DataError, RunFailure
from .rng import substream_seed
from .schedule import add_noise
from .text import encode_text
from .unet import AttentionRecord


@dataclass
class TrainBatch:
    """One fixed multi-view training batch: clean latents, latent-space
    masks, the poses they were rendered from, and the training prompt."""

    z0: torch.Tensor          # V, C, h, w
    masks: torch.Tensor       # V, h, w in {0, 1}
    poses: list
    prompt: str

    def __post_init__(self):
        if self.z0.shape[0] != self.masks.shape[0] or self.z0.shape[0] != len(self.poses):
            raise DataError("batch views, masks, and poses must align")


def masked_diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor,
                          masks: torch.Tensor) -> torch.Tensor:
    """Mean over views of the foreground-normalized masked squared error.

    Per view: ||(eps - eps_hat) * m||^2 / (C * |m|), where |m| counts
    foreground cells. A view with an empty mask contributes zero; if every
    mask is empty the loss is undefined and we refuse.
    """
    if eps.shape != eps_hat.shape:
        raise DataError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    if masks.shape[0] != eps.shape[0] or masks.shape[-2:] != eps.shape[-2:]:
        raise DataError("masks must align with the per-view spatial grid")
    counts = masks.sum(dim=(-2, -1))
    if float(counts.sum()) == 0.0:
        raise DataError("all masks empty: masked loss undefined")
    m = masks.unsqueeze(1)  # broadcast over channels
    per_view_sq = (((eps - eps_hat) * m) ** 2).sum(dim=(1, 2, 3))
    denom = (counts * eps.shape[1]).clamp(min=1.0)
    per_view = per_view_sq / denom
    return per_view.mean()


def plain_diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    # ablation arm: the same objective with the mask dropped
    return F.mse_loss(eps_hat, eps)


def aggregate_attention(record: dict, token_positions: set,
                        target_resolution: int) -> torch.Tensor:
    """Average one view's cross-attention maps over layers, heads, and the
    listed token positions, after bilinear-resizing each map to the target
    resolution; max-normalize the result to [0, 1]."""
    if not record:
        raise DataError("attention record is empty")
    if not token_positions:
        raise DataError("no token positions to aggregate")
    pieces = []
    for (_layer, _head), maps in sorted(record.items(), key=lambda kv: kv[0]):
        L = maps.shape[0]
        for pos in sorted(token_positions):
            if not 0 <= pos < L:
                raise DataError(f"token position {pos} outside sequence length {L}")
            m = maps[pos].unsqueeze(0).unsqueeze(0)
            if m.shape[-1] != target_resolution:
                m = F.interpolate(m, size=(target_resolution, target_resolution),
                                  mode="bilinear", align_corners=False)
            pieces.append(m[0, 0])
    agg = torch.stack(pieces).mean(dim=0)
    peak = agg.max()
    if float(peak.detach()) <= 0.0:
        raise DataError("aggregated attention is identically zero")
    return agg / peak


def attention_alignment_loss(A: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between the aggregated map and the mask."""
    if A.shape != mask.shape:
        raise DataError(f"shape mismatch: {tuple(A.shape)} vs {tuple(mask.shape)}")
    return ((A - mask) ** 2).mean()


def attention_loss_over_views(record: AttentionRecord, token_positions: set,
                              masks: torch.Tensor) -> torch.Tensor:
    V = masks.shape[0]
    res = masks.shape[-1]
    terms = [attention_alignment_loss(
        aggregate_attention(record.view(v), token_positions, res), masks[v])
        for v in range(V)]
    return torch.stack(terms).mean()


@dataclass
class Phase1State:
    """Carries the optimizer across steps."""

    backbone: BackboneState
    optimizer: torch.optim.AdamW
    root_seed: int


def make_phase1_state(backbone: BackboneState, config: Phase1Config,
                      root_seed: int) -> Phase1State:
    if not backbone.vocab.learnable_indices:
        raise ConfigError("phase 1 requires a marked learnable token")
    opt = torch.optim.AdamW([backbone.vocab.embeddings], lr=config.learning_rate,
                            betas=(config.adam_beta1, config.adam_beta2),
                            weight_decay=config.weight_decay)
    return Phase1State(backbone=backbone, optimizer=opt, root_seed=root_seed)


def ti_step(ph: Phase1State, batch: TrainBatch, config: Phase1Config,
            step_index: int, use_attention_loss: bool = True,
            use_masked_loss: bool = True) -> dict:
    """One token-only optimization step; returns the loss breakdown."""
    state = ph.backbone
    enc = encode_text(batch.prompt, state.vocab, state.text_encoder,
                      embedding_grad="token")
    if not enc.learnable_positions:
        raise DataError(
            f"prompt '{batch.prompt}' contains no learnable token; "
            "the step would not touch it"
        )
    seed = substream_seed(ph.root_seed, "phase1", step_index)
    gen = torch.Generator().manual_seed(seed)
    t = int(torch.randint(1, state.schedule.T + 1, (), generator=gen))
    eps = torch.randn(batch.z0.shape, generator=gen, dtype=torch.float64)
    z_t = add_noise(batch.z0, t, eps, state.schedule)
    eps_hat, record = forward_views(state.predictor, z_t, t, enc, batch.poses,
                                    record_attention=True)
    if use_masked_loss:
        loss_data = masked_diffusion_loss(eps, eps_hat, batch.masks)
    else:
        loss_data = plain_diffusion_loss(eps, eps_hat)
    loss_attn = attention_loss_over_views(record, enc.learnable_positions,
                                          batch.masks)
    mu = config.attention_weight if use_attention_loss else 0.0
    # mu == 0: the attention term is reported but kept out of the update
    total = loss_data + mu * loss_attn if mu > 0 else loss_data
    ph.optimizer.zero_grad(set_to_none=True)
    total.backward()
    ph.optimizer.step()
    state.vocab.restore_frozen_rows()
    return {
        "step": step_index,
        "t": t,
        "loss_masked": float(loss_data.detach()),
        "loss_attn": float(loss_attn.detach()),
        "lr": config.learning_rate,
        "seed": seed,
    }


def run_phase1(state: BackboneState, batch: TrainBatch, config: Phase1Config,
               root_seed: int, use_attention_loss: bool = True,
               use_masked_loss: bool = True, log_file=None) -> list:
    """Run config.steps token-only steps; the predictor must come out
    checksum-identical."""
    config.validate()
    before = parameter_checksum(state.predictor)
    # freeze predictor parameters for the duration: gradients are neither
    # needed nor wanted, and backward gets measurably cheaper
    state.predictor.requires_grad_(False)
    ph = make_phase1_state(state, config, root_seed)
    log = []
    try:
        for step in range(config.steps):
            entry = ti_step(ph, batch, config, step,
                            use_attention_loss=use_attention_loss,
                            use_masked_loss=use_masked_loss)
            log.append(entry)
            if log_file is not None:
                import json
                log_file.write(json.dumps(entry) + "\n")
    finally:
        state.predictor.requires_grad_(True)
    after = parameter_checksum(state.predictor)
    if before != after:
        raise RunFailure("phase 1 mutated the noise predictor; this is a bug")
    return log
