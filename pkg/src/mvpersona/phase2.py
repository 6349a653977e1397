"""Phase 2: joint multi-view fine-tuning with prior preservation.

The full predictor and the learnable token train together on

    L = sum_v masked per-view loss (joint forward) + lambda * prior loss,

where the prior term is a plain unmasked MSE on class samples generated
once, up front, by the frozen post-pretraining model. The attention
alignment loss is not applied here. The vocabulary restore rule stays in
force, so non-learnable rows never drift.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .backbone import BackboneState, forward_views
from .config import Phase2Config, SamplerConfig
from .errors import ConfigError, DataError
from .phase1 import TrainBatch, masked_diffusion_loss
from .rng import substream_seed
from .sampler import sample_views
from .schedule import add_noise
from .text import encode_text

# class-prior samples are drawn without guidance exaggeration; one forward
# pass per DDIM step keeps prior generation cheap
PRIOR_SAMPLER = SamplerConfig(guidance_scale=1.0, num_steps=30)


@dataclass
class PriorSet:
    latents: list          # each (V, C, h, w), generated by the frozen model
    class_prompt: str
    poses: list
    seed: int

    def batch(self, step: int) -> torch.Tensor:
        return self.latents[step % len(self.latents)]


def generate_prior_set(state: BackboneState, class_prompt: str, size: int,
                       seed: int) -> PriorSet:
    """Sample `size` four-view latent sets from the frozen predictor."""
    if size < 1:
        raise ConfigError(f"prior_set_size must be >= 1, got {size}")
    import copy

    from . import dataio
    from .config import RenderConfig

    poses = dataio.camera_ring(RenderConfig())
    latents = []
    for k in range(size):
        _, z, _ = sample_views(state, class_prompt, PRIOR_SAMPLER,
                               substream_seed(seed, "prior", k), poses=poses,
                               predictor=state.prior_predictor)
        latents.append(z.detach())
    return PriorSet(latents=latents, class_prompt=class_prompt, poses=poses,
                    seed=seed)


def prior_preservation_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Plain MSE over the full latent, no masking."""
    if eps.shape != eps_hat.shape:
        raise DataError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return F.mse_loss(eps_hat, eps)


def multiview_joint_loss(predictor, z_t: torch.Tensor, t: int, encoding,
                         masks: torch.Tensor, poses, eps: torch.Tensor,
                         use_masked_loss: bool = True,
                         disable_cross_view: bool = False):
    """One joint forward pass; loss is the SUM over views of the per-view
    foreground-normalized masked error (contrast with the phase-1 mean).

    Returns (total, per_view_terms, eps_hat).
    """
    if z_t.shape[0] != masks.shape[0] or len(poses) != z_t.shape[0]:
        raise DataError("view count mismatch between latents, masks, and poses")
    eps_hat, _ = forward_views(predictor, z_t, t, encoding, poses,
                               disable_cross_view=disable_cross_view)
    per_view = []
    for v in range(z_t.shape[0]):
        if use_masked_loss:
            count = float(masks[v].sum())
            if count == 0.0:
                per_view.append(torch.zeros((), dtype=torch.float64))
                continue
            m = masks[v].unsqueeze(0)
            sq = (((eps[v] - eps_hat[v]) * m) ** 2).sum()
            per_view.append(sq / (count * eps.shape[1]))
        else:
            per_view.append(((eps[v] - eps_hat[v]) ** 2).mean())
    total = torch.stack(per_view).sum()
    return total, per_view, eps_hat


@dataclass
class Phase2State:
    backbone: BackboneState
    optimizer: torch.optim.AdamW
    prior_set: Optional[PriorSet]
    root_seed: int


def make_phase2_state(backbone: BackboneState, config: Phase2Config,
                      prior_set: Optional[PriorSet], root_seed: int) -> Phase2State:
    if not backbone.vocab.learnable_indices:
        raise ConfigError("phase 2 requires a marked learnable token")
    if config.prior_weight > 0 and prior_set is None:
        raise ConfigError("prior_weight > 0 requires a prior set")
    params = list(backbone.predictor.parameters()) + [backbone.vocab.embeddings]
    opt = torch.optim.AdamW(params, lr=config.learning_rate,
                            betas=(config.adam_beta1, config.adam_beta2),
                            weight_decay=config.weight_decay)
    return Phase2State(backbone=backbone, optimizer=opt, prior_set=prior_set,
                       root_seed=root_seed)


def ft_step(ph: Phase2State, batch: TrainBatch, config: Phase2Config,
            step_index: int, use_masked_loss: bool = True) -> dict:
    """One fine-tuning step on data + prior; restores frozen vocab rows."""
    state = ph.backbone
    enc = encode_text(batch.prompt, state.vocab, state.text_encoder,
                      embedding_grad="token")
    seed = substream_seed(ph.root_seed, "phase2", step_index)
    gen = torch.Generator().manual_seed(seed)
    t = int(torch.randint(1, state.schedule.T + 1, (), generator=gen))
    eps = torch.randn(batch.z0.shape, generator=gen, dtype=torch.float64)
    z_t = add_noise(batch.z0, t, eps, state.schedule)
    total_data, per_view, _ = multiview_joint_loss(
        state.predictor, z_t, t, enc, batch.masks, batch.poses, eps,
        use_masked_loss=use_masked_loss)

    loss_prior = None
    total = total_data
    if config.prior_weight > 0:
        if ph.prior_set is None:
            raise ConfigError("prior batch missing while prior_weight > 0")
        prior_z0 = ph.prior_set.batch(step_index)
        pgen = torch.Generator().manual_seed(
            substream_seed(ph.root_seed, "phase2", step_index, "prior"))
        t_pr = int(torch.randint(1, state.schedule.T + 1, (), generator=pgen))
        eps_pr = torch.randn(prior_z0.shape, generator=pgen, dtype=torch.float64)
        z_t_pr = add_noise(prior_z0, t_pr, eps_pr, state.schedule)
        enc_pr = encode_text(ph.prior_set.class_prompt, state.vocab,
                             state.text_encoder, embedding_grad="token")
        eps_hat_pr, _ = forward_views(state.predictor, z_t_pr, t_pr, enc_pr,
                                      ph.prior_set.poses)
        loss_prior = prior_preservation_loss(eps_pr, eps_hat_pr)
        total = total_data + config.prior_weight * loss_prior

    ph.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(
            [p for g in ph.optimizer.param_groups for p in g["params"]],
            config.grad_clip)
    ph.optimizer.step()
    state.vocab.restore_frozen_rows()
    return {
        "step": step_index,
        "t": t,
        "loss_masked": float(total_data.detach()),
        "loss_prior": None if loss_prior is None else float(loss_prior.detach()),
        "per_view": [float(x.detach()) for x in per_view],
        "lr": config.learning_rate,
        "seed": seed,
    }


def run_phase2(state: BackboneState, batch: TrainBatch, config: Phase2Config,
               root_seed: int, class_prompt: str,
               use_masked_loss: bool = True,
               prior_set: Optional[PriorSet] = None, log_file=None) -> list:
    """Fine-tune for config.steps; the prior set is generated once up front
    from the frozen model (unless supplied) and cycled round-robin."""
    config.validate()
    if config.prior_weight > 0 and prior_set is None:
        prior_set = generate_prior_set(state, class_prompt,
                                       config.prior_set_size,
                                       substream_seed(root_seed, "prior_set"))
    ph = make_phase2_state(state, config, prior_set, root_seed)
    log = []
    for step in range(config.steps):
        entry = ft_step(ph, batch, config, step, use_masked_loss=use_masked_loss)
        log.append(entry)
        if log_file is not None:
            import json
            log_file.write(json.dumps(entry) + "\n")
    return log
