"""The toy multi-view noise predictor.

A small two-stage UNet over 4x32x32 latents. Each downsampled resolution
carries one text cross-attention block (recordable, per view) and one
cross-view attention block that flattens all views' spatial tokens into a
single joint attention, with a camera projection added per view before
mixing. Views therefore exchange information exactly once per resolution,
which is enough to make joint-versus-independent forward passes measurably
different while keeping a full training step fast on a CPU. The pooled
prompt encoding additionally modulates the trunk conditioning vector so
global appearance is steerable by text at every resolution, and a direct
appearance head lets the prompt's proposed latent color enter the
prediction wherever a trunk-derived map places it. The head is scaled by
-alpha_t/sigma_t (capped), which is the exact coefficient a uniform color
patch of the clean latent contributes to the noise residual, so the head
only has to learn what color and where, never the time dependence. That
gives the prompt a short, correctly scaled gradient path to the output at
every noise level.

All parameters are float64 and initialized from an explicit generator;
construction never touches torch's global RNG.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .camera import POSE_FEATURE_DIM
from .errors import ConfigError
from .schedule import NoiseSchedule

DT = torch.float64

# cap on the appearance head's -alpha/sigma scale. Below the corresponding
# timestep the input is nearly clean and local evidence beats any prompt
# prior, so the trunk is left to close the remaining color residual there.
PAINT_GAIN_CAP = 8.0


@dataclass
class AttentionRecord:
    """Text cross-attention maps per (layer, head): tensors of shape
    (V, L, h, w). For every view and spatial query location the values
    across the L token positions sum to one."""

    maps: dict = field(default_factory=dict)

    def add(self, layer: str, head: int, tensor: torch.Tensor):
        self.maps[(layer, head)] = tensor

    def view(self, v: int) -> dict:
        return {key: t[v] for key, t in self.maps.items()}

    def __len__(self):
        return len(self.maps)


class ResBlock(torch.nn.Module):
    def __init__(self, ch: int, cond_dim: int):
        super().__init__()
        self.norm1 = torch.nn.GroupNorm(8, ch, dtype=DT)
        self.conv1 = torch.nn.Conv2d(ch, ch, 3, padding=1, dtype=DT)
        self.cond = torch.nn.Linear(cond_dim, ch, dtype=DT)
        self.norm2 = torch.nn.GroupNorm(8, ch, dtype=DT)
        self.conv2 = torch.nn.Conv2d(ch, ch, 3, padding=1, dtype=DT)

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.cond(cond)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class TextAttention(torch.nn.Module):
    """Per-view cross-attention from spatial tokens to the prompt encoding."""

    def __init__(self, name: str, ch: int, text_dim: int, heads: int):
        super().__init__()
        if ch % heads != 0:
            raise ConfigError("channel count must divide by head count")
        self.name = name
        self.heads = heads
        self.norm = torch.nn.LayerNorm(ch, dtype=DT)
        self.q = torch.nn.Linear(ch, ch, dtype=DT)
        self.k = torch.nn.Linear(text_dim, ch, dtype=DT)
        self.v = torch.nn.Linear(text_dim, ch, dtype=DT)
        self.proj = torch.nn.Linear(ch, ch, dtype=DT)

    def forward(self, x, ctx, record: Optional[AttentionRecord]):
        # x: (V, ch, h, w); ctx: (L, text_dim) shared across views
        V, ch, h, w = x.shape
        L = ctx.shape[0]
        hd = ch // self.heads
        tokens = x.flatten(2).transpose(1, 2)                       # V, hw, ch
        q = self.q(self.norm(tokens)).view(V, h * w, self.heads, hd).transpose(1, 2)
        k = self.k(ctx).view(L, self.heads, hd).transpose(0, 1)     # H, L, hd
        v = self.v(ctx).view(L, self.heads, hd).transpose(0, 1)
        logits = q @ k.unsqueeze(0).transpose(-1, -2) / math.sqrt(hd)
        attn = torch.softmax(logits, dim=-1)                        # V, H, hw, L
        if record is not None:
            for head in range(self.heads):
                # (V, hw, L) -> (V, L, h, w); keep the graph, the alignment
                # loss differentiates through these maps
                m = attn[:, head].transpose(1, 2).reshape(V, L, h, w)
                record.add(self.name, head, m)
        out = (attn @ v.unsqueeze(0)).transpose(1, 2).reshape(V, h * w, ch)
        tokens = tokens + self.proj(out)
        return tokens.transpose(1, 2).reshape(V, ch, h, w)


class CrossViewAttention(torch.nn.Module):
    """Joint self-attention over all views' spatial tokens."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = torch.nn.LayerNorm(ch, dtype=DT)
        self.cam = torch.nn.Linear(POSE_FEATURE_DIM, ch, dtype=DT)
        self.qkv = torch.nn.Linear(ch, 3 * ch, dtype=DT)
        self.proj = torch.nn.Linear(ch, ch, dtype=DT)

    def forward(self, x, cam_feats, disable: bool):
        if disable:
            return x
        V, ch, h, w = x.shape
        hd = ch // self.heads
        tokens = x.flatten(2).transpose(1, 2)                   # V, hw, ch
        tokens = tokens + self.cam(cam_feats)[:, None, :]       # pose travels with view
        flat = self.norm(tokens).reshape(1, V * h * w, ch)
        q, k, v = self.qkv(flat).chunk(3, dim=-1)
        q = q.view(1, V * h * w, self.heads, hd).transpose(1, 2)
        k = k.view(1, V * h * w, self.heads, hd).transpose(1, 2)
        v = v.view(1, V * h * w, self.heads, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(1, V * h * w, ch)
        mixed = tokens.reshape(1, V * h * w, ch) + self.proj(out)
        return mixed.reshape(V, h * w, ch).transpose(1, 2).reshape(V, ch, h, w)


def timestep_features(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DT) / half)
    angles = t * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class NoisePredictor(torch.nn.Module):
    """Two-stage UNet with text, cross-view, and camera conditioning."""

    def __init__(self, latent_channels: int, base_width: int, text_dim: int,
                 time_dim: int, heads: int, num_timesteps: int,
                 generator: torch.Generator):
        super().__init__()
        c1, c2, c3 = base_width, base_width * 2, base_width * 4
        sched = NoiseSchedule(T=num_timesteps)
        gain = -torch.clamp(sched.alpha / sched.sigma.clamp(min=1e-12),
                            max=PAINT_GAIN_CAP)
        self.register_buffer("paint_gain", gain)
        self.time_dim = time_dim
        self.time_mlp = torch.nn.Sequential(
            torch.nn.Linear(time_dim, time_dim, dtype=DT),
            torch.nn.SiLU(),
            torch.nn.Linear(time_dim, time_dim, dtype=DT),
        )
        self.cam_to_time = torch.nn.Linear(POSE_FEATURE_DIM, time_dim, dtype=DT)
        # pooled-prompt modulation: joins the trunk conditioning that every
        # res block consumes, so the prompt can steer global appearance at
        # all resolutions, not only where cross-attention sits
        self.text_to_time = torch.nn.Linear(text_dim, time_dim, dtype=DT)
        self.stem = torch.nn.Conv2d(latent_channels, c1, 3, padding=1, dtype=DT)
        self.res1 = ResBlock(c1, time_dim)
        self.down1 = torch.nn.Conv2d(c1, c2, 3, stride=2, padding=1, dtype=DT)
        self.res2 = ResBlock(c2, time_dim)
        self.text2 = TextAttention("res16", c2, text_dim, heads)
        self.xview2 = CrossViewAttention(c2, heads)
        self.down2 = torch.nn.Conv2d(c2, c3, 3, stride=2, padding=1, dtype=DT)
        self.res3 = ResBlock(c3, time_dim)
        self.text3 = TextAttention("res8", c3, text_dim, heads)
        self.xview3 = CrossViewAttention(c3, heads)
        self.mid = ResBlock(c3, time_dim)
        self.up1 = torch.nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1, dtype=DT)
        self.fuse1 = torch.nn.Conv2d(2 * c2, c2, 3, padding=1, dtype=DT)
        self.res4 = ResBlock(c2, time_dim)
        self.up2 = torch.nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1, dtype=DT)
        self.fuse2 = torch.nn.Conv2d(2 * c1, c1, 3, padding=1, dtype=DT)
        self.res5 = ResBlock(c1, time_dim)
        self.out_norm = torch.nn.GroupNorm(8, c1, dtype=DT)
        self.out = torch.nn.Conv2d(c1, latent_channels, 3, padding=1, dtype=DT)
        # direct appearance route: the pooled prompt proposes a per-channel
        # latent color, a trunk-derived map places it spatially, and the
        # fixed paint_gain buffer supplies the noise-level scaling
        self.text_color = torch.nn.Linear(text_dim, latent_channels, dtype=DT)
        self.text_where = torch.nn.Conv2d(c1, latent_channels, 1, dtype=DT)
        init_parameters(self, generator)

    def forward(self, z: torch.Tensor, t: int, ctx: torch.Tensor,
                cam_feats: torch.Tensor, record_attention: bool = False,
                disable_cross_view: bool = False,
                head_taps: Optional[dict] = None):
        """z: (V, C, h, w); ctx: (L, text_dim); cam_feats: (V, pose_dim).
        Returns (eps_hat, AttentionRecord or None). V may be 1..4; the
        public 4-view contract is enforced one level up. head_taps, when
        a dict, receives the appearance head's internals (graph intact)
        so pretraining can shape them directly."""
        V = z.shape[0]
        if cam_feats.shape[0] != V:
            raise ConfigError("one camera feature row per view required")
        record = AttentionRecord() if record_attention else None
        tfeat = timestep_features(t, self.time_dim)
        cond = self.time_mlp(tfeat).unsqueeze(0) \
            + self.cam_to_time(cam_feats) \
            + self.text_to_time(ctx.mean(dim=0)).unsqueeze(0)        # V, time_dim
        x1 = self.res1(self.stem(z), cond)
        x2 = self.res2(self.down1(x1), cond)
        x2 = self.text2(x2, ctx, record)
        x2 = self.xview2(x2, cam_feats, disable_cross_view)
        x3 = self.res3(self.down2(x2), cond)
        x3 = self.text3(x3, ctx, record)
        x3 = self.xview3(x3, cam_feats, disable_cross_view)
        x3 = self.mid(x3, cond)
        u = self.fuse1(torch.cat([self.up1(x3), x2], dim=1))
        u = self.res4(u, cond)
        u = self.fuse2(torch.cat([self.up2(u), x1], dim=1))
        u = self.res5(u, cond)
        h = F.silu(self.out_norm(u))
        where = self.text_where(h)
        appearance = self.text_color(ctx.mean(dim=0))
        if head_taps is not None:
            head_taps["where"] = where
            head_taps["color"] = appearance
        paint = self.paint_gain[t] * where * appearance[None, :, None, None]
        return self.out(h) + paint, record


def init_parameters(module: torch.nn.Module, generator: torch.Generator):
    """Deterministic init from an explicit generator.

    Matrix-shaped parameters get uniform(-1/sqrt(fan_in), +1/sqrt(fan_in));
    norm weights stay 1, biases 0. Residual-closing layers (attention
    projections, second res convs, the output head) start at zero so the
    network begins as a near-identity and trains stably.
    """
    zero_suffixes = ("proj.weight", "proj.bias", "conv2.weight", "conv2.bias",
                     "out.weight", "out.bias", "text_color.weight",
                     "text_color.bias")
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if name.endswith(zero_suffixes):
                p.zero_()
            elif p.dim() >= 2:
                fan_in = p.shape[1] * (p[0][0].numel() if p.dim() > 2 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=generator)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.fill_(1.0)
