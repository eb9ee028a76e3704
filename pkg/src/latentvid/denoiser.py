"""Noise-prediction network: a factorized space-time 3D UNet.

Convolutions are space-only (kernel 1x3x3) and down/upsampling is spatial
only, so time is mixed exclusively by temporal (or joint) attention. Group
normalization is computed per frame and modulated by the timestep embedding.
"""
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .errors import ConfigError, ShapeError


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    base_width: int = 64
    channel_mult: tuple = (1, 2, 2)
    num_res_blocks: int = 1
    attention_levels: tuple = None
    temporal_levels: tuple = None
    heads: int = 4
    temb_dim: int = 256
    attention_mode: str = "factorized"
    temporal_attention: bool = True
    max_frames: int = 32
    groups: int = 8

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        n = len(self.channel_mult)
        if self.attention_levels is None:
            # every level below full resolution
            self.attention_levels = tuple(range(1, n)) if n > 1 else (0,)
        self.attention_levels = tuple(int(v) for v in self.attention_levels)
        if self.temporal_levels is None:
            # the two lowest-resolution levels
            self.temporal_levels = tuple(range(max(n - 2, 0), n))
        self.temporal_levels = tuple(int(v) for v in self.temporal_levels)
        if self.temb_dim % 2:
            raise ConfigError(f"temb_dim must be even, got {self.temb_dim}")
        if self.base_width % 2:
            raise ConfigError("base_width must be even (it sizes the sinusoidal embedding)")
        if self.attention_mode not in ("factorized", "joint"):
            raise ConfigError(f"attention_mode must be factorized or joint, got {self.attention_mode!r}")
        for lvl in self.attention_levels + self.temporal_levels:
            if not 0 <= lvl < n:
                raise ConfigError(f"attention level {lvl} outside 0..{n - 1}")
        for m in self.channel_mult:
            ch = self.base_width * m
            if ch % _groups(ch, self.groups) or ch % self.heads:
                raise ConfigError(f"width {ch} incompatible with groups/heads")

    @property
    def in_channels(self):
        return self.latent_channels + 1

    def to_dict(self):
        d = asdict(self)
        for key in ("channel_mult", "attention_levels", "temporal_levels"):
            d[key] = list(d[key])
        return d


def _groups(ch, groups):
    return min(groups, ch)


def sinusoidal_embedding(t, dim):
    """``[sin(t f_i), cos(t f_i)]`` with ``f_i = 10000^(-i / (dim/2))``."""
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimestepEmbedding(nn.Module):
    def __init__(self, freq_dim, temb_dim):
        super().__init__()
        self.freq_dim = freq_dim
        self.lin1 = nn.Linear(freq_dim, temb_dim)
        self.lin2 = nn.Linear(temb_dim, temb_dim)

    def forward(self, t):
        emb = sinusoidal_embedding(t, self.freq_dim).to(self.lin1.weight.dtype)
        return self.lin2(F.silu(self.lin1(emb)))


def timestep_embedding(t, dim, projection=None):
    """Sinusoidal features of ``t``, passed through ``projection`` when given."""
    emb = sinusoidal_embedding(t, dim)
    if projection is None:
        return emb
    return projection.lin2(F.silu(projection.lin1(emb.to(projection.lin1.weight.dtype))))


def frame_group_norm(x, groups, eps=1e-5):
    """Group norm over (channels-in-group, H, W) separately for every frame."""
    b, c, l = x.shape[:3]
    y = rearrange(x, "b c l h w -> (b l) c h w")
    y = F.group_norm(y, groups, eps=eps)
    return rearrange(y, "(b l) c h w -> b c l h w", b=b, l=l)


class AdaGroupNorm(nn.Module):
    """Per-frame group norm followed by ``(1 + scale) x + shift`` from the timestep embedding."""

    def __init__(self, ch, temb_dim, groups=8):
        super().__init__()
        self.groups = _groups(ch, groups)
        if ch % self.groups:
            raise ConfigError(f"{ch} channels not divisible into {self.groups} groups")
        self.proj = nn.Linear(temb_dim, 2 * ch)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, temb):
        x = frame_group_norm(x, self.groups)
        scale, shift = self.proj(temb).chunk(2, dim=1)
        view = (x.shape[0], x.shape[1]) + (1,) * (x.ndim - 2)
        return x * (1 + scale.reshape(view)) + shift.reshape(view)


def adaptive_group_norm(norm, features, temb):
    return norm(features, temb)


def space_conv(cin, cout):
    return nn.Conv3d(cin, cout, (1, 3, 3), padding=(0, 1, 1))


def _zero(module):
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups):
        super().__init__()
        self.norm1 = AdaGroupNorm(cin, temb_dim, groups)
        self.conv1 = space_conv(cin, cout)
        self.norm2 = AdaGroupNorm(cout, temb_dim, groups)
        self.conv2 = _zero(space_conv(cout, cout))
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x, temb)))
        h = self.conv2(F.silu(self.norm2(h, temb)))
        return self.skip(x) + h


def multihead_attention(tokens, to_qkv, heads, return_weights=False):
    """Self-attention over the token axis of ``(N, n_tokens, C)``."""
    q, k, v = to_qkv(tokens).chunk(3, dim=-1)
    q, k, v = (rearrange(a, "n s (h d) -> n h s d", h=heads) for a in (q, k, v))
    scale = q.shape[-1] ** -0.5
    weights = torch.softmax(torch.einsum("nhsd,nhtd->nhst", q * scale, k), dim=-1)
    out = rearrange(torch.einsum("nhst,nhtd->nhsd", weights, v), "n h s d -> n s (h d)")
    return (out, weights) if return_weights else out


class AttentionBlock(nn.Module):
    """Residual multi-head self-attention along one token arrangement.

    ``spatial``: tokens are the H*W positions of each frame. ``temporal``: the
    L frames at each position, with learned absolute frame embeddings.
    ``joint``: all L*H*W positions together.
    """

    def __init__(self, ch, temb_dim, heads, mode, groups=8, max_frames=32):
        super().__init__()
        if mode not in ("spatial", "temporal", "joint"):
            raise ValueError(mode)
        self.mode = mode
        self.heads = heads
        self.norm = AdaGroupNorm(ch, temb_dim, groups)
        self.to_qkv = nn.Linear(ch, 3 * ch)
        self.proj_out = _zero(nn.Linear(ch, ch))
        if mode == "temporal":
            self.frame_emb = nn.Parameter(torch.randn(max_frames, ch) * 0.02)
        self.last_weights = None

    def tokens(self, h):
        b, c, l, hh, ww = h.shape
        if self.mode == "spatial":
            return rearrange(h, "b c l h w -> (b l) (h w) c")
        if self.mode == "temporal":
            if l > self.frame_emb.shape[0]:
                raise ShapeError(f"{l} frames exceed max_frames={self.frame_emb.shape[0]}")
            return rearrange(h, "b c l h w -> (b h w) l c") + self.frame_emb[:l]
        return rearrange(h, "b c l h w -> b (l h w) c")

    def untokens(self, out, shape):
        b, c, l, hh, ww = shape
        if self.mode == "spatial":
            return rearrange(out, "(b l) (h w) c -> b c l h w", b=b, l=l, h=hh)
        if self.mode == "temporal":
            return rearrange(out, "(b h w) l c -> b c l h w", b=b, h=hh, w=ww)
        return rearrange(out, "b (l h w) c -> b c l h w", l=l, h=hh, w=ww)

    def forward(self, x, temb, keep_weights=False):
        h = self.norm(x, temb)
        out, weights = multihead_attention(self.tokens(h), self.to_qkv, self.heads, True)
        if keep_weights:
            self.last_weights = weights.detach()
        return x + self.untokens(self.proj_out(out), x.shape)

    def score_entries(self, shape):
        """Number of attention-matrix entries (per head) for an input of ``shape``."""
        b, c, l, hh, ww = shape
        if self.mode == "spatial":
            return b * l * (hh * ww) ** 2
        if self.mode == "temporal":
            return b * hh * ww * l**2
        return b * (l * hh * ww) ** 2


def spatial_attention(block, features, temb):
    return block(features, temb)


def temporal_attention(block, features, temb):
    return block(features, temb)


def joint_attention(block, features, temb):
    return block(features, temb)


class UNetLevel(nn.Module):
    def __init__(self, blocks, attns):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.attns = nn.ModuleList(nn.ModuleList(a) for a in attns)


class Denoiser3d(nn.Module):
    """UNet mapping ``(B, c+1, l, h, w)`` masked latents and timesteps to ``(B, c, l, h, w)`` noise."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        w, td, g = cfg.base_width, cfg.temb_dim, cfg.groups
        chans = [w * m for m in cfg.channel_mult]
        self.temb = TimestepEmbedding(w, td)
        self.conv_in = space_conv(cfg.in_channels, chans[0])

        def attn_stack(level, ch, force=False):
            # the mid block always carries attention
            if level not in cfg.attention_levels and not force:
                return []
            if cfg.attention_mode == "joint":
                return [AttentionBlock(ch, td, cfg.heads, "joint", g)]
            stack = [AttentionBlock(ch, td, cfg.heads, "spatial", g)]
            if cfg.temporal_attention and level in cfg.temporal_levels:
                stack.append(AttentionBlock(ch, td, cfg.heads, "temporal", g, cfg.max_frames))
            return stack

        self.down = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_chans = [chans[0]]
        cin = chans[0]
        for lvl, ch in enumerate(chans):
            blocks, attns = [], []
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(cin, ch, td, g))
                attns.append(attn_stack(lvl, ch))
                cin = ch
                skip_chans.append(ch)
            self.down.append(UNetLevel(blocks, attns))
            if lvl < len(chans) - 1:
                self.downsamplers.append(nn.Conv3d(ch, ch, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)))
                skip_chans.append(ch)

        last = len(chans) - 1
        self.mid1 = ResBlock(cin, cin, td, g)
        self.mid_attn = nn.ModuleList(attn_stack(last, cin, force=True))
        self.mid2 = ResBlock(cin, cin, td, g)

        self.up = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for lvl in reversed(range(len(chans))):
            ch = chans[lvl]
            blocks, attns = [], []
            for _ in range(cfg.num_res_blocks + 1):
                blocks.append(ResBlock(cin + skip_chans.pop(), ch, td, g))
                attns.append(attn_stack(lvl, ch))
                cin = ch
            self.up.append(UNetLevel(blocks, attns))
            if lvl > 0:
                self.upsamplers.append(space_conv(ch, ch))

        self.norm_out = AdaGroupNorm(cin, td, g)
        self.conv_out = _zero(space_conv(cin, cfg.latent_channels))

    def forward(self, x, t):
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"denoiser expects (B, {cfg.in_channels}, l, h, w), got {tuple(x.shape)}"
            )
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and x.shape[0] > 1:
            t = t.expand(x.shape[0])
        temb = self.temb(t)
        h = self.conv_in(x)
        skips = [h]
        for lvl, level in enumerate(self.down):
            for block, attns in zip(level.blocks, level.attns):
                h = block(h, temb)
                for attn in attns:
                    h = attn(h, temb)
                skips.append(h)
            if lvl < len(self.downsamplers):
                h = self.downsamplers[lvl](h)
                skips.append(h)
        h = self.mid1(h, temb)
        for attn in self.mid_attn:
            h = attn(h, temb)
        h = self.mid2(h, temb)
        for i, level in enumerate(self.up):
            for block, attns in zip(level.blocks, level.attns):
                h = block(torch.cat([h, skips.pop()], dim=1), temb)
                for attn in attns:
                    h = attn(h, temb)
            if i < len(self.upsamplers):
                h = F.interpolate(h, scale_factor=(1, 2, 2), mode="nearest")
                h = self.upsamplers[i](h)
        return self.conv_out(F.silu(self.norm_out(h, temb)))

    def attention_blocks(self):
        return [m for m in self.modules() if isinstance(m, AttentionBlock)]


def apply_denoiser(model, masked_latent, t):
    return model(masked_latent, t)


def attention_cost(model, latent_shape):
    """Total attention-matrix entries for one forward pass on ``(B, c, l, h, w)`` latents."""
    b, _, l, hh, ww = latent_shape
    cost = 0
    handles = []

    def hook(mod, inputs, output):
        nonlocal cost
        cost += mod.score_entries(tuple(inputs[0].shape))

    for blk in model.attention_blocks():
        handles.append(blk.register_forward_hook(hook))
    try:
        with torch.no_grad():
            x = torch.zeros((b, model.cfg.in_channels, l, hh, ww), dtype=next(model.parameters()).dtype)
            model(x, torch.zeros(b, dtype=torch.long))
    finally:
        for h in handles:
            h.remove()
    return cost


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
