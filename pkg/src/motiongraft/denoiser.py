"""Temporal U-Net noise predictor over packed video latents.

Four resolution levels with FiLM timestep conditioning, optional per-level
temporal attention over the frame axis (disabled during image-domain
training, where the leading axis holds independent samples), and one
cross-attention block at the bottleneck for appearance context.  Conditioning
hooks are additive: a pose residual on the input latent and per-level
reference features on the encoder, both produced by the controller nets.

Temporal and cross-attention output projections start at zero so enabling
them is a no-op until trained; the final output conv is a live layer.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError

GROUPS = 8


def timestep_embedding(t, dim):
    """Sinusoidal features for integer timesteps; t is a 1-D long tensor."""
    if dim % 2:
        raise ContractError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class FiLMResBlock(nn.Module):
    """Two 3x3 convs with a timestep-driven scale/shift between them."""

    def __init__(self, in_ch, out_ch, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUPS, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(GROUPS, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb_proj(F.silu(emb)).chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class TemporalAttention(nn.Module):
    """Self-attention along the frame axis, independently per pixel.

    The whole leading axis of the input is treated as one clip; callers must
    not mix frames from different videos in a single forward.  The output
    projection is zero-initialized, so an untrained block is the identity.
    """

    def __init__(self, ch, heads=2):
        super().__init__()
        if ch % heads:
            raise ContractError(f"channels {ch} not divisible by heads {heads}")
        self.heads = heads
        self.norm = nn.GroupNorm(GROUPS, ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.out = nn.Linear(ch, ch)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        n, c, h, w = x.shape
        y = self.norm(x).permute(2, 3, 0, 1).reshape(h * w, n, c)
        q, k, v = self.qkv(y).chunk(3, dim=-1)

        def split(z):
            return z.reshape(h * w, n, self.heads, c // self.heads).transpose(1, 2)

        att = F.scaled_dot_product_attention(split(q), split(k), split(v))
        att = att.transpose(1, 2).reshape(h * w, n, c)
        y = self.out(att).reshape(h, w, n, c).permute(2, 3, 0, 1)
        return x + y


class CrossAttention(nn.Module):
    """Per-sample cross-attention from spatial tokens to context tokens.

    Context is (N, L, D): one token row per leading-axis sample, so batched
    image training cannot leak across samples.  Zero-initialized output
    projection, same neutrality contract as the temporal block.
    """

    def __init__(self, ch, ctx_dim, heads=4):
        super().__init__()
        if ch % heads:
            raise ContractError(f"channels {ch} not divisible by heads {heads}")
        self.heads = heads
        self.norm = nn.GroupNorm(GROUPS, ch)
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(ctx_dim, ch)
        self.to_v = nn.Linear(ctx_dim, ch)
        self.out = nn.Linear(ch, ch)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, context):
        n, c, h, w = x.shape
        if context.ndim != 3 or context.shape[0] != n:
            raise ContractError(
                f"context must be (N, L, D) with N={n}, got {tuple(context.shape)}")
        y = self.norm(x).reshape(n, c, h * w).transpose(1, 2)
        q = self.to_q(y)
        k = self.to_k(context)
        v = self.to_v(context)

        def split(z):
            return z.reshape(n, z.shape[1], self.heads, c // self.heads).transpose(1, 2)

        att = F.scaled_dot_product_attention(split(q), split(k), split(v))
        att = att.transpose(1, 2).reshape(n, h * w, c)
        y = self.out(att).transpose(1, 2).reshape(n, c, h, w)
        return x + y


class Denoiser(nn.Module):
    """Noise predictor epsilon(z_t, t | pose, reference, appearance)."""

    def __init__(self, latent_channels=48, widths=(64, 96, 128, 160),
                 emb_dim=128, ctx_dim=128, attn_heads=4, temporal_heads=2):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) != 4:
            raise ContractError(f"need 4 level widths, got {len(widths)}")
        for w in widths:
            if w % GROUPS:
                raise ContractError(f"width {w} not divisible by {GROUPS}")
        self.latent_channels = int(latent_channels)
        self.widths = widths
        self.emb_dim = emb_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.stem = nn.Conv2d(latent_channels, widths[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.enc_temporal = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.enc_blocks.append(FiLMResBlock(prev, w, emb_dim))
            self.enc_temporal.append(TemporalAttention(w, temporal_heads))
            if i < len(widths) - 1:
                self.downs.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w

        mid = widths[-1]
        self.mid_block1 = FiLMResBlock(mid, mid, emb_dim)
        self.mid_attn = CrossAttention(mid, ctx_dim, attn_heads)
        self.mid_block2 = FiLMResBlock(mid, mid, emb_dim)

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        self.dec_temporal = nn.ModuleList()
        prev = mid
        for i in reversed(range(len(widths))):
            # nearest-neighbor resize happens in forward; this conv smooths it
            self.ups.append(nn.Conv2d(prev, prev, 3, padding=1))
            self.dec_blocks.append(FiLMResBlock(prev + widths[i], widths[i], emb_dim))
            self.dec_temporal.append(TemporalAttention(widths[i], temporal_heads))
            prev = widths[i]

        self.out_norm = nn.GroupNorm(GROUPS, widths[0])
        self.out_conv = nn.Conv2d(widths[0], latent_channels, 3, padding=1)

    def temporal_parameters(self):
        """Parameters of the frame-axis attention blocks (stage-2 trainables)."""
        for m in list(self.enc_temporal) + list(self.dec_temporal):
            yield from m.parameters()

    def forward(self, z, t, pose_add=None, ref_feats=None, context=None,
                temporal=False, return_features=False):
        """Predict the noise in z at timestep(s) t.

        z: (N, C, h, w) latents.  t: int or (N,) tensor (one per sample).
        pose_add: optional (N, C, h, w) residual summed onto z.
        ref_feats: optional list of 4 per-level tensors added after each
          encoder block (coarsest last), shapes matching that level.
        context: optional (N, L, D) appearance tokens for the bottleneck.
        temporal: run frame-axis attention (the leading axis must then be
          the frame axis of a single clip).
        return_features: also return the decoder level outputs,
          coarsest-first.
        """
        n = z.shape[0]
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ContractError(
                f"latents must be Nx{self.latent_channels}xhxw, got {tuple(z.shape)}")
        if not torch.is_tensor(t):
            t = torch.full((n,), int(t), dtype=torch.long, device=z.device)
        elif t.ndim == 0:
            t = t.reshape(1).expand(n)
        if t.shape != (n,):
            raise ContractError(f"t must be scalar or shape ({n},), got {tuple(t.shape)}")
        if ref_feats is not None and len(ref_feats) != len(self.widths):
            raise ContractError(
                f"expected {len(self.widths)} reference features, got {len(ref_feats)}")

        emb = self.time_mlp(timestep_embedding(t, self.emb_dim).to(z.dtype))
        x = z if pose_add is None else z + pose_add
        x = self.stem(x)

        skips = []
        for i, block in enumerate(self.enc_blocks):
            x = block(x, emb)
            if ref_feats is not None:
                f = ref_feats[i]
                if f.shape != x.shape:
                    raise ContractError(
                        f"reference feature {i} shape {tuple(f.shape)} != {tuple(x.shape)}")
                x = x + f
            if temporal:
                x = self.enc_temporal[i](x)
            skips.append(x)
            if i < len(self.downs):
                x = self.downs[i](x)

        x = self.mid_block1(x, emb)
        if context is not None:
            x = self.mid_attn(x, context)
        x = self.mid_block2(x, emb)

        feats = []
        for j, i in enumerate(reversed(range(len(self.widths)))):
            if i < len(self.widths) - 1:
                x = F.interpolate(x, size=skips[i].shape[-2:], mode="nearest")
            x = self.ups[j](x)
            x = self.dec_blocks[j](torch.cat([x, skips[i]], dim=1), emb)
            if temporal:
                x = self.dec_temporal[j](x)
            feats.append(x)

        eps = self.out_conv(F.silu(self.out_norm(x)))
        if return_features:
            return eps, feats
        return eps
