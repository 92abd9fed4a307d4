"""Conditioning networks: pose controller, reference controller, appearance.

Both controllers are pure convolution stacks (no attention, no
normalization): four blocks of two convs each.  The pose controller emits a
single residual in latent shape that is summed onto the denoiser input; the
reference controller emits one feature map per denoiser encoder level, summed
onto the encoder states.  Every controller output passes through a
zero-initialized projection, so an untrained controller leaves the denoiser
exactly alone.

The appearance encoder is a small conv net producing token grids for the
bottleneck cross-attention; it stands in for a frozen image-embedding
backbone at this scale.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import LATENT_CHANNELS, PACK_FACTOR
from .errors import ContractError

MIN_RESOLUTION = 64  # three halvings below latent scale must stay >= 1 px


def frames_to_tensor(frames):
    """N x H x W x 3 array in [0,1] -> N x 3 x H x W torch tensor in [-1,1]."""
    if torch.is_tensor(frames):
        x = frames.to(torch.float32)
    else:
        x = torch.from_numpy(np.ascontiguousarray(frames)).to(torch.float32)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ContractError(f"frames must be NxHxWx3, got {tuple(x.shape)}")
    # keep plain NCHW layout: the permuted view is channels-last in memory,
    # and letting that propagate trips a faulty grouped-norm backward kernel
    # on CPU when affine weights are frozen
    return (x.permute(0, 3, 1, 2) * 2.0 - 1.0).contiguous()


def _conv_block(in_ch, out_ch, stride):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.SiLU(),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.SiLU(),
    )


class PoseController(nn.Module):
    """Pose maps -> one latent-shaped residual added to the denoiser input."""

    def __init__(self, widths=(24, 32, 48, 64), latent_channels=LATENT_CHANNELS):
        super().__init__()
        if len(widths) != 4:
            raise ContractError(f"need 4 block widths, got {len(widths)}")
        strides = (2, 2, 1, 1)  # total x4 to match the latent packing
        blocks = []
        prev = 3
        for w, s in zip(widths, strides):
            blocks.append(_conv_block(prev, w, s))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.proj = nn.Conv2d(prev, latent_channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, pose_maps):
        """pose_maps: (N, 3, H, W) in [-1, 1]; returns (N, C_latent, H/4, W/4)."""
        x = pose_maps
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"pose maps must be Nx3xHxW, got {tuple(x.shape)}")
        if x.shape[2] < MIN_RESOLUTION or x.shape[3] < MIN_RESOLUTION:
            raise ContractError(
                f"controller input must be at least {MIN_RESOLUTION}px, got {tuple(x.shape)}")
        for b in self.blocks:
            x = b(x)
        return self.proj(x)


class ReferenceController(nn.Module):
    """Source frames -> per-level features for the denoiser encoder."""

    def __init__(self, widths=(24, 32, 48, 64), level_widths=(64, 96, 128, 160)):
        super().__init__()
        if len(widths) != 4:
            raise ContractError(f"need 4 block widths, got {len(widths)}")
        blocks = []
        prev = 3
        for w in widths:
            blocks.append(_conv_block(prev, w, 2))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.level_widths = tuple(level_widths)
        # trunk strides run 2/4/8/16; encoder levels sit at 4/8/16/32, so
        # levels 0-2 read matching taps and the coarsest level pools the last
        self._tap_for_level = (1, 2, 3, 3)
        heads = []
        for lvl, w in enumerate(level_widths):
            head = nn.Conv2d(widths[self._tap_for_level[lvl]], w, 1)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            heads.append(head)
        self.heads = nn.ModuleList(heads)

    def forward(self, frames):
        """frames: (N, 3, H, W) in [-1, 1]; returns a 4-list of level features,
        finest (H/4) first, each halving in size."""
        x = frames
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"frames must be Nx3xHxW, got {tuple(x.shape)}")
        if x.shape[2] < MIN_RESOLUTION or x.shape[3] < MIN_RESOLUTION:
            raise ContractError(
                f"controller input must be at least {MIN_RESOLUTION}px, got {tuple(x.shape)}")
        h0 = x.shape[-2] // PACK_FACTOR  # latent size at level 0
        w0 = x.shape[-1] // PACK_FACTOR
        taps = []
        for b in self.blocks:
            x = b(x)
            taps.append(x)
        feats = []
        for lvl in range(4):
            src = taps[self._tap_for_level[lvl]]
            target = (max(1, h0 >> lvl), max(1, w0 >> lvl))
            y = F.adaptive_avg_pool2d(src, target)
            feats.append(self.heads[lvl](y))
        return feats


class AppearanceEncoder(nn.Module):
    """Source frames -> token grid for bottleneck cross-attention."""

    def __init__(self, dim=128, token_grid=4):
        super().__init__()
        self.dim = dim
        self.token_grid = token_grid
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, dim, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(dim, dim, 1),
        )

    def tokens(self, frames):
        """Per-sample tokens: (N, 3, H, W) -> (N, token_grid^2, dim)."""
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ContractError(f"frames must be Nx3xHxW, got {tuple(frames.shape)}")
        f = self.net(frames)
        f = F.adaptive_avg_pool2d(f, self.token_grid)
        return f.flatten(2).transpose(1, 2)

    def clip_tokens(self, frames):
        """Whole-clip appearance: mean of per-frame tokens, (token_grid^2, dim)."""
        return self.tokens(frames).mean(dim=0)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
