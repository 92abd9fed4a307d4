"""Pose-conditioned protagonist segmentation.

Predicts a soft foreground mask for a subject re-posed to an arbitrary
target: the input is the source frame concatenated with a rendered target
pose map on the channel axis (6 channels total).  Architecture: four conv
encoder blocks, a small token-mixer core (patchified self-attention), and a
conv decoder that concatenates the four encoder features back in.  Trained
with plain MSE against binary masks; at this scale the exact synthetic masks
play the role of teacher labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .controllers import count_parameters, frames_to_tensor
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class SegModelConfig:
    resolution: int = 64
    encoder_widths: tuple = (16, 32, 48, 64)
    # first block runs at full resolution so the decoder gets a stride-1
    # skip; masks come out sharp instead of 2px-blocky
    encoder_strides: tuple = (1, 2, 2, 1)
    patch_size: int = 4
    core_depth: int = 2
    core_dim: int = 96
    core_heads: int = 4
    max_parameters: int = 1_500_000

    def validate(self):
        if len(self.encoder_widths) != 4 or len(self.encoder_strides) != 4:
            raise ConfigError("encoder must have exactly 4 blocks")
        if any(int(c) % 8 for c in self.encoder_widths):
            raise ConfigError(
                f"encoder widths must be multiples of 8, got {self.encoder_widths}")
        if not (1 <= self.core_depth <= 4):
            raise ConfigError(f"core_depth must be in [1, 4], got {self.core_depth}")
        if self.core_dim % self.core_heads:
            raise ConfigError(
                f"core_dim {self.core_dim} not divisible by heads {self.core_heads}")
        stride_total = int(np.prod(self.encoder_strides))
        post = self.resolution // stride_total
        if post % self.patch_size:
            raise ConfigError(
                f"patch_size {self.patch_size} does not tile the {post}px core grid")
        if self.max_parameters < 1:
            raise ConfigError("max_parameters must be positive")


class _TokenBlock(nn.Module):
    """Pre-norm self-attention + MLP over the patch tokens."""

    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


def _posemb_2d(gh, gw, dim):
    """Fixed sinusoidal position features on a gh x gw grid."""
    if dim % 4:
        raise ConfigError(f"core_dim must be divisible by 4, got {dim}")
    q = dim // 4
    freqs = torch.exp(-np.log(10000.0) * torch.arange(q, dtype=torch.float32) / q)
    ys = torch.arange(gh, dtype=torch.float32)[:, None] * freqs[None]
    xs = torch.arange(gw, dtype=torch.float32)[:, None] * freqs[None]
    ye = torch.cat([ys.sin(), ys.cos()], dim=1)
    xe = torch.cat([xs.sin(), xs.cos()], dim=1)
    grid = torch.cat([
        ye[:, None, :].expand(gh, gw, 2 * q),
        xe[None, :, :].expand(gh, gw, 2 * q),
    ], dim=2)
    return grid.reshape(gh * gw, dim)


class SegModel(nn.Module):
    """frame (+) pose map -> soft mask in [0, 1]."""

    def __init__(self, config: SegModelConfig | None = None):
        super().__init__()
        cfg = config or SegModelConfig()
        cfg.validate()
        self.config = cfg
        w = cfg.encoder_widths
        s = cfg.encoder_strides

        def block(cin, cout, stride):
            # norm after every conv keeps activation scale flat through the
            # stack; without it the input-dependent signal decays layer by
            # layer and the head ends up fitting little more than a bias
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.GroupNorm(8, cout), nn.SiLU(),
                nn.Conv2d(cout, cout, 3, padding=1),
                nn.GroupNorm(8, cout), nn.SiLU())

        self.enc = nn.ModuleList([
            block(6, w[0], s[0]), block(w[0], w[1], s[1]),
            block(w[1], w[2], s[2]), block(w[2], w[3], s[3])])

        post = cfg.resolution // int(np.prod(s))
        self.grid = post // cfg.patch_size
        self.patch = nn.Conv2d(w[3], cfg.core_dim, cfg.patch_size, stride=cfg.patch_size)
        self.register_buffer(
            "pos", _posemb_2d(self.grid, self.grid, cfg.core_dim), persistent=False)
        self.core = nn.ModuleList(
            [_TokenBlock(cfg.core_dim, cfg.core_heads) for _ in range(cfg.core_depth)])
        self.unpatch = nn.Linear(cfg.core_dim, w[3] * cfg.patch_size ** 2)

        def up(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.GroupNorm(8, cout), nn.SiLU())

        self.dec = nn.ModuleList([
            up(2 * w[3], w[2]), up(w[2] + w[2], w[1]),
            up(w[1] + w[1], w[0]), up(w[0] + w[0], w[0])])
        self.head = nn.Conv2d(w[0], 1, 3, padding=1)

        n_params = count_parameters(self)
        if n_params > cfg.max_parameters:
            raise ConfigError(
                f"model has {n_params} parameters, over the {cfg.max_parameters} ceiling")

    def forward(self, x):
        """x: (N, 6, H, W) -> (N, 1, H, W) soft masks."""
        if x.ndim != 4 or x.shape[1] != 6:
            raise ContractError(f"input must be Nx6xHxW, got {tuple(x.shape)}")
        r = self.config.resolution
        if x.shape[2] != r or x.shape[3] != r:
            raise ContractError(
                f"model is built for {r}x{r} inputs, got {tuple(x.shape[2:])}")
        skips = []
        h = x
        for blk in self.enc:
            h = blk(h)
            skips.append(h)

        tok = self.patch(h).flatten(2).transpose(1, 2) + self.pos
        for blk in self.core:
            tok = blk(tok)
        p = self.config.patch_size
        w3 = self.config.encoder_widths[3]
        h = self.unpatch(tok).transpose(1, 2).reshape(
            x.shape[0], w3 * p * p, self.grid, self.grid)
        h = F.pixel_shuffle(h, p)

        for i, blk in enumerate(self.dec):
            skip = skips[3 - i]
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = blk(torch.cat([h, skip], dim=1))
        if h.shape[-1] != x.shape[-1]:
            h = F.interpolate(h, size=x.shape[-2:], mode="nearest")
        return torch.sigmoid(self.head(h))


def seg_inputs(frames, pose_maps):
    """Stack frames and pose maps into the (N, 6, H, W) network input."""
    f = frames_to_tensor(frames)
    p = frames_to_tensor(pose_maps)
    if f.shape != p.shape:
        raise ContractError(
            f"frame/pose resolution mismatch: {tuple(f.shape)} vs {tuple(p.shape)}")
    return torch.cat([f, p], dim=1)


def seg_forward(model: SegModel, frame, pose_map):
    """Single-frame convenience: HxWx3 arrays in, HxW soft mask out."""
    frame = np.asarray(frame)
    pose_map = np.asarray(pose_map)
    if frame.shape != pose_map.shape:
        raise ContractError(
            f"frame/pose resolution mismatch: {frame.shape} vs {pose_map.shape}")
    x = seg_inputs(frame[None], pose_map[None])
    with torch.no_grad():
        out = model(x)
    return out[0, 0].numpy()


def predict_masks(model: SegModel, frames, pose_maps):
    """Batch soft masks: N x H x W numpy in [0, 1]."""
    x = seg_inputs(frames, pose_maps)
    with torch.no_grad():
        out = model(x)
    return out[:, 0].numpy()


def binarize(soft, tau=0.5):
    """Threshold a soft mask: 1 where soft >= tau. tau must sit inside (0,1)."""
    if not (0.0 < tau < 1.0):
        raise ConfigError(f"tau must be in (0, 1), got {tau}")
    soft = np.asarray(soft)
    return (soft >= tau).astype(np.uint8)


def iou(a, b):
    """Intersection over union of two binary masks; empty-union -> 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def seg_train_step(model, optimizer, frames, pose_maps, masks):
    """One MSE training step on (source frame, target pose, target mask).

    masks: (N, H, W) binary.  Returns the scalar loss.  If the prediction
    carries no gradient (frozen or stub model), the update is skipped and
    the loss still returned.
    """
    masks = np.asarray(masks) if not torch.is_tensor(masks) else masks
    if np.ndim(masks) != 3:
        raise ContractError(f"masks must be NxHxW, got shape {np.shape(masks)}")
    vals = np.unique(np.asarray(masks))
    if not np.all(np.isin(vals, (0, 1))):
        raise ContractError("training masks must be binary")
    if np.shape(masks)[0] == 0:
        raise ContractError("empty batch")
    x = seg_inputs(frames, pose_maps)
    target = torch.as_tensor(np.asarray(masks), dtype=torch.float32)[:, None]
    pred = model(x)
    loss = F.mse_loss(pred, target)
    if loss.requires_grad:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def make_seg_batch(scene_data, rng, batch_size):
    """Draw (source frame, target pose map, target mask) triples.

    scene_data: list of (frames NxHxWx3, pose_maps NxHxWx3, masks NxHxW).
    Source and target frames come from disjoint halves of one clip, so the
    model must follow the pose channel rather than copy the image.
    """
    fr, pm, mk = [], [], []
    for _ in range(batch_size):
        frames, pose_maps, masks = scene_data[int(rng.integers(len(scene_data)))]
        n = frames.shape[0]
        if n < 2:
            raise ContractError("scenes need at least 2 frames for pair sampling")
        half = n // 2
        si = int(rng.integers(0, half))
        ti = int(rng.integers(half, n))
        fr.append(frames[si])
        pm.append(pose_maps[ti])
        mk.append(masks[ti])
    return np.stack(fr), np.stack(pm), np.stack(mk)
