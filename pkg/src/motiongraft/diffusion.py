"""Forward diffusion machinery: noise schedule, q-sampling, latent packing.

Timesteps run t = 0..T with t = 0 meaning clean data, so cumulative alpha is
defined with abar(0) = 1 and abar(t) = prod_{i<=t} alpha_i for t >= 1.  The
"latent" space is not a learned autoencoder: frames are packed losslessly by
an 8x space-to-depth rearrangement after rescaling [0,1] -> [-1,1], and the
decoder is the exact inverse.  That keeps the whole pipeline testable against
pixel ground truth.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError

PACK_FACTOR = 4
LATENT_CHANNELS = 3 * PACK_FACTOR * PACK_FACTOR  # 48


class DiffusionSchedule:
    """Linear beta schedule with cumulative products precomputed in float64."""

    def __init__(self, timesteps=1000, beta_start=8.5e-4, beta_end=0.012):
        if timesteps < 1:
            raise ContractError(f"timesteps must be >= 1, got {timesteps}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ContractError(
                f"betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
        self.T = int(timesteps)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.betas = np.linspace(beta_start, beta_end, self.T, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        # index 0 is the identity (no noise); index t covers steps 1..t
        self.alpha_bars = np.concatenate(([1.0], np.cumprod(self.alphas)))
        self._alpha_bars_torch = torch.from_numpy(self.alpha_bars)

    def _check_t(self, t):
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise ContractError(f"timesteps must be integers, got dtype {t.dtype}")
        if t.min() < 0 or t.max() > self.T:
            raise ContractError(
                f"timestep out of range [0, {self.T}]: {int(t.min())}..{int(t.max())}")
        return t

    def alpha_bar_at(self, t):
        """Cumulative alpha at timestep(s) t; abar(0) == 1 exactly."""
        t = self._check_t(t)
        out = self.alpha_bars[t]
        return float(out) if np.isscalar(t) or t.ndim == 0 else out

    def ddim_timesteps(self, num_steps):
        """Descending timestep ladder for a num_steps sampler run.

        Uniform stride from T down; the sampler itself appends the final
        hop to t = 0.
        """
        if not (1 <= num_steps <= self.T):
            raise ContractError(
                f"num_steps must be in [1, {self.T}], got {num_steps}")
        ts = [int(round(self.T * (num_steps - i) / num_steps))
              for i in range(num_steps)]
        ts = sorted(set(max(1, t) for t in ts), reverse=True)
        return ts

    def q_sample(self, x0, t, noise):
        """Forward-noise x0 to timestep t: sqrt(abar)*x0 + sqrt(1-abar)*eps.

        Works on numpy arrays or torch tensors; t may be a scalar or one
        value per leading-axis sample.
        """
        tt = self._check_t(t)
        is_torch = torch.is_tensor(x0)
        if is_torch != torch.is_tensor(noise):
            raise ContractError("x0 and noise must be the same array kind")
        if tuple(x0.shape) != tuple(noise.shape):
            raise ContractError(
                f"x0 shape {tuple(x0.shape)} != noise shape {tuple(noise.shape)}")

        if is_torch:
            ab = self._alpha_bars_torch[torch.as_tensor(np.asarray(tt))].to(x0.dtype)
            if ab.ndim > 0:
                if ab.shape[0] != x0.shape[0]:
                    raise ContractError(
                        f"per-sample t has {ab.shape[0]} entries for batch {x0.shape[0]}")
                ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
            return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise

        ab = self.alpha_bars[tt]
        if np.ndim(ab) > 0:
            if ab.shape[0] != x0.shape[0]:
                raise ContractError(
                    f"per-sample t has {ab.shape[0]} entries for batch {x0.shape[0]}")
            ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# ---------------------------------------------------------------------------
# latent packing

def encode_frames(frames):
    """Pack video frames into latents: N x 48 x H/4 x W/4 torch float32.

    Input is N x H x W x 3 in [0, 1] (numpy or torch); values are rescaled
    to [-1, 1] and space-to-depth folded by a factor of 4.
    """
    if torch.is_tensor(frames):
        x = frames.to(torch.float32)
    else:
        x = torch.from_numpy(np.ascontiguousarray(frames)).to(torch.float32)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ContractError(f"frames must be NxHxWx3, got {tuple(x.shape)}")
    n, h, w, _ = x.shape
    if h % PACK_FACTOR or w % PACK_FACTOR:
        raise ContractError(
            f"frame size {h}x{w} not divisible by {PACK_FACTOR}")
    # contiguous() drops the channels-last layout the permute creates; mixed
    # layouts otherwise leak into every downstream module
    x = (x.permute(0, 3, 1, 2) * 2.0 - 1.0).contiguous()
    return F.pixel_unshuffle(x, PACK_FACTOR).contiguous()


def decode_latents(latents):
    """Exact inverse of encode_frames: N x H x W x 3 in frame space.

    No clamping here; round-tripping clean latents is bit-faithful in
    float32.  Use clip_to_video for display-ready output.
    """
    if not torch.is_tensor(latents):
        latents = torch.from_numpy(np.ascontiguousarray(latents))
    if latents.ndim != 4 or latents.shape[1] != LATENT_CHANNELS:
        raise ContractError(
            f"latents must be Nx{LATENT_CHANNELS}xhxw, got {tuple(latents.shape)}")
    x = F.pixel_shuffle(latents.to(torch.float32), PACK_FACTOR)
    x = (x + 1.0) * 0.5
    return x.permute(0, 2, 3, 1)


def clip_to_video(decoded):
    """Clamp decoded frames into [0, 1] numpy for metrics and saving."""
    if torch.is_tensor(decoded):
        decoded = decoded.detach().cpu().numpy()
    return np.clip(decoded, 0.0, 1.0).astype(np.float32)
