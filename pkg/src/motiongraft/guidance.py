"""Score-regularization losses over mask regions and their latent gradient.

Four consistency terms compare editing-branch features F_e against
reconstruction-branch features F_r on regions derived from the protagonist
masks: foreground similarity (pooled), overlapping-background similarity
(per-location), a body term that pushes vacated-body features toward
background statistics by appearing positively in the objective, and a
completion term matching vacated-body features to background pooling.  The
composite latent gradient stitches dL_fg/dz on the editing mask with
dL_bg/dz elsewhere.

Similarities inside reciprocal losses are clamped to [floor, 1]: the raw
expressions have a pole at similarity -1/2, and clamping bounds both loss and
gradient.  Empty regions contribute a zero loss plus a diagnostic flag rather
than an error, so degenerate scenes sample through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractError, GuidanceError

_EPS = 1e-12


@dataclass(frozen=True)
class GuidanceConfig:
    alpha_fg: float = 4.0
    alpha_over: float = 6.0
    alpha_body: float = 2.4
    alpha_com: float = 1.2
    # orientation applied by the sampler: epsilon_hat = eps - sqrt(1-abar) *
    # (sign * scale * dL/dz).  The default -1 makes one guided step a descent
    # step on the composite loss (the raw formula sign would ascend).
    sign: float = -1.0
    scale: float = 1.0
    # guidance active while t_min <= t <= t_max
    t_min: int = 0
    t_max: int | None = None
    # decoder feature taps to compare, coarsest-first indices
    taps: tuple = (2, 3)
    clamp_floor: float = 0.0

    def validate(self):
        for name in ("alpha_fg", "alpha_over", "alpha_body", "alpha_com"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.sign not in (-1.0, 1.0):
            raise ConfigError(f"sign must be -1.0 or 1.0, got {self.sign}")
        if self.scale < 0:
            raise ConfigError(f"scale must be nonnegative, got {self.scale}")
        if not (0.0 <= self.clamp_floor < 1.0):
            raise ConfigError(f"clamp_floor must be in [0, 1), got {self.clamp_floor}")
        if not self.taps:
            raise ConfigError("taps must name at least one feature level")
        if self.t_min < 0:
            raise ConfigError(f"t_min must be nonnegative, got {self.t_min}")
        if self.t_max is not None and self.t_max < self.t_min:
            raise ConfigError("t_max must be >= t_min")
        return self

    def active_at(self, t):
        hi = math.inf if self.t_max is None else self.t_max
        return self.t_min <= t <= hi


@dataclass
class RegionMasks:
    """Editing/reconstruction masks and their derived regions, one resolution."""

    m_e: np.ndarray
    m_r: np.ndarray
    m_over: np.ndarray
    m_body: np.ndarray


def _as_binary(m, name):
    m = np.asarray(m)
    if m.ndim != 3:
        raise ContractError(f"{name} must be NxHxW, got shape {m.shape}")
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0, 1))):
        raise ContractError(f"{name} must be binary (0/1), found values {vals[:5]}")
    return m.astype(np.uint8)


def resample_mask(mask, h, w):
    """Nearest-neighbor resample of binary masks to (h, w); stays binary."""
    m = _as_binary(mask, "mask")
    src_h, src_w = m.shape[1:]
    rows = np.clip(np.floor((np.arange(h) + 0.5) * src_h / h), 0, src_h - 1).astype(int)
    cols = np.clip(np.floor((np.arange(w) + 0.5) * src_w / w), 0, src_w - 1).astype(int)
    return m[:, rows[:, None], cols[None, :]]


def compute_region_masks(m_e, m_r, size=None):
    """Derive the overlap and vacated-body regions from the two masks.

    size: optional (h, w) to resample both inputs to first (nearest
    neighbor), so the partition identity holds exactly at that resolution.
    """
    m_e = _as_binary(m_e, "m_e")
    m_r = _as_binary(m_r, "m_r")
    if m_e.shape[0] != m_r.shape[0]:
        raise ContractError(
            f"mask frame counts differ: {m_e.shape[0]} vs {m_r.shape[0]}")
    if size is not None:
        m_e = resample_mask(m_e, *size)
        m_r = resample_mask(m_r, *size)
    if m_e.shape != m_r.shape:
        raise ContractError(f"mask shapes differ: {m_e.shape} vs {m_r.shape}")
    m_over = (1 - m_e) * (1 - m_r)
    m_body = m_r * (1 - m_e)
    return RegionMasks(m_e=m_e, m_r=m_r, m_over=m_over.astype(np.uint8),
                       m_body=m_body.astype(np.uint8))


def _mask_tensor(m, like):
    return torch.as_tensor(np.asarray(m), dtype=like.dtype, device=like.device)


def mask_pool(feats, mask):
    """Mask-weighted spatial mean: (N,C,h,w) x (N,h,w) -> ((N,C), empty (N,)).

    Frames whose mask is all zero pool to the zero vector and are flagged.
    """
    if feats.ndim != 4:
        raise ContractError(f"features must be NxCxHxW, got {tuple(feats.shape)}")
    m = mask if torch.is_tensor(mask) else _mask_tensor(mask, feats)
    if m.shape != (feats.shape[0],) + feats.shape[2:]:
        raise ContractError(
            f"mask shape {tuple(m.shape)} does not match features {tuple(feats.shape)}")
    m = m.to(feats.dtype)[:, None]
    count = m.sum(dim=(2, 3))
    pooled = (feats * m).sum(dim=(2, 3)) / count.clamp(min=1.0)
    empty = count[:, 0] == 0
    return pooled, empty


def pooled_similarity(a, b):
    """Mean per-frame cosine between pooled vectors; zero vectors count as 0."""
    if a.shape != b.shape or a.ndim != 2:
        raise ContractError(
            f"pooled vectors must share an NxC shape, got {tuple(a.shape)} vs {tuple(b.shape)}")
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    valid = (na > 0) & (nb > 0)
    denom = torch.where(valid, na * nb, torch.ones_like(na))
    cos = torch.where(valid, (a * b).sum(dim=1) / denom, torch.zeros_like(na))
    return cos.mean()


def _masked_channel_cosine(f_e, f_r, mask):
    """Average per-location channel cosine over masked cells of all frames.

    Returns (mean tensor, empty flag).  Zero-norm locations count as 0.
    """
    m = _mask_tensor(mask, f_e)
    total = m.sum()
    if total == 0:
        return f_e.new_zeros(()), True
    dot = (f_e * f_r).sum(dim=1)
    na = f_e.norm(dim=1)
    nb = f_r.norm(dim=1)
    valid = (na > 0) & (nb > 0)
    denom = torch.where(valid, na * nb, torch.ones_like(na))
    cos = torch.where(valid, dot / denom, torch.zeros_like(na))
    return (cos * m).sum() / total, False


def loss_fg(f_e, f_r, m_e, m_r, alpha_fg=4.0, clamp_floor=0.0):
    """Foreground appearance term: alpha / (1 + 2 * clamped pooled cosine)."""
    pe, empty_e = mask_pool(f_e, m_e)
    pr, empty_r = mask_pool(f_r, m_r)
    if bool(empty_e.all()) or bool(empty_r.all()):
        return f_e.new_zeros(()), True
    sim = pooled_similarity(pe, pr).clamp(clamp_floor, 1.0)
    return alpha_fg / (1.0 + 2.0 * sim), False


def loss_over(f_e, f_r, m_over, clamp_floor=0.0):
    """Shared-background term: 1 / (1 + 2 * clamped mean channel cosine)."""
    cos, empty = _masked_channel_cosine(f_e, f_r, m_over)
    if empty:
        return f_e.new_zeros(()), True
    return 1.0 / (1.0 + 2.0 * cos.clamp(clamp_floor, 1.0)), False


def loss_body(f_e, f_r, m_body):
    """Vacated-body term: the raw mean channel cosine (no reciprocal).

    It enters the background objective positively, so minimizing pushes the
    edited features on this region away from the source body.
    """
    cos, empty = _masked_channel_cosine(f_e, f_r, m_body)
    if empty:
        return f_e.new_zeros(()), True
    return cos, False


def loss_com(f_e, f_r, m_body, m_r, clamp_floor=0.0):
    """Completion term: pull vacated-body pooling toward background pooling."""
    pe, empty_e = mask_pool(f_e, m_body)
    pr, empty_r = mask_pool(f_r, 1 - np.asarray(m_r))
    if bool(empty_e.all()) or bool(empty_r.all()):
        return f_e.new_zeros(()), True
    sim = pooled_similarity(pe, pr).clamp(clamp_floor, 1.0)
    return 1.0 / (1.0 + 2.0 * sim), False


def loss_bg(l_over, l_body, l_com, alpha_over=6.0, alpha_body=2.4, alpha_com=1.2):
    """Weighted background composite."""
    return alpha_over * l_over + alpha_body * l_body + alpha_com * l_com


def tap_losses(taps_e, taps_r, m_e, m_r, cfg: GuidanceConfig):
    """Aggregate the loss family over the configured feature taps.

    taps_e / taps_r: equal-length lists of (N,C,h,w) features coarsest-first;
    m_e / m_r: frame-resolution binary masks.  Per-tap losses are averaged
    arithmetically, components included, before any differentiation.

    Returns a dict with 'fg', 'bg', 'over', 'body', 'com' scalar tensors and
    an 'empty' dict of diagnostic flags (true when a region was empty on
    every configured tap).

    Degenerate case: if both protagonist masks are empty everywhere, there
    is no subject to guide and every term is 0 with all flags raised (the
    overlap region would otherwise cover the whole frame, which reads the
    mask absence as information it is not).
    """
    cfg.validate()
    if len(taps_e) != len(taps_r):
        raise ContractError(
            f"tap list lengths differ: {len(taps_e)} vs {len(taps_r)}")
    for idx in cfg.taps:
        if not (0 <= idx < len(taps_e)):
            raise ContractError(f"tap index {idx} out of range for {len(taps_e)} taps")

    if not np.any(np.asarray(m_e)) and not np.any(np.asarray(m_r)):
        zero = taps_e[cfg.taps[0]].new_zeros(())
        out = {k: zero.clone() for k in ("fg", "over", "body", "com", "bg")}
        out["empty"] = {k: True for k in ("fg", "over", "body", "com")}
        return out

    acc = {k: [] for k in ("fg", "over", "body", "com")}
    flags = {k: True for k in ("fg", "over", "body", "com")}
    for idx in cfg.taps:
        fe, fr = taps_e[idx], taps_r[idx]
        if fe.shape != fr.shape:
            raise ContractError(
                f"tap {idx} shapes differ: {tuple(fe.shape)} vs {tuple(fr.shape)}")
        regions = compute_region_masks(m_e, m_r, size=fe.shape[2:])
        v, e = loss_fg(fe, fr, regions.m_e, regions.m_r, cfg.alpha_fg, cfg.clamp_floor)
        acc["fg"].append(v)
        flags["fg"] &= e
        v, e = loss_over(fe, fr, regions.m_over, cfg.clamp_floor)
        acc["over"].append(v)
        flags["over"] &= e
        v, e = loss_body(fe, fr, regions.m_body)
        acc["body"].append(v)
        flags["body"] &= e
        v, e = loss_com(fe, fr, regions.m_body, regions.m_r, cfg.clamp_floor)
        acc["com"].append(v)
        flags["com"] &= e

    out = {k: torch.stack(v).mean() for k, v in acc.items()}
    out["bg"] = loss_bg(out["over"], out["body"], out["com"],
                        cfg.alpha_over, cfg.alpha_body, cfg.alpha_com)
    out["empty"] = flags
    return out


def guidance_gradient(z_e, forward_closure, ref_taps, m_e, m_r,
                      cfg: GuidanceConfig, timestep=None):
    """Masked composite gradient of the consistency losses w.r.t. the latent.

    forward_closure(z) must return the editing-branch feature taps with
    gradients flowing to z; ref_taps are the reconstruction-branch features,
    treated as constants.  The result is dL_fg/dz on the editing mask and
    dL_bg/dz elsewhere (mask resampled to latent resolution), raw — the
    sampler applies cfg.sign and cfg.scale.

    Returns (gradient matching z_e, info dict with loss values, empty-region
    flags, and the gradient norm).
    """
    z = z_e.detach().clone().requires_grad_(True)
    taps_e = forward_closure(z)
    taps_r = [t.detach() for t in ref_taps]
    losses = tap_losses(taps_e, taps_r, m_e, m_r, cfg)

    def grad_of(value, retain):
        if not value.requires_grad:
            return torch.zeros_like(z)
        g = torch.autograd.grad(value, z, retain_graph=retain, allow_unused=True)[0]
        return torch.zeros_like(z) if g is None else g

    g_fg = grad_of(losses["fg"], retain=True)
    g_bg = grad_of(losses["bg"], retain=False)

    m_e_lat = resample_mask(m_e, z.shape[2], z.shape[3])
    gate = _mask_tensor(m_e_lat, z)[:, None]
    grad = g_fg * gate + g_bg * (1.0 - gate)
    if not torch.isfinite(grad).all():
        raise GuidanceError(
            f"non-finite guidance gradient at timestep {timestep}", timestep=timestep)
    info = {
        "fg": float(losses["fg"].detach()),
        "over": float(losses["over"].detach()),
        "body": float(losses["body"].detach()),
        "com": float(losses["com"].detach()),
        "bg": float(losses["bg"].detach()),
        "empty": losses["empty"],
        "grad_norm": float(grad.norm()),
    }
    return grad.detach(), info
