"""Deterministic two-branch DDIM sampling with score regularization.

Both branches start from the same Gaussian draw: the reconstruction branch is
conditioned on the source poses and simply denoises, recording its decoder
features at every retained step; the editing branch is conditioned on the
aligned target poses and, at each step, bends its predicted noise by the
masked consistency-loss gradient computed against the reconstruction
features.  Everything is seeded and stochastic-free, so a full edit is
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .controllers import frames_to_tensor
from .diffusion import DiffusionSchedule, clip_to_video, decode_latents, encode_frames
from .errors import ContractError, GuidanceError
from .guidance import GuidanceConfig, guidance_gradient
from .posekit import PoseSequence, render_pose_maps
from .segmentation import binarize, predict_masks
from .synthkit import VideoClip

TRACE_FIELDS = ("step", "t", "L_fg", "L_over", "L_body", "L_com", "grad_norm")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    shared_noise: bool = True
    guidance_on: bool = True
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    mask_tau: float = 0.5

    def validate(self, schedule: DiffusionSchedule):
        if not (1 <= self.steps <= schedule.T):
            raise ContractError(
                f"steps must be in [1, {schedule.T}], got {self.steps}")
        self.guidance.validate()
        if not (0.0 < self.mask_tau < 1.0):
            raise ContractError(f"mask_tau must be in (0, 1), got {self.mask_tau}")
        return self


@dataclass
class EditResult:
    edited: VideoClip
    reconstructed: VideoClip
    traces: list
    diagnostics: dict


def predict_x0(z_t, eps_hat, alpha_bar_t):
    """Invert the forward noising at known noise: (z - sqrt(1-abar)*eps)/sqrt(abar)."""
    if alpha_bar_t <= 0.0:
        raise ContractError(f"alpha_bar must be positive, got {alpha_bar_t}")
    return (z_t - np.sqrt(1.0 - alpha_bar_t) * eps_hat) / np.sqrt(alpha_bar_t)


def guided_epsilon(eps, grad, alpha_bar_t):
    """Fold a score gradient into the noise prediction.

    eps_hat = eps - sqrt(1 - abar_t) * grad; grad must already carry the
    sign/scale orientation from GuidanceConfig.
    """
    if not (0.0 < alpha_bar_t <= 1.0):
        raise ContractError(f"alpha_bar must lie in (0, 1], got {alpha_bar_t}")
    if torch.is_tensor(eps):
        if tuple(eps.shape) != tuple(grad.shape):
            raise ContractError(
                f"eps shape {tuple(eps.shape)} != grad shape {tuple(grad.shape)}")
        out = eps - np.sqrt(1.0 - alpha_bar_t) * grad
        if not torch.isfinite(out).all():
            raise GuidanceError("non-finite guided epsilon")
        return out
    eps = np.asarray(eps)
    grad = np.asarray(grad)
    if eps.shape != grad.shape:
        raise ContractError(f"eps shape {eps.shape} != grad shape {grad.shape}")
    out = eps - np.sqrt(1.0 - alpha_bar_t) * grad
    if not np.all(np.isfinite(out)):
        raise GuidanceError("non-finite guided epsilon")
    return out


def ddim_step(z_t, eps_hat, t, schedule: DiffusionSchedule, t_prev=None):
    """One deterministic update z_t -> z_{t_prev} (default t_prev = t - 1).

    z_{prev} = sqrt(abar_prev) * x0_pred + sqrt(1 - abar_prev) * eps_hat,
    with x0_pred the forward-noising inversion at abar_t.  abar(0) = 1 makes
    the final hop return x0_pred itself.
    """
    t = int(t)
    if t < 1:
        raise ContractError(f"ddim_step needs t >= 1, got {t}")
    if t_prev is None:
        t_prev = t - 1
    t_prev = int(t_prev)
    if not (0 <= t_prev < t):
        raise ContractError(f"t_prev must lie in [0, {t}), got {t_prev}")
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t_prev)
    if ab_t <= 0.0:
        raise ContractError(f"degenerate schedule: alpha_bar({t}) = {ab_t}")
    x0 = predict_x0(z_t, eps_hat, ab_t)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat


# ---------------------------------------------------------------------------
# conditioning assembly


def _clip_frames(clip):
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ContractError(f"clip must be NxHxWx3, got {frames.shape}")
    return frames


def build_conditioning(models, source_frames, poses: PoseSequence):
    """Precompute everything t-independent for one branch set.

    Returns a dict with the reference features, appearance context, and a
    function rendering pose conditioning for a given pose track.
    """
    n, h, w, _ = source_frames.shape
    if len(poses) != n:
        raise ContractError(f"pose track length {len(poses)} != frame count {n}")
    src = frames_to_tensor(source_frames)
    with torch.no_grad():
        ref_feats = [f.detach() for f in models.rectr(src)]
        context = models.appear.clip_tokens(src).detach()[None].expand(n, -1, -1)

    def pose_residual(track: PoseSequence):
        if len(track) != n:
            raise ContractError(
                f"pose track length {len(track)} != frame count {n}")
        maps = render_pose_maps(track, h, w)
        with torch.no_grad():
            return models.poctr(frames_to_tensor(maps)).detach(), maps

    return {"ref_feats": ref_feats, "context": context,
            "pose_residual": pose_residual, "hw": (h, w)}


def _initial_noise(shape, seed):
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(*shape, generator=g)


def _branch_eps(models, z, t, pose_add, cond, with_features):
    with torch.no_grad():
        out = models.denoiser(z, t, pose_add=pose_add,
                              ref_feats=cond["ref_feats"],
                              context=cond["context"],
                              temporal=True, return_features=with_features)
    if with_features:
        return out[0], [f.detach() for f in out[1]]
    return out, None


def reconstruct_video(source, source_poses, models, schedule, cfg: SamplerConfig):
    """Unguided DDIM run conditioned on the source's own poses.

    Returns (VideoClip, taps) where taps[k] holds the decoder features of
    retained step k, for reuse as guidance references.
    """
    cfg.validate(schedule)
    frames = _clip_frames(source)
    cond = build_conditioning(models, frames, source_poses)
    pose_add, _ = cond["pose_residual"](source_poses)

    z = _initial_noise(encode_frames(frames).shape, cfg.seed)
    ladder = schedule.ddim_timesteps(cfg.steps)
    taps_per_step = []
    for i, t in enumerate(ladder):
        t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
        eps, taps = _branch_eps(models, z, t, pose_add, cond, with_features=True)
        taps_per_step.append(taps)
        z = ddim_step(z, eps, t, schedule, t_prev)
    video = VideoClip(clip_to_video(decode_latents(z)))
    return video, taps_per_step


def produce_masks(models, source_frames, source_poses, aligned_target_poses, tau):
    """Segment the protagonist under both pose tracks.

    M_r: mask under the source pose; M_e: predicted mask under the aligned
    target pose; both binarized at tau.
    """
    if models.seg is None:
        raise ContractError("no segmentation model available to produce masks")
    n, h, w, _ = source_frames.shape
    src_maps = render_pose_maps(source_poses, h, w)
    tgt_maps = render_pose_maps(aligned_target_poses, h, w)
    m_r = binarize(predict_masks(models.seg, source_frames, src_maps), tau)
    m_e = binarize(predict_masks(models.seg, source_frames, tgt_maps), tau)
    return m_e, m_r


def edit_video(source, source_poses, aligned_target_poses, models, schedule,
               cfg: SamplerConfig, mask_override=None):
    """Full two-branch guided edit; target poses must already be aligned.

    mask_override: optional (m_e, m_r) binary arrays at frame resolution to
    bypass the segmentation model.
    """
    cfg.validate(schedule)
    frames = _clip_frames(source)
    n = frames.shape[0]
    if len(aligned_target_poses) != n:
        raise ContractError(
            f"target pose track length {len(aligned_target_poses)} != frame count {n}")
    cond = build_conditioning(models, frames, source_poses)
    pose_add_r, _ = cond["pose_residual"](source_poses)
    pose_add_e, _ = cond["pose_residual"](aligned_target_poses)

    if mask_override is not None:
        m_e, m_r = mask_override
        m_e = np.asarray(m_e).astype(np.uint8)
        m_r = np.asarray(m_r).astype(np.uint8)
    else:
        m_e, m_r = produce_masks(models, frames, source_poses,
                                 aligned_target_poses, cfg.mask_tau)
    if m_e.shape != frames.shape[:3] or m_r.shape != frames.shape[:3]:
        raise ContractError("masks must match the clip at frame resolution")

    latent_shape = encode_frames(frames).shape
    z_r = _initial_noise(latent_shape, cfg.seed)
    z_e = z_r.clone() if cfg.shared_noise else _initial_noise(latent_shape, cfg.seed + 1)

    gcfg = cfg.guidance
    ladder = schedule.ddim_timesteps(cfg.steps)
    traces = []
    grad_norms = []
    empty_any = {k: False for k in ("fg", "over", "body", "com")}
    guided_steps = 0

    for i, t in enumerate(ladder):
        t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
        eps_r, taps_r = _branch_eps(models, z_r, t, pose_add_r, cond, with_features=True)

        apply_guidance = cfg.guidance_on and gcfg.scale > 0 and gcfg.active_at(t)
        if apply_guidance:
            cache = {}

            def closure(zz):
                eps, feats = models.denoiser(
                    zz, t, pose_add=pose_add_e, ref_feats=cond["ref_feats"],
                    context=cond["context"], temporal=True, return_features=True)
                cache["eps"] = eps.detach()
                return feats

            raw_grad, info = guidance_gradient(
                z_e, closure, taps_r, m_e, m_r, gcfg, timestep=t)
            eps_e = cache["eps"]
            score_grad = gcfg.sign * gcfg.scale * raw_grad
            eps_e = guided_epsilon(eps_e, score_grad, schedule.alpha_bar_at(t))
            traces.append({"step": i, "t": t, "L_fg": info["fg"],
                           "L_over": info["over"], "L_body": info["body"],
                           "L_com": info["com"], "grad_norm": info["grad_norm"]})
            grad_norms.append(info["grad_norm"])
            for k in empty_any:
                empty_any[k] |= info["empty"][k]
            guided_steps += 1
        else:
            eps_e, _ = _branch_eps(models, z_e, t, pose_add_e, cond, with_features=False)
            traces.append({"step": i, "t": t, "L_fg": 0.0, "L_over": 0.0,
                           "L_body": 0.0, "L_com": 0.0, "grad_norm": 0.0})

        z_e = ddim_step(z_e, eps_e, t, schedule, t_prev)
        z_r = ddim_step(z_r, eps_r, t, schedule, t_prev)

    edited = VideoClip(clip_to_video(decode_latents(z_e)))
    recon = VideoClip(clip_to_video(decode_latents(z_r)))
    diagnostics = {
        "guided_steps": guided_steps,
        "empty_regions": empty_any,
        "grad_norms": grad_norms,
        "mask_fraction_e": float(np.mean(m_e)),
        "mask_fraction_r": float(np.mean(m_r)),
    }
    return EditResult(edited=edited, reconstructed=recon, traces=traces,
                      diagnostics=diagnostics)


def write_trace_csv(path, traces):
    """Loss-trace CSV: step,t,L_fg,L_over,L_body,L_com,grad_norm."""
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        for row in traces:
            writer.writerow({k: row[k] for k in TRACE_FIELDS})
