"""Component knockouts and the matching targeted measurements.

Each knockout zeroes one consistency-loss weight (or disables score
guidance outright) and re-runs the same edit; the measurements are scoped
to the image region that term is supposed to protect, so a working term
shows up as a lower error in exactly its own region.  The synthetic data
makes a ground-truth edited clip available: the same scene re-rendered
under the target motion.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Models
from .errors import ContractError
from .guidance import compute_region_masks
from .metrics import psnr, region_l1
from .posekit import align_pose_sequence
from .sampler import SamplerConfig, edit_video, produce_masks
from .synthkit import (
    MOTION_KINDS,
    make_motion_program,
    random_scene_spec,
    synth_scene,
)

VARIANT_NAMES = ("full", "no_guidance", "no_fg", "no_over", "no_body", "no_com")


@dataclass
class EditCase:
    """A source clip plus the re-rendered ground truth for one motion swap."""

    source_clip: object
    source_poses: object
    source_masks: np.ndarray
    target_poses: object          # aligned onto the source framing
    gt_clip: object
    gt_masks: np.ndarray
    source_kind: str
    target_kind: str


def make_edit_case(seed, frames=8, height=64, width=64, target_kind=None):
    """Source scene plus the same scene re-rendered under another motion."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    spec_a = random_scene_spec(seed, height=height, width=width, frames=frames)
    kinds = [k for k in MOTION_KINDS]
    src_kind = None
    for k in MOTION_KINDS:
        probe = random_scene_spec(seed, height=height, width=width,
                                  frames=frames, motion_kind=k)
        if probe.motion == spec_a.motion:
            src_kind = k
            break
    if target_kind is None:
        choices = [k for k in kinds if k != src_kind]
        target_kind = choices[int(rng.integers(len(choices)))]
    motion_b = tuple(tuple(row) for row in
                     make_motion_program(target_kind, frames, rng))
    spec_b = replace(spec_a, motion=motion_b)

    clip_a, poses_a, masks_a = synth_scene(spec_a)
    clip_b, poses_b, masks_b = synth_scene(spec_b)
    aligned = align_pose_sequence(poses_a, poses_b)
    return EditCase(source_clip=clip_a, source_poses=poses_a,
                    source_masks=masks_a.masks, target_poses=aligned,
                    gt_clip=clip_b, gt_masks=masks_b.masks,
                    source_kind=src_kind or "unknown", target_kind=target_kind)


def guidance_variants(base, names=VARIANT_NAMES):
    """Named single-knob knockouts of a guidance configuration."""
    table = {
        "full": {},
        "no_guidance": {"scale": 0.0},
        "no_fg": {"alpha_fg": 0.0},
        "no_over": {"alpha_over": 0.0},
        "no_body": {"alpha_body": 0.0},
        "no_com": {"alpha_com": 0.0},
    }
    out = {}
    for name in names:
        if name not in table:
            raise ContractError(f"unknown ablation variant: {name}")
        out[name] = replace(base, **table[name])
    return out


def _region_metrics(edited, case: EditCase, m_e, m_r):
    regions = compute_region_masks(m_e, m_r)
    src = case.source_clip.frames
    gt = case.gt_clip.frames
    ed = edited.frames
    return {
        "psnr_vs_gt": psnr(ed, gt),
        "fg_l1_vs_gt": region_l1(ed, gt, regions.m_e),
        "over_l1_vs_src": region_l1(ed, src, regions.m_over),
        "body_l1_vs_gt": region_l1(ed, gt, regions.m_body),
        "bg_l1_vs_src": region_l1(ed, src, 1 - regions.m_e),
    }


def run_ablation(models: Models, schedule, case: EditCase,
                 sampler_cfg: SamplerConfig, variant_names=VARIANT_NAMES,
                 mask_override=None):
    """Run every requested knockout on one edit case.

    All variants share the segmentation masks (predicted once up front, or
    supplied through mask_override), so the only difference between runs is
    the guidance configuration itself.  Returns {variant: metrics}.
    """
    if mask_override is None:
        m_e, m_r = produce_masks(models, case.source_clip.frames,
                                 case.source_poses, case.target_poses,
                                 sampler_cfg.mask_tau)
    else:
        m_e, m_r = mask_override
        m_e = np.asarray(m_e).astype(np.uint8)
        m_r = np.asarray(m_r).astype(np.uint8)

    results = {}
    for name, gcfg in guidance_variants(sampler_cfg.guidance,
                                        variant_names).items():
        cfg = replace(sampler_cfg, guidance=gcfg,
                      guidance_on=sampler_cfg.guidance_on and name != "no_guidance")
        res = edit_video(case.source_clip, case.source_poses,
                         case.target_poses, models, schedule, cfg,
                         mask_override=(m_e, m_r))
        row = _region_metrics(res.edited, case, m_e, m_r)
        row["guided_steps"] = res.diagnostics["guided_steps"]
        row["mean_grad_norm"] = (float(np.mean(res.diagnostics["grad_norms"]))
                                 if res.diagnostics["grad_norms"] else 0.0)
        results[name] = row
    return results


# ---------------------------------------------------------------------------
# conditioning-cost accounting


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def controller_parameter_counts(models: Models):
    counts = {
        "pose": count_parameters(models.poctr),
        "reference": count_parameters(models.rectr),
        "appearance": count_parameters(models.appear),
    }
    counts["total"] = sum(counts.values())
    counts["denoiser"] = count_parameters(models.denoiser)
    counts["fraction_of_denoiser"] = counts["total"] / counts["denoiser"]
    return counts


def encoder_copy_parameter_count(denoiser):
    """Parameters of the common heavyweight alternative: conditioning by a
    trainable copy of the denoiser's own encoder half (stem, encoder
    blocks, downsamplers, and the bottleneck with its attention).

    Temporal layers are left out, which only makes the comparison harder
    to win.
    """
    prefixes = ("stem.", "enc_blocks.", "downs.", "mid_block1.",
                "mid_attn.", "mid_block2.")
    total = 0
    for name, p in denoiser.named_parameters():
        if name.startswith(prefixes):
            total += p.numel()
    if total == 0:
        raise ContractError("no encoder parameters found on the denoiser")
    return total


def efficiency_report(models: Models):
    """Side-by-side cost of the conv-only conditioning stack."""
    counts = controller_parameter_counts(models)
    standin = encoder_copy_parameter_count(models.denoiser)
    return {
        "controllers": counts,
        "encoder_copy_standin": standin,
        "controllers_vs_standin": counts["total"] / standin,
    }
