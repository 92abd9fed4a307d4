"""Two-stage denoiser training plus the segmentation trainer.

Stage one fits the image-domain pathway: the denoiser body (temporal
attention excluded), both controllers, and the appearance encoder learn
noise prediction on single frames re-posed within their own scene.  Stage
two freezes all of that and fits only the temporal attention layers on
short clip windows, mixing single-frame iterations back in at a fixed
rate so the image behavior is not forgotten.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Models
from .controllers import frames_to_tensor
from .diffusion import DiffusionSchedule, encode_frames
from .errors import ConfigError, ContractError
from .posekit import PoseSequence, render_pose_maps
from .segmentation import make_seg_batch, seg_train_step
from .synthkit import MaskSequence, VideoClip


@dataclass
class TrainResult:
    stage: str
    steps: int
    losses: list = field(default_factory=list)
    mode_counts: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def final_loss(self):
        """Mean loss over the last tenth of training (at least one step)."""
        if not self.losses:
            return float("nan")
        tail = self.losses[-max(1, len(self.losses) // 10):]
        return float(np.mean(tail))


def _scene_arrays(scene):
    clip, poses, masks = scene
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    mask_arr = masks.masks if isinstance(masks, MaskSequence) else np.asarray(masks)
    if not isinstance(poses, PoseSequence):
        raise ContractError("scene poses must be a PoseSequence")
    if frames.shape[0] != len(poses) or frames.shape[0] != mask_arr.shape[0]:
        raise ContractError("scene frames, poses, and masks disagree in length")
    return frames, poses, mask_arr


def sample_image_pair(scene, rng):
    """Source frame and a different target frame from the same scene.

    Returns (src 1xHxWx3, tgt 1xHxWx3, tgt_poses PoseSequence of length 1).
    """
    frames, poses, _ = _scene_arrays(scene)
    n = frames.shape[0]
    if n < 2:
        raise ContractError("scenes need at least 2 frames for pair sampling")
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    return (frames[i:i + 1], frames[j:j + 1], poses.slice(j, j + 1))


def sample_window_pair(scene, window, rng):
    """Two non-overlapping same-length windows of one scene.

    The earlier-drawn window acts as the reference track, the other as the
    denoising target; frames pair up positionally.  Returns
    (src WxHxWx3, tgt WxHxWx3, tgt_poses PoseSequence of length window).
    """
    frames, poses, _ = _scene_arrays(scene)
    n = frames.shape[0]
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if n < 2 * window:
        raise ContractError(
            f"scene too short for two windows of {window} ({n} frames)")
    # the first window must leave room for a disjoint second one
    first = [s for s in range(n - window + 1)
             if s >= window or s + 2 * window <= n]
    a = first[int(rng.integers(len(first)))]
    starts = [s for s in range(n - window + 1)
              if s + window <= a or s >= a + window]
    b = starts[int(rng.integers(len(starts)))]
    return (frames[a:a + window], frames[b:b + window],
            poses.slice(b, b + window))


def _batch_pose_track(pose_slices):
    kps = np.concatenate([p.keypoints for p in pose_slices], axis=0)
    vis = np.concatenate([p.visibility for p in pose_slices], axis=0)
    return PoseSequence(kps, vis)


def denoise_loss(models: Models, schedule: DiffusionSchedule, src_frames,
                 tgt_frames, tgt_poses: PoseSequence, generator, temporal,
                 per_sample_t=True):
    """Noise-prediction MSE for one conditioned batch.

    src_frames supply reference features and appearance tokens; tgt_frames
    are encoded, forward-noised to a random timestep, and the denoiser must
    recover the injected noise under the target-pose conditioning.  With
    per_sample_t=False the whole batch shares one timestep, which is how
    clip windows are trained (a sampled clip sits at a single noise level).
    """
    n, h, w, _ = src_frames.shape
    if tgt_frames.shape != src_frames.shape or len(tgt_poses) != n:
        raise ContractError("source, target, and pose batch sizes disagree")
    src_t = frames_to_tensor(src_frames)
    ref_feats = models.rectr(src_t)
    context = models.appear.tokens(src_t)
    pose_maps = render_pose_maps(tgt_poses, h, w)
    pose_add = models.poctr(frames_to_tensor(pose_maps))

    x0 = encode_frames(tgt_frames)
    if per_sample_t:
        t = torch.randint(1, schedule.T + 1, (n,), generator=generator)
    else:
        t = torch.randint(1, schedule.T + 1, (1,), generator=generator).expand(n)
    noise = torch.randn(x0.shape, generator=generator)
    z_t = schedule.q_sample(x0, t, noise)
    eps_hat = models.denoiser(z_t, t, pose_add=pose_add, ref_feats=ref_feats,
                              context=context, temporal=temporal)
    return F.mse_loss(eps_hat, noise)


def stage1_parameters(models: Models):
    """Everything trained image-domain: denoiser minus its temporal layers,
    both controllers, and the appearance encoder."""
    temporal_ids = {id(p) for p in models.denoiser.temporal_parameters()}
    params = [p for p in models.denoiser.parameters()
              if id(p) not in temporal_ids]
    for m in (models.poctr, models.rectr, models.appear):
        params.extend(m.parameters())
    return params


def stage2_parameters(models: Models):
    """Only the temporal attention layers."""
    return list(models.denoiser.temporal_parameters())


def _zero_grads(models: Models):
    for m in models.named().values():
        m.zero_grad(set_to_none=True)


def _lr_at(step, steps, lr, warmup):
    """Linear warmup then a half-cosine down to zero.

    A constant rate hot enough to train fast here is also hot enough to tip
    a late run into the predict-zero basin; the decayed tail avoids that
    without giving up the early speed.
    """
    if step < warmup:
        return lr * (step + 1) / warmup
    if steps <= warmup:
        return lr
    frac = (step - warmup) / (steps - warmup)
    return lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def _set_lr(opt, value):
    for group in opt.param_groups:
        group["lr"] = value


def _validate_common(scenes, steps, lr):
    if not scenes:
        raise ContractError("need at least one training scene")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if lr <= 0:
        raise ConfigError(f"lr must be positive, got {lr}")


def train_stage1(models: Models, scenes, schedule=None, steps=2000,
                 batch_size=8, lr=1e-3, grad_clip=1.0, seed=0, log_every=0):
    """Image-domain stage: per-sample timesteps, temporal layers untouched.

    The rate warms up over the first 100 steps and follows a half-cosine
    down from lr; grad_clip caps the global gradient norm each step (0
    disables).  Both guard the same failure: a hot late-training step
    tipping the run into the predict-zero basin it never climbs out of.
    """
    _validate_common(scenes, steps, lr)
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    schedule = schedule or DiffusionSchedule()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(int(seed))
    params = list(stage1_parameters(models))
    opt = torch.optim.Adam(params, lr=lr)
    warmup = min(100, max(1, steps // 10))

    start = time.perf_counter()
    result = TrainResult(stage="image", steps=steps)
    for step in range(steps):
        srcs, tgts, pslices = [], [], []
        for _ in range(batch_size):
            scene = scenes[int(rng.integers(len(scenes)))]
            s, g, p = sample_image_pair(scene, rng)
            srcs.append(s)
            tgts.append(g)
            pslices.append(p)
        loss = denoise_loss(models, schedule,
                            np.concatenate(srcs), np.concatenate(tgts),
                            _batch_pose_track(pslices), gen, temporal=False)
        _zero_grads(models)
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
        _set_lr(opt, _lr_at(step, steps, lr, warmup))
        opt.step()
        result.losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            print(f"stage1 step {step + 1}/{steps} loss {result.losses[-1]:.5f}")
    result.seconds = time.perf_counter() - start
    return result


def train_stage2(models: Models, scenes, schedule=None, steps=1000,
                 clips_per_step=2, window=4, p_img=0.4, lr=1e-3,
                 grad_clip=1.0, seed=0, log_every=0):
    """Temporal stage: only temporal-attention weights receive updates.

    Each iteration flips one coin: with probability p_img it trains on
    single frames (as one-frame clips, temporal path active), otherwise on
    clip windows.  Gradients from clips_per_step separate draws accumulate
    into one optimizer step; clips share a timestep internally but not with
    each other.
    """
    _validate_common(scenes, steps, lr)
    if clips_per_step < 1:
        raise ConfigError(f"clips_per_step must be >= 1, got {clips_per_step}")
    if not (0.0 <= p_img <= 1.0):
        raise ConfigError(f"p_img must be in [0, 1], got {p_img}")
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    long_enough = [s for s in scenes
                   if _scene_arrays(s)[0].shape[0] >= 2 * window]
    if not long_enough:
        raise ContractError(
            f"no scene is long enough for two windows of {window}")

    schedule = schedule or DiffusionSchedule()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(int(seed))
    params = stage2_parameters(models)
    opt = torch.optim.Adam(params, lr=lr)
    warmup = min(100, max(1, steps // 10))

    # freeze the image-domain weights so backward skips their gradients;
    # restored on exit
    frozen = []
    param_ids = {id(p) for p in params}
    for m in models.named().values():
        for p in m.parameters():
            if id(p) not in param_ids and p.requires_grad:
                p.requires_grad_(False)
                frozen.append(p)

    start = time.perf_counter()
    result = TrainResult(stage="video", steps=steps,
                         mode_counts={"image": 0, "video": 0})
    try:
        for step in range(steps):
            image_mode = bool(rng.random() < p_img)
            result.mode_counts["image" if image_mode else "video"] += 1
            _zero_grads(models)
            step_losses = []
            for _ in range(clips_per_step):
                if image_mode:
                    scene = scenes[int(rng.integers(len(scenes)))]
                    s, g, p = sample_image_pair(scene, rng)
                else:
                    scene = long_enough[int(rng.integers(len(long_enough)))]
                    s, g, p = sample_window_pair(scene, window, rng)
                loss = denoise_loss(models, schedule, s, g, p, gen,
                                    temporal=True, per_sample_t=False)
                (loss / clips_per_step).backward()
                step_losses.append(float(loss.detach()))
            if grad_clip:
                torch.nn.utils.clip_grad_norm_(params, grad_clip)
            _set_lr(opt, _lr_at(step, steps, lr, warmup))
            opt.step()
            result.losses.append(float(np.mean(step_losses)))
            if log_every and (step + 1) % log_every == 0:
                print(f"stage2 step {step + 1}/{steps} "
                      f"loss {result.losses[-1]:.5f}")
    finally:
        for p in frozen:
            p.requires_grad_(True)
    result.seconds = time.perf_counter() - start
    return result


def train_segmentation(seg_model, scenes, steps=1500, batch_size=8, lr=1e-3,
                       seed=0, log_every=0):
    """Fit the mask head on (source frame, target pose map, target mask)."""
    _validate_common(scenes, steps, lr)
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    scene_data = []
    for scene in scenes:
        frames, poses, masks = _scene_arrays(scene)
        h, w = frames.shape[1:3]
        scene_data.append((frames, render_pose_maps(poses, h, w), masks))

    opt = torch.optim.Adam(seg_model.parameters(), lr=lr)
    start = time.perf_counter()
    result = TrainResult(stage="segmentation", steps=steps)
    seg_model.train()
    for step in range(steps):
        fr, pm, mk = make_seg_batch(scene_data, rng, batch_size)
        loss = seg_train_step(seg_model, opt, fr, pm, mk)
        result.losses.append(float(loss))
        if log_every and (step + 1) % log_every == 0:
            print(f"seg step {step + 1}/{steps} loss {result.losses[-1]:.5f}")
    seg_model.eval()
    result.seconds = time.perf_counter() - start
    return result
