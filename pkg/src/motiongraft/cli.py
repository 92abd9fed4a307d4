"""Command line front end: one verb per pipeline stage.

Every verb reads the same JSON config (all keys optional) and accepts a
--seed override so runs can be varied without editing files.  Commands that
produce anything write a report.json next to their outputs: the fully merged
config echo, the checkpoint identity, the metrics, and where the loss traces
went.  That file is the record of what ran.

    motiongraft synth        --out data/scenes
    motiongraft train-seg    --data data/scenes --out runs/seg
    motiongraft train-stage1 --data data/scenes --out runs/s1
    motiongraft train-stage2 --data data/scenes --ckpt runs/s1 --out runs/s2
    motiongraft reconstruct  --scene data/scenes/scene_0000 --ckpt runs/s2 --out runs/recon
    motiongraft edit         --source A --target B --ckpt runs/s2 --out runs/edit
    motiongraft eval         --data data/scenes --ckpt runs/s2 --out runs/eval
    motiongraft ablate       --ckpt runs/s2 --out runs/ablate
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .ablation import VARIANT_NAMES, make_edit_case, run_ablation
from .checkpoint import Models, build_models, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .errors import (CheckpointError, ConfigError, ContractError, DatasetError,
                     DegeneratePoseError, GuidanceError)
from .metrics import l1_error, psnr, ssim
from .posekit import align_pose_sequence, render_pose_maps
from .sampler import edit_video, produce_masks, reconstruct_video, write_trace_csv
from .segmentation import SegModel, SegModelConfig, binarize, iou, predict_masks
from .synthkit import VideoClip, build_dataset, list_scenes, load_clip, save_clip
from .training import train_segmentation, train_stage1, train_stage2

_ERRORS = (CheckpointError, ConfigError, ContractError, DatasetError,
           DegeneratePoseError, GuidanceError)

# seed override targets: which config key --seed rewrites, per verb
_SEED_SLOT = {
    "synth": ("dataset", "seed"),
    "train-seg": ("train", "seed"),
    "train-stage1": ("train", "seed"),
    "train-stage2": ("train", "seed"),
    "reconstruct": ("sampler", "seed"),
    "edit": ("sampler", "seed"),
    "eval": ("sampler", "seed"),
    "ablate": ("sampler", "seed"),
}


def _configure(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        raw = copy.deepcopy(cfg.raw)
        section, key = _SEED_SLOT[args.command]
        raw[section][key] = args.seed
        cfg = RunConfig(raw=raw).validate()
    return cfg


def _report(out_dir, command, cfg, payload):
    os.makedirs(out_dir, exist_ok=True)
    body = {"command": command, "config": cfg.echo()}
    body.update(payload)
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as f:
        json.dump(body, f, indent=1, default=float)
    return path


def _write_losses(out_dir, result):
    path = os.path.join(out_dir, "losses.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(result.losses):
            writer.writerow([i, f"{loss:.6f}"])
    return path


def _checkpoint_identity(path):
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    return {"path": os.path.abspath(path),
            "weights_sha256": manifest["weights_sha256"]}


def _load_scene(path, need_poses=True, need_masks=False):
    clip, poses, masks, _ = load_clip(path)
    if need_poses and poses is None:
        raise DatasetError(f"scene has no pose track: {path}")
    if need_masks and masks is None:
        raise DatasetError(f"scene has no mask track: {path}")
    return clip, poses, masks


def _load_scenes(root):
    paths = list_scenes(root)
    if not paths:
        raise DatasetError(f"no scenes found under {root}")
    return [tuple(load_clip(p)[:3]) for p in paths], paths


def _models_from(args, cfg, with_seg):
    """Checkpoint models when --ckpt is given, fresh ones otherwise."""
    if getattr(args, "ckpt", None):
        models, manifest = load_checkpoint(args.ckpt)
        if with_seg and models.seg is None:
            seg = SegModel(SegModelConfig(**manifest["model_config"]["seg"]))
            models = dataclasses.replace(models, seg=seg)
        return models, manifest["model_config"]
    model_config = cfg.model_config()
    seed = cfg.raw["train"]["seed"]
    return build_models(model_config, with_seg=with_seg, seed=seed), model_config


def cmd_synth(args):
    cfg = _configure(args)
    d = cfg.dataset
    root = args.out or d["root"]
    paths = build_dataset(root, d["num_scenes"], seed=d["seed"],
                          height=d["height"], width=d["width"],
                          frames=d["frames"], pan_fraction=d["pan_fraction"])
    report = _report(root, "synth", cfg, {
        "scenes": [os.path.basename(p) for p in paths],
        "root": os.path.abspath(root),
    })
    print(f"wrote {len(paths)} scenes under {root} ({report})")
    return 0


def _run_training(args, stage):
    cfg = _configure(args)
    scenes, _ = _load_scenes(args.data)
    tc = cfg.train_config(stage)
    schedule = cfg.schedule()
    with_seg = stage == "segmentation"
    models, model_config = _models_from(args, cfg, with_seg=with_seg)

    if stage == "image":
        result = train_stage1(models, scenes, schedule=schedule, steps=tc.steps,
                              batch_size=tc.batch_size, lr=tc.lr, seed=tc.seed,
                              log_every=args.log_every)
    elif stage == "video":
        result = train_stage2(models, scenes, schedule=schedule, steps=tc.steps,
                              clips_per_step=tc.clips_per_step, window=tc.window,
                              p_img=tc.p_img, lr=tc.lr, seed=tc.seed,
                              log_every=args.log_every)
    else:
        result = train_segmentation(models.seg, scenes, steps=tc.steps,
                                    batch_size=tc.batch_size, lr=tc.lr,
                                    seed=tc.seed, log_every=args.log_every)

    save_checkpoint(args.out, models, model_config, extra={"stage": stage})
    losses_path = _write_losses(args.out, result)
    payload = {
        "checkpoint": _checkpoint_identity(args.out),
        "losses": losses_path,
        "metrics": {"final_loss": result.final_loss,
                    "steps": result.steps, "seconds": result.seconds},
    }
    if result.mode_counts:
        payload["metrics"]["mode_counts"] = result.mode_counts
    report = _report(args.out, args.command, cfg, payload)
    print(f"{args.command}: final loss {result.final_loss:.5f} "
          f"in {result.seconds:.0f}s ({report})")
    return 0


def cmd_train_seg(args):
    return _run_training(args, "segmentation")


def cmd_train_stage1(args):
    return _run_training(args, "image")


def cmd_train_stage2(args):
    if not args.ckpt:
        raise ConfigError("train-stage2 needs --ckpt with stage-1 weights; "
                          "temporal layers are tuned on top of them")
    return _run_training(args, "video")


def cmd_reconstruct(args):
    cfg = _configure(args)
    clip, poses, _ = _load_scene(args.scene)
    models, manifest = load_checkpoint(args.ckpt)
    sampler_cfg = cfg.sampler_config()
    recon, _ = reconstruct_video(clip, poses, models, cfg.schedule(), sampler_cfg)
    os.makedirs(args.out, exist_ok=True)
    save_clip(os.path.join(args.out, "recon"), recon, poses=poses)
    metrics = {
        "psnr": psnr(recon.frames, clip.frames),
        "ssim": ssim(recon.frames, clip.frames),
        "l1": l1_error(recon.frames, clip.frames),
    }
    report = _report(args.out, "reconstruct", cfg, {
        "checkpoint": _checkpoint_identity(args.ckpt),
        "scene": os.path.abspath(args.scene),
        "metrics": metrics,
    })
    print(f"reconstruct: PSNR {metrics['psnr']:.2f} dB "
          f"SSIM {metrics['ssim']:.4f} ({report})")
    return 0


def cmd_edit(args):
    cfg = _configure(args)
    source, src_poses, _ = _load_scene(args.source)
    _, tgt_poses, _ = _load_scene(args.target)
    models, _ = load_checkpoint(args.ckpt)
    if models.seg is None:
        raise CheckpointError(
            "edit needs a checkpoint with segmentation weights; run train-seg")
    n = min(len(src_poses), len(tgt_poses))
    source = VideoClip(source.frames[:n])
    src_poses = src_poses.slice(0, n)
    aligned = align_pose_sequence(src_poses, tgt_poses.slice(0, n))

    sampler_cfg = cfg.sampler_config()
    result = edit_video(source, src_poses, aligned, models,
                        cfg.schedule(), sampler_cfg)
    os.makedirs(args.out, exist_ok=True)
    save_clip(os.path.join(args.out, "edited"), result.edited, poses=aligned)
    save_clip(os.path.join(args.out, "recon"), result.reconstructed,
              poses=src_poses)
    trace_path = os.path.join(args.out, "guidance_trace.csv")
    write_trace_csv(trace_path, result.traces)

    m_e, m_r = produce_masks(models, source.frames, src_poses, aligned,
                             sampler_cfg.mask_tau)
    keep = (1.0 - np.maximum(m_e, m_r))[..., None]
    denom = keep.sum() * source.frames.shape[-1]
    bg_l1 = float((np.abs(result.edited.frames - source.frames) * keep).sum()
                  / max(denom, 1.0))
    metrics = {
        "recon_psnr": psnr(result.reconstructed.frames, source.frames),
        "background_l1": bg_l1,
        "mask_fraction_e": result.diagnostics["mask_fraction_e"],
        "mask_fraction_r": result.diagnostics["mask_fraction_r"],
        "guided_steps": result.diagnostics["guided_steps"],
        "empty_regions": result.diagnostics["empty_regions"],
    }
    report = _report(args.out, "edit", cfg, {
        "checkpoint": _checkpoint_identity(args.ckpt),
        "source": os.path.abspath(args.source),
        "target": os.path.abspath(args.target),
        "metrics": metrics,
        "traces": trace_path,
    })
    print(f"edit: recon PSNR {metrics['recon_psnr']:.2f} dB, background L1 "
          f"{bg_l1:.4f}, {metrics['guided_steps']} guided steps ({report})")
    return 0


def cmd_eval(args):
    cfg = _configure(args)
    scenes, paths = _load_scenes(args.data)
    models, _ = load_checkpoint(args.ckpt)
    sampler_cfg = cfg.sampler_config()
    schedule = cfg.schedule()
    limit = args.scenes or min(5, len(scenes))

    recon_rows = []
    for (clip, poses, _), path in list(zip(scenes, paths))[:limit]:
        if poses is None:
            raise DatasetError(f"scene has no pose track: {path}")
        recon, _ = reconstruct_video(clip, poses, models, schedule, sampler_cfg)
        recon_rows.append({
            "scene": os.path.basename(path),
            "psnr": psnr(recon.frames, clip.frames),
            "ssim": ssim(recon.frames, clip.frames),
            "l1": l1_error(recon.frames, clip.frames),
        })
    metrics = {
        "reconstruction": recon_rows,
        "psnr_mean": float(np.mean([r["psnr"] for r in recon_rows])),
        "ssim_mean": float(np.mean([r["ssim"] for r in recon_rows])),
    }

    if models.seg is not None:
        src_scores, cross_hits, cross_total = [], 0, 0
        for (clip, poses, masks), path in list(zip(scenes, paths))[:limit]:
            if masks is None:
                continue
            h, w = clip.frames.shape[1:3]
            maps = render_pose_maps(poses, h, w)
            pred = binarize(predict_masks(models.seg, clip.frames, maps),
                            sampler_cfg.mask_tau)
            src_scores += [iou(pred[k], masks.masks[k])
                           for k in range(len(pred))]
            half = len(pred) // 2
            if half:
                reps = np.repeat(clip.frames[:1], len(pred) - half, axis=0)
                cross = binarize(predict_masks(models.seg, reps, maps[half:]),
                                 sampler_cfg.mask_tau)
                for k in range(len(cross)):
                    to_tgt = iou(cross[k], masks.masks[half + k])
                    to_src = iou(cross[k], masks.masks[0])
                    cross_hits += int(to_tgt > to_src)
                    cross_total += 1
        if src_scores:
            metrics["seg_iou_mean"] = float(np.mean(src_scores))
            metrics["seg_iou_min"] = float(np.min(src_scores))
        if cross_total:
            metrics["seg_cross_follows_target"] = cross_hits / cross_total

    report = _report(args.out, "eval", cfg, {
        "checkpoint": _checkpoint_identity(args.ckpt),
        "data": os.path.abspath(args.data),
        "metrics": metrics,
    })
    line = f"eval: recon PSNR {metrics['psnr_mean']:.2f} dB"
    if "seg_iou_mean" in metrics:
        line += f", seg IoU {metrics['seg_iou_mean']:.3f}"
    print(f"{line} ({report})")
    return 0


def cmd_ablate(args):
    cfg = _configure(args)
    models, _ = load_checkpoint(args.ckpt)
    if models.seg is None:
        raise CheckpointError(
            "ablate needs a checkpoint with segmentation weights; run train-seg")
    names = tuple(args.variants) if args.variants else VARIANT_NAMES
    d = cfg.dataset
    case = make_edit_case(cfg.raw["sampler"]["seed"], frames=d["frames"],
                          height=d["height"], width=d["width"])
    sampler_cfg = cfg.sampler_config()
    table = run_ablation(models, cfg.schedule(), case, sampler_cfg, names)
    report = _report(args.out, "ablate", cfg, {
        "checkpoint": _checkpoint_identity(args.ckpt),
        "case": {"source_kind": case.source_kind, "target_kind": case.target_kind,
                 "seed": cfg.raw["sampler"]["seed"]},
        "metrics": table,
    })
    width = max(len(n) for n in names)
    for name in names:
        row = table[name]
        print(f"{name:<{width}}  psnr_vs_gt {row['psnr_vs_gt']:6.2f}  "
              f"bg_l1_vs_src {row['bg_l1_vs_src']:.4f}")
    print(f"({report})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="motiongraft",
        description="pose-guided motion editing on synthetic sprite video")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON config; omitted keys use defaults")
        p.add_argument("--seed", type=int, default=None,
                       help="override the seed this command keys off")
        for flag, (kw) in flags.items():
            p.add_argument(flag, **kw)
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth,
        **{"--out": dict(default=None, help="dataset root (default from config)")})
    train_flags = {
        "--data": dict(required=True, help="dataset root from synth"),
        "--out": dict(required=True, help="checkpoint directory to write"),
        "--ckpt": dict(default=None, help="checkpoint to continue from"),
        "--log-every": dict(type=int, default=0, dest="log_every"),
    }
    add("train-seg", cmd_train_seg, **train_flags)
    add("train-stage1", cmd_train_stage1, **train_flags)
    add("train-stage2", cmd_train_stage2, **train_flags)
    add("reconstruct", cmd_reconstruct, **{
        "--scene": dict(required=True),
        "--ckpt": dict(required=True),
        "--out": dict(required=True),
    })
    add("edit", cmd_edit, **{
        "--source": dict(required=True, help="scene directory to re-animate"),
        "--target": dict(required=True, help="scene directory driving the poses"),
        "--ckpt": dict(required=True),
        "--out": dict(required=True),
    })
    add("eval", cmd_eval, **{
        "--data": dict(required=True),
        "--ckpt": dict(required=True),
        "--out": dict(required=True),
        "--scenes": dict(type=int, default=0, help="how many scenes to score"),
    })
    add("ablate", cmd_ablate, **{
        "--ckpt": dict(required=True),
        "--out": dict(required=True),
        "--variants": dict(nargs="*", default=None,
                           help=f"subset of {', '.join(VARIANT_NAMES)}"),
    })
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
