import json
import os

import numpy as np
import pytest
import torch

from motiongraft.checkpoint import build_models, save_checkpoint
from motiongraft.cli import build_parser, main
from motiongraft.synthkit import load_clip, list_scenes

TINY_MODEL = {
    "denoiser": {"widths": [8, 16, 24, 32], "emb_dim": 32, "ctx_dim": 32,
                 "attn_heads": 2, "temporal_heads": 2},
    "poctr": {"widths": [8, 16, 16, 24]},
    "rectr": {"widths": [8, 16, 16, 24]},
    "appear": {"dim": 32, "token_grid": 2},
    "seg": {"resolution": 64, "encoder_widths": [8, 8, 16, 16],
            "encoder_strides": [1, 2, 2, 1], "patch_size": 4,
            "core_depth": 1, "core_dim": 32, "core_heads": 4},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    """Config that keeps every verb to a few seconds of CPU time."""
    cfg = {
        "dataset": {"num_scenes": 3, "frames": 8, "height": 64, "width": 64},
        "model": TINY_MODEL,
        "train": {
            "stage1": {"steps": 4, "batch_size": 2, "lr": 1e-3},
            "stage2": {"steps": 3, "clips_per_step": 1, "window": 3},
            "segmentation": {"steps": 4, "batch_size": 2},
        },
        "sampler": {"steps": 2},
    }
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, tiny_config):
    """One synth + stage1 + seg + stage2 pipeline shared by the checks below."""
    root = tmp_path_factory.mktemp("pipeline")
    data = str(root / "scenes")
    s1 = str(root / "s1")
    seg = str(root / "seg")
    s2 = str(root / "s2")
    assert main(["synth", "--config", tiny_config, "--out", data]) == 0
    assert main(["train-stage1", "--config", tiny_config,
                 "--data", data, "--out", s1]) == 0
    assert main(["train-seg", "--config", tiny_config,
                 "--data", data, "--out", seg, "--ckpt", s1]) == 0
    assert main(["train-stage2", "--config", tiny_config,
                 "--data", data, "--out", s2, "--ckpt", seg]) == 0
    return {"root": root, "data": data, "s1": s1, "seg": seg, "s2": s2,
            "config": tiny_config}


def read_report(out_dir):
    with open(os.path.join(out_dir, "report.json")) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# parser surface


def test_every_verb_takes_config_and_seed():
    parser = build_parser()
    sub = next(a for a in parser._actions
               if isinstance(a, type(parser._subparsers._group_actions[0])))
    for name, sp in sub.choices.items():
        flags = {s for a in sp._actions for s in a.option_strings}
        assert "--config" in flags, name
        assert "--seed" in flags, name


def test_unknown_verb_rejected(capsys):
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_missing_config_file_is_a_clean_error(capsys):
    rc = main(["synth", "--config", "/nonexistent/zzz.json", "--out", "/tmp/x"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_scenes_and_report(workdir):
    paths = list_scenes(workdir["data"])
    assert len(paths) == 3
    clip, poses, masks, meta = load_clip(paths[0])
    assert clip.frames.shape == (8, 64, 64, 3)
    assert poses is not None and masks is not None
    report = read_report(workdir["data"])
    assert report["command"] == "synth"
    assert report["config"]["dataset"]["num_scenes"] == 3
    assert len(report["scenes"]) == 3


def test_synth_seed_override_changes_data(tiny_config, tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    assert main(["synth", "--config", tiny_config, "--out", a,
                 "--seed", "100"]) == 0
    assert main(["synth", "--config", tiny_config, "--out", b,
                 "--seed", "101"]) == 0
    ca = load_clip(list_scenes(a)[0])[0]
    cb = load_clip(list_scenes(b)[0])[0]
    assert not np.array_equal(ca.frames, cb.frames)
    assert read_report(a)["config"]["dataset"]["seed"] == 100


# ---------------------------------------------------------------------------
# training verbs


def test_train_reports_checkpoint_and_losses(workdir):
    report = read_report(workdir["s1"])
    assert report["command"] == "train-stage1"
    assert report["checkpoint"]["weights_sha256"]
    assert os.path.exists(report["losses"])
    with open(report["losses"]) as f:
        rows = f.read().strip().splitlines()
    assert rows[0] == "step,loss"
    assert len(rows) == 1 + 4
    assert np.isfinite(report["metrics"]["final_loss"])


def test_train_stage2_requires_checkpoint(tiny_config, workdir, capsys):
    rc = main(["train-stage2", "--config", tiny_config,
               "--data", workdir["data"], "--out", "/tmp/nope"])
    assert rc == 2
    assert "--ckpt" in capsys.readouterr().err


def test_train_stage2_reports_mode_counts(workdir):
    report = read_report(workdir["s2"])
    counts = report["metrics"]["mode_counts"]
    assert counts["image"] + counts["video"] == 3


def test_train_on_missing_data_fails_cleanly(tiny_config, tmp_path, capsys):
    missing = tmp_path / "empty"
    rc = main(["train-stage1", "--config", tiny_config,
               "--data", str(missing), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "not found" in capsys.readouterr().err
    missing.mkdir()
    rc = main(["train-stage1", "--config", tiny_config,
               "--data", str(missing), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "no scenes" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sampling verbs


def test_reconstruct_writes_clip_and_metrics(workdir, tmp_path):
    scene = list_scenes(workdir["data"])[0]
    out = str(tmp_path / "recon")
    assert main(["reconstruct", "--config", workdir["config"],
                 "--scene", scene, "--ckpt", workdir["s2"],
                 "--out", out]) == 0
    report = read_report(out)
    for key in ("psnr", "ssim", "l1"):
        assert np.isfinite(report["metrics"][key])
    clip, poses, _, _ = load_clip(os.path.join(out, "recon"))
    assert clip.frames.shape == (8, 64, 64, 3)
    assert poses is not None


def test_edit_writes_both_branches_and_trace(workdir, tmp_path):
    scenes = list_scenes(workdir["data"])
    out = str(tmp_path / "edit")
    assert main(["edit", "--config", workdir["config"],
                 "--source", scenes[0], "--target", scenes[1],
                 "--ckpt", workdir["s2"], "--out", out]) == 0
    report = read_report(out)
    assert report["metrics"]["guided_steps"] == 2
    assert np.isfinite(report["metrics"]["background_l1"])
    edited = load_clip(os.path.join(out, "edited"))[0]
    recon = load_clip(os.path.join(out, "recon"))[0]
    assert edited.frames.shape == recon.frames.shape
    with open(os.path.join(out, "guidance_trace.csv")) as f:
        header = f.readline().strip()
    assert header == "step,t,L_fg,L_over,L_body,L_com,grad_norm"


def test_edit_needs_seg_weights(tiny_config, workdir, tmp_path, capsys):
    bare = str(tmp_path / "bare")
    models = build_models(TINY_MODEL, with_seg=False, seed=0)
    save_checkpoint(bare, models, model_config=TINY_MODEL)
    scenes = list_scenes(workdir["data"])
    rc = main(["edit", "--config", tiny_config, "--source", scenes[0],
               "--target", scenes[1], "--ckpt", bare,
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "segmentation" in capsys.readouterr().err


def test_eval_scores_recon_and_seg(workdir, tmp_path):
    out = str(tmp_path / "eval")
    assert main(["eval", "--config", workdir["config"],
                 "--data", workdir["data"], "--ckpt", workdir["s2"],
                 "--out", out, "--scenes", "2"]) == 0
    m = read_report(out)["metrics"]
    assert len(m["reconstruction"]) == 2
    assert np.isfinite(m["psnr_mean"])
    assert 0.0 <= m["seg_iou_mean"] <= 1.0
    assert 0.0 <= m["seg_cross_follows_target"] <= 1.0


def test_ablate_runs_requested_variants(workdir, tmp_path):
    out = str(tmp_path / "ablate")
    assert main(["ablate", "--config", workdir["config"],
                 "--ckpt", workdir["s2"], "--out", out,
                 "--variants", "full", "no_guidance"]) == 0
    m = read_report(out)["metrics"]
    assert set(m) == {"full", "no_guidance"}
    assert m["no_guidance"]["guided_steps"] == 0


def test_seed_override_changes_sampler_noise(workdir, tmp_path):
    scene = list_scenes(workdir["data"])[0]
    outs = []
    for seed in ("7", "8"):
        out = str(tmp_path / f"r{seed}")
        assert main(["reconstruct", "--config", workdir["config"],
                     "--scene", scene, "--ckpt", workdir["s2"],
                     "--out", out, "--seed", seed]) == 0
        outs.append(load_clip(os.path.join(out, "recon"))[0].frames)
    assert not np.array_equal(outs[0], outs[1])
