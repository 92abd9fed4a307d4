"""Unified checkpoint archive for all five networks.

A checkpoint is a directory with `weights.npz` (flat float arrays, keys
namespaced `denoiser.` / `poctr.` / `rectr.` / `appear.` / `seg.`) and a
`manifest.json` carrying a format version, the model hyperparameters needed
to rebuild the modules, and free-form bookkeeping (step counts, stage).  The
manifest is the source of truth at load time: weights are strictly matched
against freshly built modules.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .controllers import AppearanceEncoder, PoseController, ReferenceController
from .denoiser import Denoiser
from .errors import CheckpointError, ConfigError
from .segmentation import SegModel, SegModelConfig

FORMAT_VERSION = 1
NAMESPACES = ("denoiser", "poctr", "rectr", "appear", "seg")

DEFAULT_MODEL_CONFIG = {
    # widths[0] must cover the 48 latent channels or noise prediction
    # saturates: white noise does not survive a narrower conduit
    "denoiser": {"widths": [64, 96, 128, 160], "emb_dim": 128, "ctx_dim": 128,
                 "attn_heads": 4, "temporal_heads": 2},
    "poctr": {"widths": [24, 32, 48, 64]},
    "rectr": {"widths": [24, 32, 48, 64]},
    "appear": {"dim": 128, "token_grid": 4},
    "seg": asdict(SegModelConfig()),
}


@dataclass
class Models:
    denoiser: Denoiser
    poctr: PoseController
    rectr: ReferenceController
    appear: AppearanceEncoder
    seg: SegModel | None = None

    def named(self):
        out = {"denoiser": self.denoiser, "poctr": self.poctr,
               "rectr": self.rectr, "appear": self.appear}
        if self.seg is not None:
            out["seg"] = self.seg
        return out

    def eval(self):
        for m in self.named().values():
            m.eval()
        return self


def _merged_config(model_config):
    cfg = {k: dict(v) if isinstance(v, dict) else v
           for k, v in DEFAULT_MODEL_CONFIG.items()}
    for key, val in (model_config or {}).items():
        if key not in cfg:
            raise ConfigError(f"unknown model config section: {key}")
        if not isinstance(val, dict):
            raise ConfigError(f"model config section {key} must be a mapping")
        for k in val:
            if k not in cfg[key]:
                raise ConfigError(f"unknown model config key: {key}.{k}")
        cfg[key].update(val)
    if cfg["denoiser"]["ctx_dim"] != cfg["appear"]["dim"]:
        raise ConfigError(
            "denoiser ctx_dim must equal the appearance token dim "
            f"({cfg['denoiser']['ctx_dim']} vs {cfg['appear']['dim']})")
    return cfg


def build_models(model_config=None, with_seg=True, seed=None) -> Models:
    """Construct fresh modules from a (partial) model config dict."""
    cfg = _merged_config(model_config)
    if seed is not None:
        torch.manual_seed(int(seed))
    denoiser = Denoiser(widths=tuple(cfg["denoiser"]["widths"]),
                        emb_dim=cfg["denoiser"]["emb_dim"],
                        ctx_dim=cfg["denoiser"]["ctx_dim"],
                        attn_heads=cfg["denoiser"]["attn_heads"],
                        temporal_heads=cfg["denoiser"]["temporal_heads"])
    poctr = PoseController(widths=tuple(cfg["poctr"]["widths"]))
    rectr = ReferenceController(widths=tuple(cfg["rectr"]["widths"]),
                                level_widths=tuple(cfg["denoiser"]["widths"]))
    appear = AppearanceEncoder(dim=cfg["appear"]["dim"],
                               token_grid=cfg["appear"]["token_grid"])
    seg = None
    if with_seg:
        seg_kwargs = dict(cfg["seg"])
        for key in ("encoder_widths", "encoder_strides"):
            seg_kwargs[key] = tuple(seg_kwargs[key])
        seg = SegModel(SegModelConfig(**seg_kwargs))
    return Models(denoiser=denoiser, poctr=poctr, rectr=rectr,
                  appear=appear, seg=seg)


def resolved_model_config(model_config=None):
    return _merged_config(model_config)


def save_checkpoint(path, models: Models, model_config=None, extra=None):
    """Write weights.npz + manifest.json; returns the weights sha256."""
    os.makedirs(path, exist_ok=True)
    arrays = {}
    for ns, module in models.named().items():
        for key, tensor in module.state_dict().items():
            arrays[f"{ns}.{key}"] = tensor.detach().cpu().numpy()
    weights_path = os.path.join(path, "weights.npz")
    np.savez(weights_path, **arrays)
    digest = file_sha256(weights_path)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": _merged_config(model_config),
        "namespaces": sorted(models.named().keys()),
        "weights_sha256": digest,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return digest


def load_checkpoint(path):
    """Rebuild Models from an archive; returns (models, manifest)."""
    man_path = os.path.join(path, "manifest.json")
    weights_path = os.path.join(path, "weights.npz")
    if not os.path.exists(man_path):
        raise CheckpointError(f"missing checkpoint manifest: {man_path}")
    if not os.path.exists(weights_path):
        raise CheckpointError(f"missing checkpoint weights: {weights_path}")
    with open(man_path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')}")

    with_seg = "seg" in manifest.get("namespaces", [])
    models = build_models(manifest["model_config"], with_seg=with_seg)

    data = np.load(weights_path)
    grouped = {ns: {} for ns in manifest["namespaces"]}
    for key in data.files:
        ns, _, rest = key.partition(".")
        if ns not in grouped:
            raise CheckpointError(f"unexpected weight namespace: {ns}")
        grouped[ns][rest] = torch.from_numpy(data[key])
    for ns, module in models.named().items():
        if not grouped.get(ns):
            raise CheckpointError(f"checkpoint has no weights for {ns}")
        try:
            module.load_state_dict(grouped[ns], strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"weights for {ns} do not fit: {e}") from e
    models.eval()
    return models, manifest


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
