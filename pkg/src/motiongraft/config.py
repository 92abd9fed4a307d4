"""One JSON file drives every command.

A config file may set any subset of the known keys; everything absent falls
back to the defaults below, and an empty file (or no file at all) means
"all defaults".  Unknown sections or keys fail loudly with the offending
dotted path, and every numeric range is checked up front so a bad value
surfaces before any work starts.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field

from .checkpoint import DEFAULT_MODEL_CONFIG, resolved_model_config
from .diffusion import DiffusionSchedule
from .errors import ConfigError, ContractError
from .guidance import GuidanceConfig
from .sampler import SamplerConfig

DEFAULTS = {
    "dataset": {
        "root": "data/scenes",
        "num_scenes": 30,
        "seed": 0,
        "height": 64,
        "width": 64,
        "frames": 8,
        "pan_fraction": 0.3,
    },
    # the architecture table; any subset may be overridden (see checkpoint.py)
    "model": copy.deepcopy(DEFAULT_MODEL_CONFIG),
    "schedule": {
        "timesteps": 1000,
        "beta_start": 8.5e-4,
        "beta_end": 0.012,
    },
    "train": {
        "seed": 0,
        "stage1": {"steps": 2000, "batch_size": 8, "lr": 1e-3},
        "stage2": {"steps": 1000, "clips_per_step": 2, "window": 4,
                   "p_img": 0.4, "lr": 1e-3},
        "segmentation": {"steps": 1500, "batch_size": 8, "lr": 1e-3},
    },
    "sampler": {
        "steps": 50,
        "shared_noise": True,
        "guidance_on": True,
        "seed": 0,
        "mask_tau": 0.5,
    },
    "guidance": {
        "alpha_fg": 4.0,
        "alpha_over": 6.0,
        "alpha_body": 2.4,
        "alpha_com": 1.2,
        "sign": -1.0,
        "scale": 1.0,
        "t_min": 0,
        "t_max": None,
        "taps": [2, 3],
        "clamp_floor": 0.0,
    },
}

STAGES = ("image", "video", "segmentation")
_STAGE_SECTION = {"image": "stage1", "video": "stage2",
                  "segmentation": "segmentation"}


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    steps: int
    lr: float
    seed: int = 0
    batch_size: int = 8
    clips_per_step: int = 2
    window: int = 4
    p_img: float = 0.4

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"train stage must be one of {STAGES}, "
                              f"got {self.stage!r}")
        if self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(
                f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.clips_per_step < 1:
            raise ConfigError(
                f"train.clips_per_step must be >= 1, got {self.clips_per_step}")
        if self.window < 1:
            raise ConfigError(f"train.window must be >= 1, got {self.window}")
        if not (0.0 <= self.p_img <= 1.0):
            raise ConfigError(f"train.p_img must be in [0, 1], got {self.p_img}")
        return self


def _merge(defaults, override, path):
    """Recursive dict merge; any key absent from the defaults is an error."""
    out = copy.deepcopy(defaults)
    for key, val in override.items():
        dotted = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {dotted} must be a mapping")
            out[key] = _merge(out[key], val, dotted)
        else:
            out[key] = val
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @property
    def dataset(self):
        return self.raw["dataset"]

    def model_config(self):
        return resolved_model_config(self.raw["model"])

    def schedule(self):
        s = self.raw["schedule"]
        return DiffusionSchedule(timesteps=s["timesteps"],
                                 beta_start=s["beta_start"],
                                 beta_end=s["beta_end"])

    def guidance_config(self):
        g = dict(self.raw["guidance"])
        g["taps"] = tuple(int(i) for i in g["taps"])
        return GuidanceConfig(**g).validate()

    def sampler_config(self, **overrides):
        s = {**self.raw["sampler"], **overrides}
        cfg = SamplerConfig(steps=s["steps"], shared_noise=s["shared_noise"],
                            guidance_on=s["guidance_on"], seed=s["seed"],
                            mask_tau=s["mask_tau"],
                            guidance=self.guidance_config())
        return cfg.validate(self.schedule())

    def train_config(self, stage):
        if stage not in STAGES:
            raise ConfigError(f"train stage must be one of {STAGES}, "
                              f"got {stage!r}")
        section = dict(self.raw["train"][_STAGE_SECTION[stage]])
        return TrainConfig(stage=stage, seed=self.raw["train"]["seed"],
                           **section).validate()

    def echo(self):
        """Fully merged config as JSON-ready content, for run reports."""
        out = copy.deepcopy(self.raw)
        out["model"] = self.model_config()
        return out

    def validate(self):
        d = self.dataset
        if d["num_scenes"] < 1:
            raise ConfigError(
                f"dataset.num_scenes must be >= 1, got {d['num_scenes']}")
        if d["frames"] < 2:
            raise ConfigError(f"dataset.frames must be >= 2, got {d['frames']}")
        for key in ("height", "width"):
            if d[key] < 16 or d[key] % 8:
                raise ConfigError(
                    f"dataset.{key} must be >= 16 and divisible by 8, "
                    f"got {d[key]}")
        if not (0.0 <= d["pan_fraction"] <= 1.0):
            raise ConfigError(
                f"dataset.pan_fraction must be in [0, 1], got {d['pan_fraction']}")
        try:
            self.model_config()
            self.sampler_config()  # also validates schedule + guidance
        except ContractError as e:
            # bad file contents should always surface as a config problem
            raise ConfigError(str(e)) from e
        for stage in STAGES:
            self.train_config(stage)
        return self


def load_config(path=None):
    """Read a config file and return the validated merged RunConfig.

    path=None, a missing-by-choice sentinel, and a whitespace-only file all
    mean "defaults".  Anything else must be a JSON object.
    """
    if path is None:
        return RunConfig().validate()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        text = f.read()
    if not text.strip():
        return RunConfig().validate()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object at the top level")
    merged = _merge(DEFAULTS, data, "")
    return RunConfig(raw=merged).validate()
