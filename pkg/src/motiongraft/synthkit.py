"""Synthetic protagonist videos with exact keypoints and masks.

A scene is an articulated 2D stick sprite (capsule limbs) over a procedural
background, viewed through a panning camera.  Because the sprite is analytic,
every frame comes with pixel-exact foreground masks and keypoints, which the
rest of the pipeline uses as ground truth.  The module also owns the on-disk
clip format (`frames/%05d.png`, `masks/%05d.png`, `poses.json`,
`manifest.json`).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from .errors import ContractError, DatasetError

# joint order is shared with posekit; hip-center is derived, not stored
JOINT_NAMES = (
    "head", "neck",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
NUM_JOINTS = len(JOINT_NAMES)

# motion program columns (angles in radians)
ANGLE_NAMES = (
    "torso_lean", "head_tilt",
    "l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
    "l_hip", "l_knee", "r_hip", "r_knee",
)
NUM_ANGLES = len(ANGLE_NAMES)

TEXTURES = ("flat", "stripes", "checker")


@dataclass(frozen=True)
class SpriteSpec:
    """Limb lengths in pixels plus a per-part color palette."""

    torso: float = 14.0
    head: float = 5.0
    upper_arm: float = 8.0
    forearm: float = 7.0
    thigh: float = 9.0
    shin: float = 8.0
    shoulder_width: float = 9.0
    hip_width: float = 7.0
    limb_radius: float = 1.6
    head_radius: float = 3.4
    # part -> rgb in [0,1]
    palette: dict = field(default_factory=lambda: {
        "head": (0.95, 0.80, 0.62),
        "torso": (0.80, 0.25, 0.25),
        "l_arm": (0.25, 0.55, 0.85),
        "r_arm": (0.30, 0.70, 0.45),
        "l_leg": (0.60, 0.40, 0.75),
        "r_leg": (0.85, 0.65, 0.25),
    })


@dataclass(frozen=True)
class BackgroundSpec:
    """Procedural, infinite texture so camera pans shift it exactly."""

    texture: str = "stripes"
    color_a: tuple = (0.32, 0.40, 0.52)
    color_b: tuple = (0.18, 0.22, 0.30)
    period: float = 12.0


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    frames: int = 8
    sprite: SpriteSpec = field(default_factory=SpriteSpec)
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    # per-frame camera translation in pixels, shape (frames, 2) as (dx, dy)
    camera: tuple = ()
    # per-frame joint angles, shape (frames, NUM_ANGLES)
    motion: tuple = ()
    # world position of the hip-center before camera shift, in pixels
    root: tuple = (32.0, 36.0)
    seed: int = 0

    def validate(self):
        if self.height < 16 or self.width < 16:
            raise ContractError("resolution must be at least 16x16")
        if self.height % 8 or self.width % 8:
            raise ContractError("resolution must be divisible by 8")
        if self.frames < 1:
            raise ContractError("frame count must be >= 1")
        if len(self.camera) != self.frames:
            raise ContractError(
                f"camera path length {len(self.camera)} != frames {self.frames}")
        if len(self.motion) != self.frames:
            raise ContractError(
                f"motion program length {len(self.motion)} != frames {self.frames}")
        for row in self.motion:
            if len(row) != NUM_ANGLES:
                raise ContractError(f"motion rows must have {NUM_ANGLES} angles")
        if self.background.texture not in TEXTURES:
            raise ContractError(f"unknown texture {self.background.texture!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera"] = [list(map(float, c)) for c in self.camera]
        d["motion"] = [list(map(float, m)) for m in self.motion]
        d["sprite"]["palette"] = {k: list(v) for k, v in d["sprite"]["palette"].items()}
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        sprite = dict(d["sprite"])
        sprite["palette"] = {k: tuple(v) for k, v in sprite["palette"].items()}
        bg = dict(d["background"])
        bg["color_a"] = tuple(bg["color_a"])
        bg["color_b"] = tuple(bg["color_b"])
        return SceneSpec(
            height=d["height"], width=d["width"], frames=d["frames"],
            sprite=SpriteSpec(**sprite), background=BackgroundSpec(**bg),
            camera=tuple(tuple(c) for c in d["camera"]),
            motion=tuple(tuple(m) for m in d["motion"]),
            root=tuple(d["root"]), seed=d["seed"],
        )


@dataclass
class VideoClip:
    """N x H x W x 3 float array with values in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ContractError(f"clip must be NxHxWx3, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ContractError("clip contains non-finite values")
        self.frames = f

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class MaskSequence:
    """N x H x W binary array."""

    masks: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim != 3:
            raise ContractError(f"masks must be NxHxW, got {m.shape}")
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ContractError("masks must be binary")
        self.masks = m.astype(np.uint8)


# ---------------------------------------------------------------------------
# skeleton kinematics

def _rot(v, theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def skeleton_points(sprite: SpriteSpec, angles, root_xy):
    """World-space joint coordinates for one frame.

    Returns a dict name -> (x, y) including the derived 'hip_center'.
    Screen y grows downward; a zero torso lean points the torso straight up.
    """
    a = dict(zip(ANGLE_NAMES, angles))
    root = np.asarray(root_xy, dtype=np.float64)
    up = np.array([np.sin(a["torso_lean"]), -np.cos(a["torso_lean"])])
    right = np.array([-up[1], up[0]])
    down = -up

    neck = root + sprite.torso * up
    head = neck + sprite.head * _rot(up, a["head_tilt"]) + sprite.head_radius * up

    pts = {"hip_center": root, "neck": neck, "head": head}
    pts["l_shoulder"] = neck - 0.5 * sprite.shoulder_width * right
    pts["r_shoulder"] = neck + 0.5 * sprite.shoulder_width * right
    pts["l_hip"] = root - 0.5 * sprite.hip_width * right
    pts["r_hip"] = root + 0.5 * sprite.hip_width * right

    for side in ("l", "r"):
        sho = pts[f"{side}_shoulder"]
        elb = sho + sprite.upper_arm * _rot(down, a[f"{side}_shoulder"])
        wri = elb + sprite.forearm * _rot(down, a[f"{side}_shoulder"] + a[f"{side}_elbow"])
        pts[f"{side}_elbow"] = elb
        pts[f"{side}_wrist"] = wri
        hip = pts[f"{side}_hip"]
        kne = hip + sprite.thigh * _rot(down, a[f"{side}_hip"])
        ank = kne + sprite.shin * _rot(down, a[f"{side}_hip"] + a[f"{side}_knee"])
        pts[f"{side}_knee"] = kne
        pts[f"{side}_ankle"] = ank
    return pts


def _sprite_parts(sprite: SpriteSpec, pts):
    """(p0, p1, radius, color) capsules in draw order (later drawn on top)."""
    p = pts
    r = sprite.limb_radius
    pal = sprite.palette
    return [
        (p["l_shoulder"], p["l_elbow"], r, pal["l_arm"]),
        (p["l_elbow"], p["l_wrist"], r, pal["l_arm"]),
        (p["l_hip"], p["l_knee"], r, pal["l_leg"]),
        (p["l_knee"], p["l_ankle"], r, pal["l_leg"]),
        (p["neck"], p["hip_center"], 1.7 * r, pal["torso"]),
        (p["r_hip"], p["r_knee"], r, pal["r_leg"]),
        (p["r_knee"], p["r_ankle"], r, pal["r_leg"]),
        (p["r_shoulder"], p["r_elbow"], r, pal["r_arm"]),
        (p["r_elbow"], p["r_wrist"], r, pal["r_arm"]),
        (p["head"], p["head"], sprite.head_radius, pal["head"]),
    ]


def capsule_coverage(h, w, p0, p1, radius):
    """Boolean HxW array: pixel centers within `radius` of segment p0-p1.

    Pixel (i, j) has its center at (j + 0.5, i + 0.5).
    """
    ys, xs = np.mgrid[0:h, 0:w]
    cx = xs + 0.5
    cy = ys + 0.5
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d = p1 - p0
    L2 = float(d @ d)
    if L2 < 1e-12:
        dist2 = (cx - p0[0]) ** 2 + (cy - p0[1]) ** 2
    else:
        t = ((cx - p0[0]) * d[0] + (cy - p0[1]) * d[1]) / L2
        t = np.clip(t, 0.0, 1.0)
        qx = p0[0] + t * d[0]
        qy = p0[1] + t * d[1]
        dist2 = (cx - qx) ** 2 + (cy - qy) ** 2
    return dist2 <= radius * radius


def render_background(bg: BackgroundSpec, h, w, cam_xy):
    """Sample the procedural texture at world coords (pixel center + camera)."""
    ys, xs = np.mgrid[0:h, 0:w]
    wx = xs + 0.5 + cam_xy[0]
    wy = ys + 0.5 + cam_xy[1]
    ca = np.asarray(bg.color_a, dtype=np.float32)
    cb = np.asarray(bg.color_b, dtype=np.float32)
    if bg.texture == "flat":
        sel = np.zeros((h, w), dtype=bool)
    elif bg.texture == "stripes":
        sel = (np.floor(wx / bg.period).astype(np.int64) % 2) == 1
    elif bg.texture == "checker":
        sel = ((np.floor(wx / bg.period) + np.floor(wy / bg.period)).astype(np.int64) % 2) == 1
    else:
        raise ContractError(f"unknown texture {bg.texture!r}")
    img = np.where(sel[..., None], cb, ca)
    return img.astype(np.float32)


def synth_scene(spec: SceneSpec):
    """Render a scene; pure function of its spec.

    Returns (VideoClip, PoseSequence, MaskSequence).  Masks are exactly the
    sprite's rasterized footprint; keypoints are normalized to [0,1] with
    visibility = inside the frame.
    """
    from .posekit import PoseSequence  # local import to avoid a cycle

    spec.validate()
    h, w, n = spec.height, spec.width, spec.frames
    frames = np.empty((n, h, w, 3), dtype=np.float32)
    masks = np.zeros((n, h, w), dtype=np.uint8)
    kps = np.zeros((n, NUM_JOINTS, 2), dtype=np.float64)
    vis = np.zeros((n, NUM_JOINTS), dtype=bool)

    for k in range(n):
        cam = np.asarray(spec.camera[k], dtype=np.float64)
        img = render_background(spec.background, h, w, cam)
        pts_world = skeleton_points(spec.sprite, spec.motion[k], spec.root)
        pts_screen = {name: np.asarray(p) - cam for name, p in pts_world.items()}

        covered = np.zeros((h, w), dtype=bool)
        for p0, p1, radius, color in _sprite_parts(spec.sprite, pts_screen):
            cov = capsule_coverage(h, w, p0, p1, radius)
            img[cov] = np.asarray(color, dtype=np.float32)
            covered |= cov
        masks[k] = covered.astype(np.uint8)
        frames[k] = img

        for j, name in enumerate(JOINT_NAMES):
            x, y = pts_screen[name]
            kps[k, j] = (x / w, y / h)
            vis[k, j] = (0.0 <= kps[k, j, 0] <= 1.0) and (0.0 <= kps[k, j, 1] <= 1.0)

    clip = VideoClip(np.clip(frames, 0.0, 1.0))
    poses = PoseSequence(kps, vis)
    return clip, poses, MaskSequence(masks)


# ---------------------------------------------------------------------------
# motion program generators and random scenes

def make_motion_program(kind, n_frames, rng):
    """Per-frame joint-angle table for a named motion family."""
    t = np.arange(n_frames, dtype=np.float64)
    freq = rng.uniform(0.35, 0.9)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.45, 0.85)
    prog = np.zeros((n_frames, NUM_ANGLES), dtype=np.float64)
    cols = {name: i for i, name in enumerate(ANGLE_NAMES)}
    swing = amp * np.sin(freq * t + phase)

    if kind == "march":
        prog[:, cols["l_hip"]] = swing
        prog[:, cols["r_hip"]] = -swing
        prog[:, cols["l_knee"]] = 0.5 * np.abs(swing)
        prog[:, cols["r_knee"]] = 0.5 * np.abs(-swing)
        prog[:, cols["l_shoulder"]] = -0.7 * swing
        prog[:, cols["r_shoulder"]] = 0.7 * swing
    elif kind == "wave":
        side = "l" if rng.random() < 0.5 else "r"
        sign = -1.0 if side == "l" else 1.0
        prog[:, cols[f"{side}_shoulder"]] = sign * (2.4 + 0.2 * np.sin(freq * t + phase))
        prog[:, cols[f"{side}_elbow"]] = sign * (0.9 * np.sin(1.7 * freq * t + phase))
        other = "r" if side == "l" else "l"
        prog[:, cols[f"{other}_shoulder"]] = -sign * 0.25
    elif kind == "sway":
        prog[:, cols["torso_lean"]] = 0.35 * np.sin(freq * t + phase)
        prog[:, cols["head_tilt"]] = 0.3 * np.sin(freq * t + phase + 0.7)
        prog[:, cols["l_shoulder"]] = -0.4 + 0.3 * swing
        prog[:, cols["r_shoulder"]] = 0.4 - 0.3 * swing
        prog[:, cols["l_hip"]] = 0.15 * swing
        prog[:, cols["r_hip"]] = -0.15 * swing
    elif kind == "jumping_jack":
        open_amt = 0.5 * (1 + np.sin(freq * t + phase))
        prog[:, cols["l_shoulder"]] = -2.6 * open_amt
        prog[:, cols["r_shoulder"]] = 2.6 * open_amt
        prog[:, cols["l_hip"]] = -0.5 * open_amt
        prog[:, cols["r_hip"]] = 0.5 * open_amt
    else:
        raise ContractError(f"unknown motion kind {kind!r}")

    # small per-joint jitter keeps scenes from repeating exactly
    prog += rng.normal(0.0, 0.03, size=prog.shape)
    return prog


MOTION_KINDS = ("march", "wave", "sway", "jumping_jack")


def random_scene_spec(seed, height=64, width=64, frames=8, camera_pan=None,
                      motion_kind=None):
    """Concrete SceneSpec with seed-jittered palettes, camera, and motion.

    camera_pan: None draws static vs. slow pan at random; a (dx, dy) pair
    fixes the per-frame pan velocity.
    """
    rng = np.random.default_rng(seed)

    def jitter(color, lo=0.08):
        c = np.asarray(color) + rng.uniform(-lo, lo, size=3)
        return tuple(np.clip(c, 0.02, 0.98).round(4))

    base = SpriteSpec()
    scale = rng.uniform(0.85, 1.15) * height / 64.0
    sprite = SpriteSpec(
        torso=base.torso * scale, head=base.head * scale,
        upper_arm=base.upper_arm * scale, forearm=base.forearm * scale,
        thigh=base.thigh * scale, shin=base.shin * scale,
        shoulder_width=base.shoulder_width * scale, hip_width=base.hip_width * scale,
        limb_radius=max(1.2, base.limb_radius * scale),
        head_radius=base.head_radius * scale,
        palette={k: jitter(v) for k, v in base.palette.items()},
    )
    texture = TEXTURES[int(rng.integers(len(TEXTURES)))]
    background = BackgroundSpec(
        texture=texture,
        color_a=jitter((0.35, 0.42, 0.55), 0.15),
        color_b=jitter((0.16, 0.20, 0.28), 0.10),
        period=float(rng.uniform(8.0, 18.0)),
    )
    if camera_pan is None:
        if rng.random() < 0.35:
            camera_pan = (float(rng.uniform(-1.2, 1.2)), float(rng.uniform(-0.6, 0.6)))
        else:
            camera_pan = (0.0, 0.0)
    cam = tuple((camera_pan[0] * k, camera_pan[1] * k) for k in range(frames))
    # always consume the draw so forcing a kind keeps the rest of the spec
    # identical to the unforced spec of the same seed
    drawn = MOTION_KINDS[int(rng.integers(len(MOTION_KINDS)))]
    kind = motion_kind or drawn
    motion = tuple(tuple(row) for row in make_motion_program(kind, frames, rng))
    root = (width * 0.5, height * rng.uniform(0.52, 0.58))
    return SceneSpec(height=height, width=width, frames=frames, sprite=sprite,
                     background=background, camera=cam, motion=motion,
                     root=root, seed=int(seed))


# ---------------------------------------------------------------------------
# on-disk format

def _to_uint8(x):
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_clip(path, clip: VideoClip, poses=None, masks: MaskSequence | None = None,
              seed=None, spec: SceneSpec | None = None, extra: dict | None = None):
    """Write a clip directory: frames/, masks/, poses.json, manifest.json."""
    os.makedirs(path, exist_ok=True)
    n, h, w, _ = clip.frames.shape
    fdir = os.path.join(path, "frames")
    os.makedirs(fdir, exist_ok=True)
    for k in range(n):
        Image.fromarray(_to_uint8(clip.frames[k])).save(os.path.join(fdir, f"{k:05d}.png"))
    if masks is not None:
        mdir = os.path.join(path, "masks")
        os.makedirs(mdir, exist_ok=True)
        for k in range(n):
            Image.fromarray((masks.masks[k] * 255).astype(np.uint8)).save(
                os.path.join(mdir, f"{k:05d}.png"))
    if poses is not None:
        with open(os.path.join(path, "poses.json"), "w") as f:
            json.dump(poses.to_json_dict(), f)
    manifest = {
        "height": int(h), "width": int(w), "frames": int(n),
        "seed": None if seed is None else int(seed),
        "spec": spec.to_dict() if spec is not None else None,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_clip(path):
    """Read a clip directory back. Returns (clip, poses?, masks?, manifest)."""
    from .posekit import PoseSequence

    man_path = os.path.join(path, "manifest.json")
    if not os.path.exists(man_path):
        raise DatasetError(f"missing manifest: {man_path}")
    with open(man_path) as f:
        manifest = json.load(f)
    n, h, w = manifest["frames"], manifest["height"], manifest["width"]

    frames = np.empty((n, h, w, 3), dtype=np.float32)
    for k in range(n):
        fp = os.path.join(path, "frames", f"{k:05d}.png")
        if not os.path.exists(fp):
            raise DatasetError(f"missing frame: {fp}")
        frames[k] = np.asarray(Image.open(fp), dtype=np.float32) / 255.0
    clip = VideoClip(frames)

    masks = None
    mdir = os.path.join(path, "masks")
    if os.path.isdir(mdir):
        marr = np.empty((n, h, w), dtype=np.uint8)
        for k in range(n):
            mp = os.path.join(mdir, f"{k:05d}.png")
            if not os.path.exists(mp):
                raise DatasetError(f"missing mask: {mp}")
            marr[k] = (np.asarray(Image.open(mp)) >= 128).astype(np.uint8)
        masks = MaskSequence(marr)

    poses = None
    pp = os.path.join(path, "poses.json")
    if os.path.exists(pp):
        with open(pp) as f:
            poses = PoseSequence.from_json_dict(json.load(f))
    return clip, poses, masks, manifest


def save_scene(path, spec: SceneSpec):
    clip, poses, masks = synth_scene(spec)
    save_clip(path, clip, poses, masks, seed=spec.seed, spec=spec)
    return clip, poses, masks


def build_dataset(root, num_scenes, seed=0, height=64, width=64, frames=32,
                  motion_kinds=None, pan_fraction=0.3):
    """Generate `num_scenes` scene directories under `root`."""
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(num_scenes):
        scene_seed = int(rng.integers(0, 2**31 - 1))
        pan = None
        if rng.random() >= pan_fraction:
            pan = (0.0, 0.0)
        kind = None
        if motion_kinds:
            kind = motion_kinds[i % len(motion_kinds)]
        spec = random_scene_spec(scene_seed, height=height, width=width,
                                 frames=frames, camera_pan=pan, motion_kind=kind)
        p = os.path.join(root, f"scene_{i:04d}")
        save_scene(p, spec)
        paths.append(p)
    return paths


def list_scenes(root):
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root not found: {root}")
    dirs = sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d)) and
        os.path.exists(os.path.join(root, d, "manifest.json"))
    )
    if not dirs:
        raise DatasetError(f"no scenes under {root}")
    return dirs
