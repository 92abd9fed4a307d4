"""Keypoint sequences, pose-map rendering, and cross-video pose alignment.

Poses are normalized to [0, 1] x [0, 1] (so they survive resolution changes);
pose maps are color-coded stick renderings the pose controller consumes.
Alignment maps a target performer's pose track into the source video's frame
with a similarity transform (uniform scale + translation) anchored on the
first frame of each track.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegeneratePoseError
from .synthkit import JOINT_NAMES, NUM_JOINTS, capsule_coverage

_J = {name: i for i, name in enumerate(JOINT_NAMES)}

# (joint a, joint b, rgb): drawn in order, later bones on top
BONES = (
    ("l_hip", "l_knee", (0.55, 0.30, 0.75)),
    ("l_knee", "l_ankle", (0.70, 0.45, 0.90)),
    ("r_hip", "r_knee", (0.80, 0.55, 0.15)),
    ("r_knee", "r_ankle", (0.95, 0.75, 0.30)),
    ("neck", "hip_center", (0.85, 0.20, 0.20)),
    ("l_shoulder", "l_elbow", (0.20, 0.45, 0.85)),
    ("l_elbow", "l_wrist", (0.35, 0.65, 0.95)),
    ("r_shoulder", "r_elbow", (0.20, 0.70, 0.40)),
    ("r_elbow", "r_wrist", (0.40, 0.85, 0.55)),
    ("neck", "head", (0.95, 0.85, 0.55)),
    ("l_shoulder", "r_shoulder", (0.85, 0.30, 0.55)),
    ("l_hip", "r_hip", (0.55, 0.55, 0.55)),
)

TORSO_EPS = 1e-6


class PoseSequence:
    """N x K x 2 normalized keypoints with an N x K visibility track."""

    def __init__(self, keypoints, visibility=None):
        kps = np.asarray(keypoints, dtype=np.float64)
        if kps.ndim != 3 or kps.shape[1] != NUM_JOINTS or kps.shape[2] != 2:
            raise ContractError(
                f"keypoints must be Nx{NUM_JOINTS}x2, got {kps.shape}")
        if not np.all(np.isfinite(kps)):
            raise ContractError("keypoints contain non-finite values")
        if visibility is None:
            visibility = np.all((kps >= 0.0) & (kps <= 1.0), axis=2)
        vis = np.asarray(visibility, dtype=bool)
        if vis.shape != kps.shape[:2]:
            raise ContractError(
                f"visibility shape {vis.shape} != {kps.shape[:2]}")
        self.keypoints = kps
        self.visibility = vis

    def __len__(self):
        return self.keypoints.shape[0]

    @property
    def joints(self):
        return JOINT_NAMES

    def joint(self, frame, name):
        return self.keypoints[frame, _J[name]]

    def hip_center(self, frame):
        """Derived pelvis point: mean of the two hips."""
        return 0.5 * (self.joint(frame, "l_hip") + self.joint(frame, "r_hip"))

    def hip_center_visible(self, frame):
        return bool(self.visibility[frame, _J["l_hip"]] and
                    self.visibility[frame, _J["r_hip"]])

    def torso_length(self, frame):
        return float(np.linalg.norm(self.joint(frame, "neck") - self.hip_center(frame)))

    def slice(self, start, stop):
        return PoseSequence(self.keypoints[start:stop], self.visibility[start:stop])

    def to_json_dict(self):
        frames = []
        for k in range(len(self)):
            frames.append([
                [float(self.keypoints[k, j, 0]), float(self.keypoints[k, j, 1]),
                 int(self.visibility[k, j])]
                for j in range(NUM_JOINTS)
            ])
        return {"joints": list(JOINT_NAMES), "frames": frames}

    @staticmethod
    def from_json_dict(d):
        names = d.get("joints")
        if tuple(names or ()) != JOINT_NAMES:
            raise ContractError(f"unexpected joint list: {names}")
        rows = d["frames"]
        kps = np.array([[[c[0], c[1]] for c in fr] for fr in rows], dtype=np.float64)
        vis = np.array([[bool(c[2]) for c in fr] for fr in rows], dtype=bool)
        return PoseSequence(kps, vis)


# ---------------------------------------------------------------------------
# alignment

def alignment_transform(source: PoseSequence, target: PoseSequence,
                        anchor_frame=0):
    """Similarity transform (s, t) mapping target-pose coords into the source
    frame: p -> t + s * p.

    Scale matches torso lengths, translation pins the target's hip-center to
    the source's, both read off the anchor frame of each sequence.
    """
    hs = source.hip_center(anchor_frame)
    ht = target.hip_center(anchor_frame)
    ls = source.torso_length(anchor_frame)
    lt = target.torso_length(anchor_frame)
    if lt < TORSO_EPS:
        raise DegeneratePoseError(
            f"target torso length {lt:.2e} below {TORSO_EPS:.0e} in anchor frame")
    if ls < TORSO_EPS:
        raise DegeneratePoseError(
            f"source torso length {ls:.2e} below {TORSO_EPS:.0e} in anchor frame")
    s = ls / lt
    t = hs - s * ht
    return float(s), t.copy()


def apply_alignment(points, scale, translation):
    return np.asarray(translation) + scale * np.asarray(points, dtype=np.float64)


def align_pose_sequence(source: PoseSequence, target: PoseSequence,
                        anchor_frame=0) -> PoseSequence:
    """Target pose track re-expressed in the source video's frame.

    Visibility is recomputed from the transformed coordinates (a joint that
    lands outside [0,1]^2 is off-screen in the source frame).
    """
    s, t = alignment_transform(source, target, anchor_frame)
    kps = apply_alignment(target.keypoints, s, t)
    return PoseSequence(kps)


# ---------------------------------------------------------------------------
# pose maps

def render_pose_map(keypoints, h, w, radius=None):
    """Color-coded stick rendering of one frame's keypoints, H x W x 3.

    Keypoints are normalized; bones that fall outside the frame simply clip.
    """
    kps = np.asarray(keypoints, dtype=np.float64)
    if kps.shape != (NUM_JOINTS, 2):
        raise ContractError(f"expected {NUM_JOINTS}x2 keypoints, got {kps.shape}")
    if radius is None:
        radius = max(1.2, 1.6 * min(h, w) / 64.0)
    img = np.zeros((h, w, 3), dtype=np.float32)
    px = kps * np.array([w, h], dtype=np.float64)
    hip_center = 0.5 * (px[_J["l_hip"]] + px[_J["r_hip"]])

    def pt(name):
        return hip_center if name == "hip_center" else px[_J[name]]

    for a, b, color in BONES:
        pa, pb = pt(a), pt(b)
        # entirely outside with margin: skip the raster for speed
        lo = np.minimum(pa, pb) - radius
        hi = np.maximum(pa, pb) + radius
        if hi[0] < 0 or hi[1] < 0 or lo[0] > w or lo[1] > h:
            continue
        cov = capsule_coverage(h, w, pa, pb, radius)
        img[cov] = np.asarray(color, dtype=np.float32)
    return img


def render_pose_maps(poses: PoseSequence, h, w, radius=None):
    """N x H x W x 3 stack of pose maps."""
    return np.stack([
        render_pose_map(poses.keypoints[k], h, w, radius) for k in range(len(poses))
    ])
