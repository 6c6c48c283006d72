"""Skeleton motion: canonicalization, the redundant pose-feature codec, and clip files.

Coordinates are meters with +Y up. A canonical clip starts with its root over
the XZ origin and faces +Z. Per-frame features (``j`` joints, root first)::

    [0]                      root angular velocity about Y (rad/frame)
    [1:3]                    root XZ velocity in the current heading frame (m/frame)
    [3]                      root height
    [4 : 4+3(j-1)]           non-root joint positions, root-relative in XZ, heading frame
    [.. : ..+6(j-1)]         non-root joint rotations (6D: bone direction, orthogonal axis)
    [.. : ..+3j]             all joint velocities in the heading frame
    [-4:]                    foot contacts (left ankle, left toe, right ankle, right toe)

which is 263 values for the 22-joint template.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
N_JOINTS = 22
LEFT_HIP, RIGHT_HIP = 1, 2
FOOT_JOINTS = (7, 10, 8, 11)
TARGET_FPS = 20
MAX_FRAMES = 196
CONTACT_THRESHOLD = 0.002

# Rest-pose offsets from each joint's parent (meters), roughly an adult SMPL body.
REST_OFFSETS = np.array([
    [0.0, 0.93, 0.0],
    [0.06, -0.09, 0.0], [-0.06, -0.09, 0.0], [0.0, 0.11, -0.02],
    [0.04, -0.38, 0.0], [-0.04, -0.38, 0.0], [0.0, 0.14, 0.02],
    [-0.01, -0.40, -0.04], [0.01, -0.40, -0.04], [0.0, 0.05, 0.0],
    [0.02, -0.06, 0.12], [-0.02, -0.06, 0.12], [0.0, 0.21, -0.03],
    [0.08, 0.11, -0.02], [-0.08, 0.11, -0.02], [0.0, 0.09, 0.05],
    [0.11, 0.04, -0.02], [-0.11, 0.04, -0.02],
    [0.26, 0.0, -0.02], [-0.26, 0.0, -0.02],
    [0.25, 0.0, 0.0], [-0.25, 0.0, 0.0],
])

MCLP_MAGIC = b"MCLP"
JNTM_MAGIC = b"JNTM"
FORMAT_VERSION = 1


class ResampleWarning(UserWarning):
    """Source frame rate is not an integer multiple of the target; frames were interpolated."""


@dataclass
class JointMotion:
    """Joint positions ``(frames, joints, 3)`` sampled at ``fps``."""

    frames: np.ndarray
    fps: float
    resampled: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must have shape (F, j, 3), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("joint coordinates must be finite")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_joints(self):
        return self.frames.shape[1]


@dataclass
class MotionClip:
    """Pose features ``(N, D)`` at ``fps``."""

    features: np.ndarray
    fps: float = TARGET_FPS

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")

    def __len__(self):
        return self.features.shape[0]


def feature_dim(j=N_JOINTS):
    return 4 + 3 * (j - 1) + 6 * (j - 1) + 3 * j + 4


def feature_slices(j=N_JOINTS):
    """Named slices into the feature vector."""
    a = 4
    b = a + 3 * (j - 1)
    c = b + 6 * (j - 1)
    d = c + 3 * j
    return {
        "root_angular_velocity": slice(0, 1),
        "root_velocity_xz": slice(1, 3),
        "root_height": slice(3, 4),
        "local_positions": slice(a, b),
        "local_rotations": slice(b, c),
        "local_velocities": slice(c, d),
        "foot_contacts": slice(d, d + 4),
    }


def rot_y(theta):
    """Rotation matrices about +Y; ``rot_y(t) @ (0, 0, 1) == (sin t, 0, cos t)``."""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack([
        np.stack([c, z, s], -1),
        np.stack([z, o, z], -1),
        np.stack([-s, z, c], -1),
    ], -2)


def heading(frames):
    """Facing angle about +Y per frame, from the hip axis crossed with up."""
    across = frames[..., RIGHT_HIP, :] - frames[..., LEFT_HIP, :]
    fwd = np.cross(np.array([0.0, 1.0, 0.0]), across)
    return np.arctan2(fwd[..., 0], fwd[..., 2])


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _resample(frames, fps, target):
    F = frames.shape[0]
    times = np.arange(0.0, (F - 1) / fps + 1e-12, 1.0 / target)
    pos = times * fps
    lo = np.minimum(np.floor(pos).astype(int), F - 1)
    hi = np.minimum(lo + 1, F - 1)
    w = (pos - lo)[:, None, None]
    return (1 - w) * frames[lo] + w * frames[hi]


def canonicalize(motion, target_fps=TARGET_FPS, max_frames=MAX_FRAMES):
    """Resample to ``target_fps``, keep the first ``max_frames`` frames, root to origin, face +Z."""
    if motion.n_frames < 2:
        raise ValueError("need at least 2 frames")
    if motion.fps < target_fps:
        raise ValueError(f"source fps {motion.fps} is below the target {target_fps}")
    ratio = motion.fps / target_fps
    resampled = False
    if abs(ratio - round(ratio)) < 1e-9:
        frames = motion.frames[::int(round(ratio))]
    else:
        warnings.warn(f"resampling {motion.fps} fps to {target_fps} fps by linear interpolation",
                      ResampleWarning, stacklevel=2)
        frames = _resample(motion.frames, motion.fps, target_fps)
        resampled = True
    frames = frames[:max_frames]
    if frames.shape[0] < 2:
        raise ValueError("fewer than 2 frames remain after resampling")
    root0 = frames[0, 0]
    frames = frames - np.array([root0[0], 0.0, root0[2]])
    R = rot_y(-heading(frames[0]))
    frames = frames @ R.T
    return JointMotion(frames, target_fps, resampled=resampled)


def detect_foot_contacts(motion, threshold=CONTACT_THRESHOLD):
    """1 where the ankle/toe joint moves less than ``threshold`` m to the next frame."""
    feet = motion.frames[:, list(FOOT_JOINTS)]
    speed = np.linalg.norm(feet[1:] - feet[:-1], axis=-1)
    return (speed < threshold).astype(np.float64)


def _six_d(bone):
    """Bone direction plus the Gram-Schmidt orthogonalized X axis (Z when nearly parallel)."""
    b = bone / np.maximum(np.linalg.norm(bone, axis=-1, keepdims=True), 1e-12)
    ref = np.broadcast_to(np.array([1.0, 0.0, 0.0]), b.shape).copy()
    near = np.abs(b[..., 0]) > 0.99
    ref[near] = [0.0, 0.0, 1.0]
    e2 = ref - np.sum(ref * b, axis=-1, keepdims=True) * b
    e2 /= np.linalg.norm(e2, axis=-1, keepdims=True)
    return np.concatenate([b, e2], axis=-1)


def encode_features(motion, contact_threshold=CONTACT_THRESHOLD):
    """Pose features for every frame that has a successor (``F - 1`` rows)."""
    P = motion.frames
    F, j, _ = P.shape
    if F < 2:
        raise ValueError("need at least 2 frames")
    if not np.all(np.isfinite(P)):
        raise ValueError("joint coordinates must be finite")
    psi = heading(P)
    inv = rot_y(-psi[:-1])                                      # (F-1, 3, 3)
    root = P[:-1, 0]
    d_root = P[1:, 0] - root
    root_vel = np.einsum("fab,fb->fa", inv, d_root)
    planar = P[:-1] - np.stack([root[:, 0], np.zeros(F - 1), root[:, 2]], -1)[:, None]
    local = np.einsum("fab,fjb->fja", inv, planar)
    vel = np.einsum("fab,fjb->fja", inv, P[1:] - P[:-1])
    parents = np.array(PARENTS[1:j]) if j == N_JOINTS else np.array([0] * (j - 1))
    bones = local[:, 1:] - local[:, parents]
    rot6 = _six_d(bones)
    out = np.concatenate([
        _wrap(psi[1:] - psi[:-1])[:, None],
        root_vel[:, [0, 2]],
        root[:, 1:2],
        local[:, 1:].reshape(F - 1, -1),
        rot6.reshape(F - 1, -1),
        vel.reshape(F - 1, -1),
        detect_foot_contacts(motion, contact_threshold),
    ], axis=1)
    return MotionClip(out, motion.fps)


def decode_features(clip, n_joints=N_JOINTS):
    """Rebuild joint positions, starting at the XZ origin facing +Z."""
    X = clip.features
    N = X.shape[0]
    if X.shape[1] != feature_dim(n_joints):
        raise ValueError(f"expected {feature_dim(n_joints)} features, got {X.shape[1]}")
    sl = feature_slices(n_joints)
    psi = np.concatenate([[0.0], np.cumsum(X[:-1, 0])])
    R = rot_y(psi)
    step = np.zeros((N, 3))
    step[:, [0, 2]] = X[:, sl["root_velocity_xz"]]
    world_step = np.einsum("fab,fb->fa", R, step)
    root_xz = np.concatenate([np.zeros((1, 3)), np.cumsum(world_step[:-1], axis=0)])
    local = X[:, sl["local_positions"]].reshape(N, n_joints - 1, 3)
    joints = np.einsum("fab,fjb->fja", R, local) + np.stack(
        [root_xz[:, 0], np.zeros(N), root_xz[:, 2]], -1)[:, None]
    root = np.stack([root_xz[:, 0], X[:, 3], root_xz[:, 2]], -1)[:, None]
    return JointMotion(np.concatenate([root, joints], axis=1), clip.fps)


def _write(path, magic, fps, shape, data):
    if fps != int(fps):
        raise ValueError("file formats store integer fps")
    head = magic + struct.pack("<4I", FORMAT_VERSION, int(fps), *shape)
    Path(path).write_bytes(head + np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read(path, magic):
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise ValueError(f"{path}: not a {magic.decode()} file")
    version, fps, a, b = struct.unpack_from("<4I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    return fps, a, b, data[20:]


def write_mclp(path, clip):
    _write(path, MCLP_MAGIC, clip.fps, clip.features.shape, clip.features)


def read_mclp(path):
    fps, N, Dm, body = _read(path, MCLP_MAGIC)
    if len(body) != 4 * N * Dm:
        raise ValueError(f"{path}: expected {4 * N * Dm} payload bytes, found {len(body)}")
    return MotionClip(np.frombuffer(body, dtype="<f4").reshape(N, Dm).astype(np.float64), fps)


def write_jntm(path, motion):
    F, j, _ = motion.frames.shape
    _write(path, JNTM_MAGIC, motion.fps, (F, j), motion.frames)


def read_jntm(path):
    fps, F, j, body = _read(path, JNTM_MAGIC)
    if len(body) != 12 * F * j:
        raise ValueError(f"{path}: expected {12 * F * j} payload bytes, found {len(body)}")
    return JointMotion(np.frombuffer(body, dtype="<f4").reshape(F, j, 3).astype(np.float64), fps)
