"""
Pose-feature layout, motion containers, normalization and motion file I/O.

A pose is a vector of F = 12J - 1 floats:

    rot_vel (1)       root yaw angular velocity, rad/frame
    lin_vel (2)       root planar velocity (x lateral, z forward) in the root frame
    root_y (1)        root height
    joint_pos         (J-1) x 3 joint positions relative to the root, root frame
    joint_rot         (J-1) x 6 joint rotations, 6D continuous form
    joint_vel         J x 3 joint velocities in the root frame
    contacts (4)      left heel, left toe, right heel, right toe

Joint 0 is the root. The last two joints are the left and right feet.
"""

import base64
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from stylediff.errors import LayoutError, MissingArtifactError

logger = logging.getLogger(__name__)

MOTION_MAGIC = "MOTN"
MOTION_VERSION = "v1"
EPS_NORM = 1e-3


@dataclass(frozen=True)
class PoseLayout:
    """Feature slices for a skeleton with ``n_joints`` joints."""
    n_joints: int

    def __post_init__(self):
        if self.n_joints < 3:
            raise LayoutError(f"A skeleton needs at least 3 joints (root and two feet), got {self.n_joints}")

    @property
    def n_features(self) -> int:
        return 12 * self.n_joints - 1

    @classmethod
    def from_features(cls, n_features: int) -> "PoseLayout":
        if (n_features + 1) % 12 != 0:
            raise LayoutError(f"Feature width {n_features} is not of the form 12J - 1")
        return cls((n_features + 1) // 12)

    @property
    def foot_joints(self) -> Tuple[int, int]:
        return (self.n_joints - 2, self.n_joints - 1)

    def slices(self) -> Dict[str, slice]:
        j = self.n_joints
        bounds = [
            ("rot_vel", 1),
            ("lin_vel", 2),
            ("root_y", 1),
            ("joint_pos", 3 * (j - 1)),
            ("joint_rot", 6 * (j - 1)),
            ("joint_vel", 3 * j),
            ("contacts", 4),
        ]
        out, start = {}, 0
        for name, width in bounds:
            out[name] = slice(start, start + width)
            start += width
        return out

    def view(self, features: np.ndarray, name: str) -> np.ndarray:
        return features[..., self.slices()[name]]

    def joint_positions(self, features: np.ndarray) -> np.ndarray:
        """(..., J-1, 3) root-frame joint positions."""
        return self.view(features, "joint_pos").reshape(features.shape[:-1] + (self.n_joints - 1, 3))

    def joint_rotations(self, features: np.ndarray) -> np.ndarray:
        return self.view(features, "joint_rot").reshape(features.shape[:-1] + (self.n_joints - 1, 6))

    def joint_velocities(self, features: np.ndarray) -> np.ndarray:
        return self.view(features, "joint_vel").reshape(features.shape[:-1] + (self.n_joints, 3))


@dataclass
class MotionSequence:
    """N poses of F features; ``normalized`` marks z-scored data (contact range not enforced)."""
    features: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.validate()

    def validate(self):
        if self.features.ndim != 2:
            raise LayoutError(f"Motion must be (N, F), got shape {self.features.shape}")
        n, f = self.features.shape
        self.layout = PoseLayout.from_features(f)
        if n < 2:
            raise LayoutError(f"Motion must have at least 2 frames, got {n}")
        if not np.all(np.isfinite(self.features)):
            raise LayoutError("Motion contains non-finite values")
        if not self.normalized:
            contacts = self.layout.view(self.features, "contacts")
            if contacts.min() < 0.0 or contacts.max() > 1.0:
                raise LayoutError("Foot contacts must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_joints(self) -> int:
        return self.layout.n_joints


@dataclass(frozen=True)
class LabeledClip:
    """A motion with its action label, optional style label and prompt words."""
    motion: MotionSequence
    action_id: Optional[int]
    style_id: Optional[int]
    prompt: Tuple[str, ...]

    def __post_init__(self):
        if len(self.prompt) == 0:
            raise LayoutError("Clip prompt must be non-empty")

    @property
    def features(self) -> np.ndarray:
        return self.motion.features

    @property
    def text(self) -> str:
        return " ".join(self.prompt)


@dataclass
class FeatureStats:
    """Per-feature mean and (clamped) standard deviation."""
    mean: np.ndarray
    std: np.ndarray
    eps: float = field(default=EPS_NORM)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float32), self.eps)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise LayoutError(f"Stats mean {self.mean.shape} and std {self.std.shape} must be matching vectors")

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def fit(cls, clips: Sequence[Union[LabeledClip, MotionSequence, np.ndarray]], eps: float = EPS_NORM) -> "FeatureStats":
        frames = np.concatenate([_features(c) for c in clips], axis=0).astype(np.float64)
        return cls(frames.mean(axis=0), frames.std(axis=0), eps=eps)

    @classmethod
    def identity(cls, n_features: int) -> "FeatureStats":
        return cls(np.zeros(n_features), np.ones(n_features))

    def _check(self, features: np.ndarray):
        if features.shape[-1] != self.n_features:
            raise LayoutError(f"Stats cover {self.n_features} features, motion has {features.shape[-1]}")


def _features(value) -> np.ndarray:
    if isinstance(value, LabeledClip):
        return value.motion.features
    if isinstance(value, MotionSequence):
        return value.features
    return np.asarray(value)


def normalize(m: Union[MotionSequence, np.ndarray], stats: FeatureStats):
    """(x - mean) / std; arrays in, arrays out."""
    features = _features(m)
    stats._check(features)
    out = ((features - stats.mean) / stats.std).astype(np.float32)
    return MotionSequence(out, normalized=True) if isinstance(m, MotionSequence) else out


def denormalize(m: Union[MotionSequence, np.ndarray], stats: FeatureStats):
    features = _features(m)
    stats._check(features)
    out = (features * stats.std + stats.mean).astype(np.float32)
    if isinstance(m, MotionSequence):
        return MotionSequence(clamp_contacts(out))
    return out


def clamp_contacts(features: np.ndarray) -> np.ndarray:
    """Clip the contact channels into [0, 1] (generated motions may overshoot)."""
    layout = PoseLayout.from_features(features.shape[-1])
    out = np.array(features, copy=True)
    out[..., layout.slices()["contacts"]] = np.clip(layout.view(out, "contacts"), 0.0, 1.0)
    return out


def stack_features(clips: Sequence[Union[LabeledClip, MotionSequence]]) -> np.ndarray:
    arrays = [_features(c) for c in clips]
    lengths = {a.shape for a in arrays}
    if len(lengths) != 1:
        raise LayoutError(f"Cannot batch clips of different shapes: {sorted(lengths)}")
    return np.stack(arrays).astype(np.float32)


# ----------------------------------------------------------------------
# World positions
# ----------------------------------------------------------------------

def yaw_rotate(vectors: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    """Rotate (..., 3) vectors about +y by per-row yaw angles (x, z plane)."""
    c, s = np.cos(yaw), np.sin(yaw)
    x, y, z = vectors[..., 0], vectors[..., 1], vectors[..., 2]
    return np.stack([c * x + s * z, y, -s * x + c * z], axis=-1)


def integrate_root(
    rot_vel: np.ndarray,
    lin_vel: np.ndarray,
    initial_yaw: float = 0.0
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Integrate per-frame root velocities into yaw angles and planar positions.

    Frame 0 sits at the origin with ``initial_yaw``; frame i applies the
    velocities of frame i-1. Returns ``(yaw (N,), xz (N, 2))``.
    """
    n = len(rot_vel)
    yaw = initial_yaw + np.concatenate([[0.0], np.cumsum(rot_vel[:-1], dtype=np.float64)])
    local = np.zeros((n, 3))
    local[:, 0] = lin_vel[:, 0]
    local[:, 2] = lin_vel[:, 1]
    steps = yaw_rotate(local, yaw)
    xz = np.zeros((n, 2))
    xz[1:, 0] = np.cumsum(steps[:-1, 0])
    xz[1:, 1] = np.cumsum(steps[:-1, 2])
    return yaw, xz


def to_global(
    m: Union[MotionSequence, LabeledClip, np.ndarray],
    initial_yaw: float = 0.0
) -> np.ndarray:
    """
    World positions (N, J, 3) of every joint, root first.

    Root yaw and planar position come from integrating the root velocities;
    root height is taken as is; the other joints are rotated out of the root
    frame and offset by the root position.
    """
    features = _features(m).astype(np.float64)
    layout = PoseLayout.from_features(features.shape[-1])
    yaw, xz = integrate_root(
        layout.view(features, "rot_vel")[:, 0],
        layout.view(features, "lin_vel"),
        initial_yaw
    )
    root = np.stack([xz[:, 0], layout.view(features, "root_y")[:, 0], xz[:, 1]], axis=-1)
    local = layout.joint_positions(features)
    joints = yaw_rotate(local, yaw[:, None]) + root[:, None, :]
    return np.concatenate([root[:, None, :], joints], axis=1)


# ----------------------------------------------------------------------
# Motion files
# ----------------------------------------------------------------------

def _format_label(value: Optional[int]) -> str:
    return "-" if value is None else str(int(value))


def _parse_label(value: str) -> Optional[int]:
    return None if value == "-" else int(value)


def encode_motion(clip: LabeledClip) -> bytes:
    features = np.ascontiguousarray(clip.motion.features, dtype="<f4")
    n, f = features.shape
    layout = PoseLayout.from_features(f)
    prompt = base64.b64encode(clip.text.encode("utf-8")).decode("ascii")
    header = (
        f"{MOTION_MAGIC} {MOTION_VERSION} J={layout.n_joints} N={n} "
        f"action={_format_label(clip.action_id)} style={_format_label(clip.style_id)} prompt={prompt}\n"
    )
    return header.encode("utf-8") + features.tobytes()


def decode_motion(blob: bytes, source: str = "<bytes>") -> LabeledClip:
    newline = blob.find(b"\n")
    if newline < 0:
        raise LayoutError(f"{source}: missing header line")
    try:
        parts = blob[:newline].decode("utf-8").split(" ")
        if parts[0] != MOTION_MAGIC or parts[1] != MOTION_VERSION:
            raise LayoutError(f"{source}: not a {MOTION_MAGIC} {MOTION_VERSION} file")
        fields = dict(p.split("=", 1) for p in parts[2:])
        n_joints = int(fields["J"])
        n_frames = int(fields["N"])
        action_id = _parse_label(fields["action"])
        style_id = _parse_label(fields["style"])
        prompt = base64.b64decode(fields["prompt"], validate=True).decode("utf-8")
    except (IndexError, KeyError, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, LayoutError):
            raise
        raise LayoutError(f"{source}: malformed header ({e})") from e

    layout = PoseLayout(n_joints)
    payload = blob[newline + 1:]
    expected = n_frames * layout.n_features * 4
    if len(payload) != expected:
        raise LayoutError(
            f"{source}: payload has {len(payload)} bytes, J={n_joints} N={n_frames} "
            f"requires {expected} (F = {layout.n_features})"
        )
    features = np.frombuffer(payload, dtype="<f4").reshape(n_frames, layout.n_features)
    if not np.all(np.isfinite(features)):
        raise LayoutError(f"{source}: motion contains non-finite values")
    return LabeledClip(
        motion=MotionSequence(features.astype(np.float32)),
        action_id=action_id,
        style_id=style_id,
        prompt=tuple(prompt.split())
    )


def write_motion(clip: LabeledClip, path: Union[str, Path]):
    Path(path).write_bytes(encode_motion(clip))


def read_motion(path: Union[str, Path]) -> LabeledClip:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Motion file not found: {path}")
    return decode_motion(path.read_bytes(), source=str(path))


def write_motion_dir(clips: Sequence[LabeledClip], directory: Union[str, Path], prefix: str = "clip", suffix: str = ".motn") -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, clip in enumerate(clips):
        path = directory / f"{prefix}_{i:05d}{suffix}"
        write_motion(clip, path)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} motion files to {directory}")
    return paths


def read_motion_dir(directory: Union[str, Path], suffix: str = ".motn") -> List[LabeledClip]:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingArtifactError(f"Motion directory not found: {directory}")
    paths = sorted(directory.glob(f"*{suffix}"))
    if not paths:
        raise MissingArtifactError(f"No {suffix} files in {directory}")
    return [read_motion(p) for p in paths]
