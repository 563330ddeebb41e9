"""
Procedural gait synthesizer standing in for a real motion-capture corpus.

Clips are built from sinusoidal limb oscillation: each action fixes stride
frequency, forward speed and step scale; each style modifies a disjoint
subset of lean, pitch, bounce, arm swing, arm spread, arm flap, step height and
crouch. Styles are separable by construction, which the style-signature check
in the tests relies on.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from stylediff.engine.motion import (
    LabeledClip,
    MotionSequence,
    PoseLayout,
    integrate_root,
    yaw_rotate,
)
from stylediff.engine.tensor import make_rng
from stylediff.errors import ConfigError
from stylediff.schemas.config import DataConfig

logger = logging.getLogger(__name__)

CONTACT_THRESHOLD = 0.05

# Skeleton geometry (world units)
HIP_HEIGHT = 0.9
HIP_WIDTH = 0.1
SHOULDER_HEIGHT = 0.5
SHOULDER_WIDTH = 0.2
ARM_LENGTH = 0.55
SPINE_STEP = 0.15


class StyleCategory(Enum):
    CHARACTER = "character"
    PERSONALITY = "personality"
    EMOTION = "emotion"
    ACTION = "action"


@dataclass(frozen=True)
class ActionParams:
    """Per-action base gait parameters."""
    name: str
    stride_freq: float                 # rad/frame
    speed: float                       # units/frame along direction
    direction: Tuple[float, float]     # (x, z) in the root frame
    step_scale: float
    prompts: Tuple[str, ...]


@dataclass(frozen=True)
class StyleParams:
    """Gait modifiers. ``modifies`` names the fields this style changes from neutral."""
    name: str
    category: Optional[StyleCategory] = None
    lean: float = 0.0
    pitch: float = 0.0
    bounce: float = 0.02
    arm_swing: float = 0.25
    arm_out: float = 0.0
    arm_flap: float = 0.0
    step_height: float = 0.08
    height_offset: float = 0.0
    modifies: FrozenSet[str] = field(default_factory=frozenset)

    def compatible_with(self, other: "StyleParams") -> bool:
        """Two styles can be mixed when they change disjoint features."""
        return not (self.modifies & other.modifies)


NEUTRAL = StyleParams(name="neutral")


def _style(name: str, category: StyleCategory, **overrides) -> StyleParams:
    return replace(NEUTRAL, name=name, category=category, modifies=frozenset(overrides), **overrides)


ACTIONS: List[ActionParams] = [
    ActionParams("walk", 2 * np.pi / 30, 0.035, (0.0, 1.0), 1.0,
                 ("a person is walking forward", "a person walks forward", "someone is walking")),
    ActionParams("run", 2 * np.pi / 20, 0.09, (0.0, 1.0), 1.5,
                 ("a person is running forward", "a person runs forward", "someone is running")),
    ActionParams("idle", 2 * np.pi / 40, 0.0, (0.0, 1.0), 0.5,
                 ("a person is standing still", "a person stands in place", "someone is standing")),
    ActionParams("sidestep", 2 * np.pi / 30, 0.025, (1.0, 0.0), 0.8,
                 ("a person is stepping sideways", "a person steps sideways", "someone is stepping sideways")),
    ActionParams("backwards", 2 * np.pi / 30, 0.025, (0.0, -1.0), 0.8,
                 ("a person is walking backwards", "a person walks backwards", "someone is walking backwards")),
]

STYLES: List[StyleParams] = [
    _style("bouncy", StyleCategory.PERSONALITY, bounce=0.10),
    _style("chicken", StyleCategory.CHARACTER, arm_out=0.25, arm_flap=0.08),
    _style("tilted", StyleCategory.PERSONALITY, lean=0.35),
    _style("highknees", StyleCategory.ACTION, step_height=0.35),
    _style("crouched", StyleCategory.ACTION, height_offset=-0.25),
    _style("proud", StyleCategory.EMOTION, pitch=-0.25, arm_swing=0.5),
    _style("depressed", StyleCategory.EMOTION, pitch=0.3, arm_swing=0.05),
    _style("robot", StyleCategory.CHARACTER, arm_swing=0.0, bounce=0.0),
]


def action_names() -> List[str]:
    return [a.name for a in ACTIONS]


def style_names(n_styles: Optional[int] = None) -> List[str]:
    return [s.name for s in STYLES[:n_styles]]


def style_by_name(name: str) -> StyleParams:
    for style in STYLES:
        if style.name == name:
            return style
    raise ConfigError(f"Unknown style '{name}'. Available: {', '.join(style_names())}")


def prompt_words() -> List[str]:
    """Every word the toy prompts use, plus the plain style names."""
    words: List[str] = []
    for action in ACTIONS:
        for prompt in action.prompts:
            words.extend(w for w in prompt.split() if w not in words)
    words.extend(s.name for s in STYLES)
    return words


def rotation_6d(matrices: np.ndarray) -> np.ndarray:
    """First two columns of (..., 3, 3) rotation matrices, flattened to (..., 6)."""
    return np.concatenate([matrices[..., :, 0], matrices[..., :, 1]], axis=-1)


def _rot_x(angle: np.ndarray) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    m = np.zeros(angle.shape + (3, 3))
    m[..., 0, 0] = 1.0
    m[..., 1, 1], m[..., 1, 2] = c, -s
    m[..., 2, 1], m[..., 2, 2] = s, c
    return m


def _rot_z(angle: np.ndarray) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    m = np.zeros(angle.shape + (3, 3))
    m[..., 0, 0], m[..., 0, 1] = c, -s
    m[..., 1, 0], m[..., 1, 1] = s, c
    m[..., 2, 2] = 1.0
    return m


class ToyGaitGenerator:
    """
    Synthesizes labeled gait clips for one skeleton size.

    Every clip draws from its own Philox stream keyed by (seed, action, style,
    clip index), so a clip does not depend on which other cells are generated.
    """

    def __init__(self, seed: int, n_joints: int = 5, frames: int = 60, noise: float = 0.003):
        self.seed = seed
        self.layout = PoseLayout(n_joints)
        self.frames = frames
        self.noise = noise

    def _get_style_params(self, style: StyleParams, rng: np.random.Generator) -> StyleParams:
        """Jitter every amplitude by +-10% so cells are clouds, not points."""
        def jitter(value: float) -> float:
            return value * rng.uniform(0.9, 1.1)

        return replace(
            style,
            lean=jitter(style.lean),
            pitch=jitter(style.pitch),
            bounce=jitter(style.bounce),
            arm_swing=jitter(style.arm_swing),
            arm_out=jitter(style.arm_out),
            arm_flap=jitter(style.arm_flap),
            step_height=jitter(style.step_height),
            height_offset=jitter(style.height_offset),
        )

    def generate_clip(
        self,
        action: ActionParams,
        style: Optional[StyleParams],
        rng: np.random.Generator,
        action_id: Optional[int] = None,
        style_id: Optional[int] = None
    ) -> LabeledClip:
        n = self.frames
        j = self.layout.n_joints
        params = self._get_style_params(style or NEUTRAL, rng)

        omega = action.stride_freq * rng.uniform(0.92, 1.08)
        speed = action.speed * rng.uniform(0.9, 1.1)
        turn = rng.uniform(-0.004, 0.004) if speed > 0 else 0.0
        phi = rng.uniform(0.0, 2 * np.pi) + omega * np.arange(n)

        # Root trajectory
        rot_vel = np.full(n, turn)
        lin_vel = np.tile(np.array(action.direction) * speed, (n, 1))
        root_y = HIP_HEIGHT + params.height_offset + params.bounce * np.cos(2 * phi)

        # Feet: swing during sin(phi) > 0, planted otherwise
        stride = speed / omega
        step_h = params.step_height * action.step_scale
        dx, dz = action.direction
        feet_local, feet_height, leg_angle = [], [], []
        for side, offset in ((1.0, 0.0), (-1.0, np.pi)):
            p = phi + offset
            height = np.maximum(0.0, step_h * np.sin(p))
            along = -stride * np.cos(p)
            feet_local.append(np.stack([side * HIP_WIDTH + dx * along, height - root_y, dz * along], axis=-1))
            feet_height.append(height)
            leg_angle.append(np.arctan2(along, HIP_HEIGHT))

        # Upper body: hands hang from shoulders carried by the lean/pitch rotation
        body = _rot_z(np.full(n, params.lean)) @ _rot_x(np.full(n, params.pitch))
        n_upper = j - 3
        upper_local, upper_rot = [], []
        swing_amp = params.arm_swing * max(action.step_scale, 0.3)
        for k in range(n_upper):
            if k < 2 and n_upper >= 2:
                side = 1.0 if k == 0 else -1.0
                theta = side * swing_amp * np.cos(phi)
                shoulder = body @ np.array([side * SHOULDER_WIDTH, SHOULDER_HEIGHT, 0.0])
                arm = np.stack([
                    np.full(n, side * params.arm_out),
                    -ARM_LENGTH * np.cos(theta) + params.arm_flap * np.sin(2 * phi),
                    ARM_LENGTH * np.sin(theta)
                ], axis=-1)
                upper_local.append(shoulder + arm)
                upper_rot.append(body @ _rot_x(theta))
            else:
                level = k - 1 if n_upper >= 2 else k + 1
                upper_local.append(body @ np.array([0.0, SPINE_STEP * level, 0.0]))
                upper_rot.append(body)

        local = np.stack(upper_local + feet_local, axis=1)                      # (n, j-1, 3)
        rotations = np.stack(upper_rot + [_rot_x(a) for a in leg_angle], axis=1)  # (n, j-1, 3, 3)
        local = local + rng.normal(0.0, self.noise, size=local.shape)

        # World positions for velocities
        yaw, xz = integrate_root(rot_vel, lin_vel)
        root = np.stack([xz[:, 0], root_y, xz[:, 1]], axis=-1)
        world = np.concatenate([root[:, None], yaw_rotate(local, yaw[:, None]) + root[:, None]], axis=1)
        velocity = np.zeros_like(world)
        velocity[:-1] = yaw_rotate(world[1:] - world[:-1], -yaw[:-1, None])
        velocity[-1] = velocity[-2]

        left, right = (h < CONTACT_THRESHOLD for h in feet_height)
        contacts = np.stack([left, left, right, right], axis=-1).astype(np.float64)

        features = np.concatenate([
            rot_vel[:, None],
            lin_vel,
            root_y[:, None],
            local.reshape(n, -1),
            rotation_6d(rotations).reshape(n, -1),
            velocity.reshape(n, -1),
            contacts,
        ], axis=-1)
        if features.shape[1] != self.layout.n_features:
            raise AssertionError(f"Synthesized {features.shape[1]} features, layout needs {self.layout.n_features}")

        template = action.prompts[int(rng.integers(len(action.prompts)))]
        return LabeledClip(
            motion=MotionSequence(features.astype(np.float32)),
            action_id=action_id,
            style_id=style_id,
            prompt=tuple(template.split())
        )

    def generate_cell(
        self,
        action_id: int,
        style_id: Optional[int],
        n_clips: int
    ) -> List[LabeledClip]:
        action = ACTIONS[action_id]
        style = STYLES[style_id] if style_id is not None else None
        stream = style_id + 1 if style_id is not None else 0
        return [
            self.generate_clip(
                action, style, make_rng(self.seed, action_id, stream, i),
                action_id=action_id, style_id=style_id
            )
            for i in range(n_clips)
        ]


def generate_toy_dataset(config: Union[DataConfig, Mapping]) -> List[LabeledClip]:
    """
    Neutral cells for every action, then style cells for every (action, style).

    Returns clips in that order; deterministic per ``config.seed``.
    """
    if not isinstance(config, DataConfig):
        try:
            config = DataConfig.model_validate(config)
        except ValidationError as e:
            raise ConfigError(f"Invalid toy dataset config: {e}") from e

    generator = ToyGaitGenerator(config.seed, config.n_joints, config.frames, config.noise)
    clips: List[LabeledClip] = []
    for action_id in range(config.n_actions):
        clips.extend(generator.generate_cell(action_id, None, config.clips_per_cell))
    per_style = config.style_clips_per_cell or config.clips_per_cell
    for style_id in range(config.n_styles):
        for action_id in range(config.n_actions):
            clips.extend(generator.generate_cell(action_id, style_id, per_style))

    logger.info(
        f"Generated {len(clips)} toy clips (J={config.n_joints}, F={generator.layout.n_features}, "
        f"{config.n_actions} actions, {config.n_styles} styles)"
    )
    return clips


def split_by_style(clips: Sequence[LabeledClip]) -> Tuple[List[LabeledClip], List[LabeledClip]]:
    """(neutral clips, stylized clips)."""
    neutral = [c for c in clips if c.style_id is None]
    styled = [c for c in clips if c.style_id is not None]
    return neutral, styled


def style_signature(motion: Union[MotionSequence, LabeledClip, np.ndarray]) -> np.ndarray:
    """
    Hand-computed style features of one clip.

    [lean, bounce, swing, arm spread, flap, step height, root height, pitch];
    hand features are zero on skeletons without hands.
    """
    if isinstance(motion, LabeledClip):
        motion = motion.motion
    features = motion.features if isinstance(motion, MotionSequence) else np.asarray(motion)
    layout = PoseLayout.from_features(features.shape[-1])
    positions = layout.joint_positions(features).astype(np.float64)
    root_y = layout.view(features, "root_y")[:, 0].astype(np.float64)
    feet = positions[:, -2:, 1] + root_y[:, None]

    if layout.n_joints >= 5:
        hands = positions[:, :2]
        lean = hands[..., 0].mean()
        swing = hands[..., 2].std()
        spread = np.abs(hands[..., 0]).mean()
        flap = (hands[..., 1] - hands[..., 1].mean(axis=0)).std()
        pitch = hands[..., 2].mean()
    else:
        lean = swing = spread = flap = pitch = 0.0

    return np.array([
        lean,
        root_y.std(),
        swing,
        spread,
        flap,
        feet.max(),
        root_y.mean(),
        pitch,
    ])
