import numpy as np
import pytest

from stylediff.engine.motion import (
    FeatureStats,
    LabeledClip,
    MotionSequence,
    PoseLayout,
    clamp_contacts,
    decode_motion,
    denormalize,
    encode_motion,
    integrate_root,
    normalize,
    read_motion,
    read_motion_dir,
    stack_features,
    to_global,
    write_motion_dir,
)
from stylediff.errors import LayoutError, MissingArtifactError


def blank(n_frames: int, n_joints: int = 3) -> np.ndarray:
    return np.zeros((n_frames, PoseLayout(n_joints).n_features), dtype=np.float32)


def test_layout_sizes():
    layout = PoseLayout(22)
    assert layout.n_features == 263
    widths = {name: s.stop - s.start for name, s in layout.slices().items()}
    assert widths == {
        "rot_vel": 1, "lin_vel": 2, "root_y": 1, "joint_pos": 63,
        "joint_rot": 126, "joint_vel": 66, "contacts": 4,
    }
    assert layout.slices()["contacts"].stop == 263
    assert layout.foot_joints == (20, 21)
    assert PoseLayout.from_features(59).n_joints == 5


def test_layout_errors():
    with pytest.raises(LayoutError):
        PoseLayout(2)
    with pytest.raises(LayoutError):
        PoseLayout.from_features(60)


def test_motion_sequence_validation():
    MotionSequence(blank(2))
    with pytest.raises(LayoutError):
        MotionSequence(blank(1))
    with pytest.raises(LayoutError):
        MotionSequence(np.zeros((4, 36)))
    bad = blank(4)
    bad[1, 3] = np.nan
    with pytest.raises(LayoutError):
        MotionSequence(bad)
    out_of_range = blank(4)
    out_of_range[:, -1] = 1.5
    with pytest.raises(LayoutError):
        MotionSequence(out_of_range)
    # normalized data may leave the contact range
    MotionSequence(out_of_range, normalized=True)


def test_clip_needs_prompt():
    with pytest.raises(LayoutError):
        LabeledClip(MotionSequence(blank(3)), action_id=0, style_id=None, prompt=())


def test_normalize_round_trip(rng):
    clips = [MotionSequence(np.abs(rng.normal(size=(8, 35))).clip(0, 1)) for _ in range(3)]
    stats = FeatureStats.fit(clips)
    z = normalize(stack_features(clips), stats)
    np.testing.assert_allclose(z.reshape(-1, 35).mean(axis=0), 0.0, atol=1e-5)
    np.testing.assert_allclose(denormalize(z, stats), stack_features(clips), atol=1e-5)


def test_constant_feature_std_is_clamped():
    stats = FeatureStats.fit([blank(4)])
    assert np.all(stats.std >= 1e-3)
    assert np.all(np.isfinite(normalize(blank(4), stats)))


def test_stats_width_mismatch():
    with pytest.raises(LayoutError):
        normalize(blank(4, 3), FeatureStats.identity(59))


def test_stack_features_rejects_ragged():
    with pytest.raises(LayoutError):
        stack_features([MotionSequence(blank(4)), MotionSequence(blank(5))])


def test_clamp_contacts():
    features = blank(3)
    features[:, -4:] = [-0.5, 0.2, 1.7, 1.0]
    out = clamp_contacts(features)
    np.testing.assert_array_equal(out[0, -4:], np.array([0.0, 0.2, 1.0, 1.0], dtype=np.float32))
    assert features[0, -4] == -0.5


def test_integrate_root_applies_previous_velocity():
    rot_vel = np.zeros(4)
    lin_vel = np.array([[0.0, 1.0], [0.0, 2.0], [0.0, 3.0], [0.0, 4.0]])
    yaw, xz = integrate_root(rot_vel, lin_vel)
    np.testing.assert_allclose(xz[:, 1], [0.0, 1.0, 3.0, 6.0])
    np.testing.assert_allclose(xz[:, 0], 0.0)
    np.testing.assert_allclose(yaw, 0.0)


def test_circle_returns_to_origin():
    n = 36
    features = blank(n + 1)
    features[:, 0] = 2 * np.pi / n
    features[:, 2] = 0.1
    world = to_global(features)
    np.testing.assert_allclose(world[n, 0, [0, 2]], 0.0, atol=1e-5)
    assert np.abs(world[n // 2, 0, [0, 2]]).max() > 0.5


def test_world_positions_follow_yaw():
    features = blank(3)
    layout = PoseLayout(3)
    features[:, layout.slices()["root_y"]] = 0.9
    features[:, layout.slices()["joint_pos"]] = [1.0, -0.9, 0.0, -1.0, -0.9, 0.0]
    world = to_global(features, initial_yaw=np.pi / 2)
    assert world.shape == (3, 3, 3)
    # +x in the root frame points along -z after a quarter turn
    np.testing.assert_allclose(world[0, 1], [0.0, 0.0, -1.0], atol=1e-6)
    np.testing.assert_allclose(world[0, 0], [0.0, 0.9, 0.0], atol=1e-6)


def test_global_positions_are_yaw_equivariant(neutral_clips):
    features = neutral_clips[0].features
    base = to_global(features)
    turned = to_global(features, initial_yaw=0.7)
    # heights do not depend on heading; horizontal distances from the start are preserved
    np.testing.assert_allclose(base[..., 1], turned[..., 1], atol=1e-6)
    np.testing.assert_allclose(
        np.linalg.norm(base[..., [0, 2]], axis=-1),
        np.linalg.norm(turned[..., [0, 2]], axis=-1),
        atol=1e-6,
    )


def test_motion_file_round_trip(tmp_path, neutral_clips):
    clip = neutral_clips[0]
    restored = decode_motion(encode_motion(clip))
    np.testing.assert_array_equal(restored.features, clip.features)
    assert restored.prompt == clip.prompt
    assert restored.action_id == clip.action_id
    assert restored.style_id is None

    paths = write_motion_dir(neutral_clips[:3], tmp_path / "clips")
    assert [p.name for p in paths] == ["clip_00000.motn", "clip_00001.motn", "clip_00002.motn"]
    assert len(read_motion_dir(tmp_path / "clips")) == 3


def test_motion_file_errors(tmp_path, neutral_clips):
    blob = encode_motion(neutral_clips[0])
    with pytest.raises(LayoutError):
        decode_motion(b"JUNK" + blob[4:])
    with pytest.raises(LayoutError):
        decode_motion(blob[:-4])
    with pytest.raises(LayoutError):
        decode_motion(blob.replace(b"J=5", b"J=6", 1))
    with pytest.raises(LayoutError):
        decode_motion(b"no header at all")
    with pytest.raises(LayoutError):
        decode_motion(b"MOTN\n")
    with pytest.raises(MissingArtifactError):
        read_motion(tmp_path / "missing.motn")
    with pytest.raises(MissingArtifactError):
        read_motion_dir(tmp_path)
