import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motiondd.motion_repr import (
    FOOT_JOINTS,
    N_JOINTS,
    PARENTS,
    REST_OFFSETS,
    JointMotion,
    MotionClip,
    ResampleWarning,
    canonicalize,
    decode_features,
    detect_foot_contacts,
    encode_features,
    feature_dim,
    feature_slices,
    heading,
    read_jntm,
    read_mclp,
    rot_y,
    write_jntm,
    write_mclp,
)
from motiondd.synthetic import skeleton_corpus, walk_motion


def rest_pose():
    pose = np.zeros((N_JOINTS, 3))
    for j in range(1, N_JOINTS):
        pose[j] = pose[PARENTS[j]] + REST_OFFSETS[j]
    pose[:, 1] += REST_OFFSETS[0, 1]
    return pose


def standing(n_frames=6):
    return JointMotion(np.repeat(rest_pose()[None], n_frames, axis=0), 20)


def rigid(motion, theta, shift):
    R = rot_y(theta)
    return JointMotion(motion.frames @ R.T + np.array([shift[0], 0.0, shift[1]]), motion.fps)


class TestLayout:
    def test_dimension(self):
        assert feature_dim(22) == 263
        sl = feature_slices()
        widths = {k: v.stop - v.start for k, v in sl.items()}
        assert widths == {"root_angular_velocity": 1, "root_velocity_xz": 2, "root_height": 1,
                          "local_positions": 63, "local_rotations": 126, "local_velocities": 66,
                          "foot_contacts": 4}

    def test_rot_y_convention(self):
        np.testing.assert_allclose(rot_y(0.3) @ [0, 0, 1], [math.sin(0.3), 0, math.cos(0.3)], atol=1e-15)

    def test_rest_pose_faces_plus_z(self):
        assert abs(heading(rest_pose())) < 1e-12


class TestCanonicalize:
    def test_identity(self):
        m = standing()
        out = canonicalize(m)
        np.testing.assert_allclose(out.frames, m.frames, atol=1e-12)
        assert out.fps == 20 and not out.resampled

    def test_decimate_and_crop(self):
        m = walk_motion(400, fps=40)
        out = canonicalize(m)
        assert out.fps == 20 and out.n_frames == 196
        # stride-2 decimation keeps even source frames, then the rigid transform
        ref = canonicalize(JointMotion(m.frames[::2][:196], 20))
        np.testing.assert_allclose(out.frames, ref.frames, atol=1e-12)

    def test_facing_minus_x_fixture(self):
        # three joints: root, left hip, right hip. Hip axis along -Z means facing -X.
        frames = np.zeros((3, 3, 3))
        for f in range(3):
            root = np.array([1.0 - 0.1 * f, 0.9, 2.0])
            frames[f] = [root, root + [0.0, 0.0, 0.1], root + [0.0, 0.0, -0.1]]
        out = canonicalize(JointMotion(frames, 20))
        # by hand: subtract (1, 0, 2), then (x, y, z) -> (z, y, -x)
        expected = np.zeros((3, 3, 3))
        for f in range(3):
            root = np.array([0.0, 0.9, 0.1 * f])
            expected[f] = [root, root + [0.1, 0.0, 0.0], root + [-0.1, 0.0, 0.0]]
        np.testing.assert_allclose(out.frames, expected, atol=1e-12)
        assert abs(heading(out.frames[0])) < 1e-12

    def test_non_integer_ratio_warns(self):
        m = walk_motion(30, fps=30)
        with pytest.warns(ResampleWarning):
            out = canonicalize(m)
        assert out.resampled and out.fps == 20 and out.n_frames == 20

    def test_linear_interpolation_values(self):
        # facing +Z, walking along +Z at 0.3 m per source frame, sampled at 30 fps
        frames = np.zeros((4, 3, 3))
        frames[:, 1] = [0.1, 0.0, 0.0]
        frames[:, 2] = [-0.1, 0.0, 0.0]
        frames[:, :, 2] += np.arange(4.0)[:, None] * 0.3
        with pytest.warns(ResampleWarning):
            out = canonicalize(JointMotion(frames, 30))
        # target times 0, 1/20, 2/20 fall on source indices 0, 1.5, 3
        np.testing.assert_allclose(out.frames[:, 0, 2], [0.0, 0.45, 0.9], atol=1e-12)
        np.testing.assert_allclose(out.frames[:, 1, 0], 0.1, atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            canonicalize(walk_motion(1))
        with pytest.raises(ValueError):
            canonicalize(walk_motion(10, fps=10))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-math.pi, math.pi), st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 7))
    def test_rigid_invariance(self, theta, tx, tz, idx):
        m = skeleton_corpus(8, n_frames=24)[idx]
        a = encode_features(canonicalize(m)).features
        b = encode_features(canonicalize(rigid(m, theta, (tx, tz)))).features
        assert np.abs(a - b).max() <= 1e-6


class TestEncode:
    def test_standing_still(self):
        clip = encode_features(standing())
        sl = feature_slices()
        assert clip.features.shape == (5, 263)
        np.testing.assert_array_equal(clip.features[:, sl["local_velocities"]], 0.0)
        np.testing.assert_array_equal(clip.features[:, sl["root_velocity_xz"]], 0.0)
        np.testing.assert_array_equal(clip.features[:, sl["root_angular_velocity"]], 0.0)
        np.testing.assert_array_equal(clip.features[:, sl["foot_contacts"]], 1.0)

    def test_uniform_translation(self):
        v = 0.03
        frames = rest_pose()[None] + np.arange(8)[:, None, None] * np.array([0.0, 0.0, v])
        f = encode_features(JointMotion(frames, 20)).features
        np.testing.assert_allclose(f[:, 2], v, atol=1e-15)
        np.testing.assert_allclose(f[:, 1], 0.0, atol=1e-15)
        np.testing.assert_allclose(f[:, 0], 0.0, atol=1e-15)

    def test_non_finite(self):
        m = standing()
        m.frames[2, 3, 1] = np.nan
        with pytest.raises(ValueError):
            encode_features(m)

    def test_hand_computed_walk(self):
        m = canonicalize(walk_motion(5, speed=0.04, turn=0.05, cadence=0.3, swing=0.6))
        P = m.frames
        got = encode_features(m).features
        expected = np.zeros_like(got)

        def to_local(v, psi):
            c, s = math.cos(psi), math.sin(psi)
            return np.array([c * v[0] - s * v[2], v[1], s * v[0] + c * v[2]])

        def facing(pose):
            d = pose[2] - pose[1]
            return math.atan2(d[2], -d[0])

        for f in range(4):
            psi, psi_next = facing(P[f]), facing(P[f + 1])
            dpsi = (psi_next - psi + math.pi) % (2 * math.pi) - math.pi
            root = P[f, 0]
            row = [dpsi]
            rv = to_local(P[f + 1, 0] - root, psi)
            row += [rv[0], rv[2], root[1]]
            local = [to_local(P[f, j] - np.array([root[0], 0.0, root[2]]), psi) for j in range(N_JOINTS)]
            for j in range(1, N_JOINTS):
                row += list(local[j])
            for j in range(1, N_JOINTS):
                b = local[j] - local[PARENTS[j]]
                b = b / np.linalg.norm(b)
                ref = np.array([0.0, 0.0, 1.0]) if abs(b[0]) > 0.99 else np.array([1.0, 0.0, 0.0])
                e = ref - (ref @ b) * b
                row += list(b) + list(e / np.linalg.norm(e))
            for j in range(N_JOINTS):
                row += list(to_local(P[f + 1, j] - P[f, j], psi))
            for j in FOOT_JOINTS:
                row.append(1.0 if np.linalg.norm(P[f + 1, j] - P[f, j]) < 0.002 else 0.0)
            expected[f] = row
        np.testing.assert_allclose(got, expected, atol=1e-12)


class TestContacts:
    def test_static(self):
        np.testing.assert_array_equal(detect_foot_contacts(standing(3)), 1.0)

    def test_all_moving_fast(self):
        frames = rest_pose()[None] + np.arange(4)[:, None, None] * np.array([0.02, 0.0, 0.0])
        np.testing.assert_array_equal(detect_foot_contacts(JointMotion(frames, 20)), 0.0)

    def test_planted_left_foot(self):
        # right ankle and foot move 0.0025 then 0.0015 m per frame; left foot stays put
        frames = np.repeat(rest_pose()[None], 3, axis=0)
        for j in (8, 11):
            frames[1, j, 2] += 0.0025
            frames[2, j, 2] += 0.0025 + 0.0015
        c = detect_foot_contacts(JointMotion(frames, 20))
        np.testing.assert_array_equal(c, [[1, 1, 0, 0], [1, 1, 1, 1]])


class TestDecode:
    @pytest.mark.parametrize("idx", range(8))
    def test_round_trip(self, idx):
        m = canonicalize(skeleton_corpus(8)[idx])
        back = decode_features(encode_features(m))
        assert np.abs(back.frames - m.frames[:-1]).max() <= 1e-4

    def test_zero_velocity_is_constant_pose(self):
        back = decode_features(encode_features(standing()))
        np.testing.assert_allclose(back.frames, np.repeat(back.frames[:1], 5, axis=0), atol=1e-15)

    def test_single_frame(self):
        clip = MotionClip(encode_features(standing(2)).features[:1])
        back = decode_features(clip)
        assert back.n_frames == 1
        assert back.frames[0, 0, 1] == clip.features[0, 3]

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            decode_features(MotionClip(np.zeros((3, 10))))


class TestFiles:
    def test_mclp_round_trip(self, tmp_path):
        clip = encode_features(canonicalize(walk_motion(20)))
        write_mclp(tmp_path / "a.mclp", clip)
        raw = (tmp_path / "a.mclp").read_bytes()
        assert raw[:4] == b"MCLP" and len(raw) == 20 + 4 * 19 * 263
        back = read_mclp(tmp_path / "a.mclp")
        np.testing.assert_array_equal(back.features, clip.features.astype(np.float32))
        assert back.fps == 20

    def test_jntm_round_trip(self, tmp_path):
        m = walk_motion(7)
        write_jntm(tmp_path / "a.jntm", m)
        back = read_jntm(tmp_path / "a.jntm")
        np.testing.assert_array_equal(back.frames, m.frames.astype(np.float32))

    def test_bad_magic_and_truncation(self, tmp_path):
        write_mclp(tmp_path / "a", MotionClip(np.ones((2, 3))))
        with pytest.raises(ValueError, match="JNTM"):
            read_jntm(tmp_path / "a")
        (tmp_path / "b").write_bytes((tmp_path / "a").read_bytes()[:-4])
        with pytest.raises(ValueError, match="payload"):
            read_mclp(tmp_path / "b")
