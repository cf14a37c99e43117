import math

import numpy as np
import pytest

from trackmap.errors import DegenerateView
from trackmap.geometry import Pose, Twist, exp_twist, inverse, relative_transform
from trackmap.imaging import CameraIntrinsics, Image, InverseDepthMap
from trackmap.keyframe import (Keyframe, render_virtual_keyframe,
                               should_switch_keyframe)
from trackmap import synth


def make_keyframe(seed=0, width=48, height=36, scene_builder=synth.plane_scene):
    scene = scene_builder(seed=seed, width=width, height=height)
    img, dep = synth.render_scene(scene, Pose.identity())
    return Keyframe(img, dep, Pose.identity(), scene.intrinsics, id=0), scene


class TestKeyframeType:
    def test_dimension_mismatch_rejected(self):
        img = Image(np.zeros((4, 4)))
        dep = InverseDepthMap(np.ones((4, 5)), np.ones((4, 5), bool))
        with pytest.raises(ValueError):
            Keyframe(img, dep, Pose.identity(),
                     CameraIntrinsics.simple(5, 4), id=0)

    def test_all_invalid_depth_rejected(self):
        img = Image(np.zeros((4, 4)))
        dep = InverseDepthMap(np.zeros((4, 4)), np.zeros((4, 4), bool))
        with pytest.raises(ValueError):
            Keyframe(img, dep, Pose.identity(),
                     CameraIntrinsics.simple(4, 4), id=0)


class TestRenderVirtual:
    def test_identity_viewpoint_lossless(self):
        kf, _ = make_keyframe()
        i_v, d_v = render_virtual_keyframe(kf, kf.pose)
        assert d_v.valid.all()
        assert np.abs(i_v.values - kf.image.to_gray().values)[d_v.valid].max() < 1e-6
        assert np.abs(d_v.values - kf.inv_depth.values)[d_v.valid].max() < 1e-9

    def test_small_rotation_depth_matches_point_transform_oracle(self):
        kf, scene = make_keyframe(seed=3)
        guess = exp_twist(Twist(np.array([0.0, math.radians(1.0), 0.0]),
                                np.zeros(3)))
        _, d_v = render_virtual_keyframe(kf, guess)

        # oracle: project every keyframe point, keep per-pixel min depth
        K = kf.intrinsics
        h, w = d_v.values.shape
        rel = relative_transform(kf.pose, guess)
        best = np.full((h, w), np.inf)
        ys, xs = np.nonzero(kf.inv_depth.valid)
        for y, x in zip(ys, xs):
            z = 1.0 / kf.inv_depth.values[y, x]
            p = np.array([(x - K.cx) / K.fx * z, (y - K.cy) / K.fy * z, z])
            q = rel.rotation @ p + rel.translation
            if q[2] <= 1e-6:
                continue
            u = int(round(K.fx * q[0] / q[2] + K.cx))
            v = int(round(K.fy * q[1] / q[2] + K.cy))
            if 0 <= u < w and 0 <= v < h:
                best[v, u] = min(best[v, u], q[2])
        splatted = np.isfinite(best)
        got = d_v.values[splatted]
        want = 1.0 / best[splatted]
        assert np.abs(got - want).max() < 1e-5

    def test_looking_away_degenerate(self):
        kf, _ = make_keyframe()
        # 180 degree turn: the plane is behind the virtual camera
        away = Pose(np.diag([-1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(DegenerateView):
            render_virtual_keyframe(kf, away)

    def test_occlusion_two_plane_scene(self):
        # construct two fronto-parallel surfaces projecting onto the same
        # virtual pixels; the nearer surface must win the z-buffer
        w, h = 16, 16
        K = CameraIntrinsics.simple(w, h, focal=12.0)
        img = np.zeros((h, w))
        dep = np.zeros((h, w))
        # left half: near plane at 1 m, intensity 0.9; right half: far at 4 m
        img[:, :8] = 0.9
        dep[:, :8] = 1.0
        img[:, 8:] = 0.2
        dep[:, 8:] = 0.25
        kf = Keyframe(Image(img), InverseDepthMap(dep, np.ones((h, w), bool)),
                      Pose.identity(), K, id=0)
        # translate right: near content shifts left over the far content
        guess = Pose(np.eye(3), np.array([0.5, 0.0, 0.0]))
        i_v, d_v = render_virtual_keyframe(kf, guess)
        # somewhere both surfaces projected to the same pixel; check every
        # valid pixel: where depth says near surface, intensity must be 0.9
        near = d_v.valid & (np.abs(1.0 / np.where(d_v.valid, d_v.values, 1.0) - 1.0) < 0.05)
        assert near.any()
        assert np.all(np.abs(i_v.values[near] - 0.9) < 0.05)

    def test_box_room_render_valid(self):
        kf, _ = make_keyframe(scene_builder=synth.box_room_scene)
        guess = Pose(np.eye(3), np.array([0.05, 0.0, 0.0]))
        i_v, d_v = render_virtual_keyframe(kf, guess)
        assert d_v.valid_fraction() > 0.9


class TestSwitchPolicy:
    def test_identical_poses(self):
        p = Pose.identity()
        assert should_switch_keyframe(p, p) is False

    def test_rotation_over_threshold(self):
        rot = exp_twist(Twist(np.array([0.0, math.radians(7.0), 0.0]),
                              np.zeros(3)))
        assert should_switch_keyframe(Pose.identity(), rot) is True

    def test_both_under_threshold(self):
        p = exp_twist(Twist(np.array([0.0, math.radians(5.9), 0.0]),
                            np.array([0.10, 0.0, 0.0])))
        assert should_switch_keyframe(Pose.identity(), p) is False

    def test_translation_over_threshold(self):
        p = Pose(np.eye(3), np.array([0.0, 0.0, 0.151]))
        assert should_switch_keyframe(Pose.identity(), p) is True

    def test_translation_measured_between_centers(self):
        # rotation of the keyframe pose must not affect the distance term
        rng = np.random.default_rng(0)
        base = exp_twist(Twist(rng.normal(0, 0.3, 3), rng.normal(0, 1, 3)))
        offset = Pose(np.eye(3), base.translation + np.array([0.16, 0.0, 0.0]))
        assert should_switch_keyframe(base, compose_rotation_free(base, offset))


def compose_rotation_free(base, target):
    # pose with base's rotation but target's camera center
    return Pose(base.rotation, target.translation)
