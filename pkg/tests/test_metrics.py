import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trackmap.errors import (InsufficientOverlapInTime, NonPositiveDepth,
                             NoValidPixels)
from trackmap.geometry import Pose, Twist, compose, exp_twist
from trackmap.imaging import InverseDepthMap
from trackmap.metrics import (associate_timestamps, l1_inv, l1_rel, sc_inv,
                              to_metric_depth, translational_rpe_rmse)


class TestScInv:
    def test_zero_at_equality(self):
        rng = np.random.default_rng(0)
        d = rng.uniform(0.5, 3.0, (6, 6))
        assert sc_inv(d, d) == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(0.5, 3.0, (6, 6))
        for c in (0.1, 1.0, 7.0):
            assert sc_inv(c * gt, gt) < 1e-9

    def test_two_pixel_hand_case(self):
        d = np.array([[1.0, 2.0]])
        gt = np.array([[1.0, 1.0]])
        # E = (0, log 2); variance of E = (log2)^2 / 4 -> sc_inv = log(2)/2
        e = np.array([0.0, math.log(2.0)])
        want = math.sqrt((e ** 2).mean() - e.mean() ** 2)
        assert sc_inv(d, gt) == pytest.approx(want, abs=1e-12)
        assert sc_inv(d, gt) == pytest.approx(math.log(2.0) / 2.0, abs=1e-12)

    def test_non_positive_rejected(self):
        d = np.array([[1.0, -1.0]])
        with pytest.raises(NonPositiveDepth):
            sc_inv(d, np.ones((1, 2)), np.ones((1, 2), bool),
                   np.ones((1, 2), bool))

    def test_no_valid(self):
        with pytest.raises(NoValidPixels):
            sc_inv(np.ones((2, 2)), np.ones((2, 2)),
                   np.zeros((2, 2), bool), np.zeros((2, 2), bool))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 100.0))
    def test_scale_invariance_property(self, c):
        rng = np.random.default_rng(2)
        gt = rng.uniform(0.5, 3.0, (5, 5))
        assert sc_inv(c * gt, gt) < 1e-9


class TestL1Metrics:
    def test_l1_rel_hand_case(self):
        assert l1_rel(np.array([[2.0]]), np.array([[1.0]])) == 1.0

    def test_l1_inv_hand_case(self):
        assert l1_inv(np.array([[2.0]]), np.array([[1.0]])) == 0.5

    def test_zero_at_equality(self):
        rng = np.random.default_rng(3)
        d = rng.uniform(0.5, 3.0, (4, 4))
        assert l1_rel(d, d) == 0.0
        assert l1_inv(d, d) == 0.0

    def test_direct_loop_oracle(self):
        rng = np.random.default_rng(4)
        d = rng.uniform(0.5, 3.0, (5, 7))
        gt = rng.uniform(0.5, 3.0, (5, 7))
        rel, inv, n = 0.0, 0.0, 0
        for y in range(5):
            for x in range(7):
                rel += abs(d[y, x] - gt[y, x]) / gt[y, x]
                inv += abs(1.0 / d[y, x] - 1.0 / gt[y, x])
                n += 1
        assert l1_rel(d, gt) == pytest.approx(rel / n, abs=1e-12)
        assert l1_inv(d, gt) == pytest.approx(inv / n, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        d = rng.uniform(0.5, 3.0, (4, 4))
        gt = rng.uniform(0.5, 3.0, (4, 4))
        perm = rng.permutation(16)
        a = l1_rel(d, gt)
        b = l1_rel(d.ravel()[perm].reshape(4, 4), gt.ravel()[perm].reshape(4, 4))
        assert a == pytest.approx(b, abs=1e-12)

    def test_validity_mask_respected(self):
        d = np.array([[2.0, 100.0]])
        gt = np.array([[1.0, 1.0]])
        valid = np.array([[True, False]])
        assert l1_rel(d, gt, valid, np.ones((1, 2), bool)) == 1.0


class TestToMetricDepth:
    def test_inversion(self):
        inv = InverseDepthMap(np.array([[0.5, 0.0]]), np.array([[True, True]]))
        depth, valid = to_metric_depth(inv)
        assert depth[0, 0] == 2.0
        assert not valid[0, 1]


def static_trajectory(n, fps=30.0):
    return [(i / fps, Pose.identity()) for i in range(n)]


class TestRPE:
    def test_zero_for_identical(self):
        rng = np.random.default_rng(6)
        traj = []
        pose = Pose.identity()
        for i in range(90):
            pose = compose(pose, exp_twist(Twist(rng.normal(0, 0.01, 3),
                                                 rng.normal(0, 0.02, 3))))
            traj.append((i / 30.0, pose))
        assert translational_rpe_rmse(traj, traj) < 1e-12

    def test_constant_drift_case(self):
        # 0.01 m per frame at 30 Hz -> 0.3 m/s
        gt = static_trajectory(90)
        est = [(t, Pose(np.eye(3), np.array([0.01 * i, 0.0, 0.0])))
               for i, (t, _) in enumerate(gt)]
        got = translational_rpe_rmse(est, gt, interval=1.0)
        assert got == pytest.approx(0.3, abs=1e-9)

    def test_matches_reference_reimplementation(self):
        rng = np.random.default_rng(7)
        gt, est = [], []
        g = Pose.identity()
        e = Pose.identity()
        for i in range(60):
            g = compose(g, exp_twist(Twist(rng.normal(0, 0.01, 3),
                                           rng.normal(0, 0.02, 3))))
            e = compose(e, exp_twist(Twist(rng.normal(0, 0.01, 3),
                                           rng.normal(0, 0.02, 3))))
            gt.append((i / 30.0, g))
            est.append((i / 30.0, e))
        got = translational_rpe_rmse(est, gt, interval=1.0)

        # straightforward reimplementation with explicit 4x4 matrices
        errs = []
        for i in range(60):
            j = i + 30
            if j >= 60:
                break
            dt = est[j][0] - est[i][0]
            rel_e = np.linalg.inv(est[i][1].matrix()) @ est[j][1].matrix()
            rel_g = np.linalg.inv(gt[i][1].matrix()) @ gt[j][1].matrix()
            delta = np.linalg.inv(rel_g) @ rel_e
            errs.append(np.linalg.norm(delta[:3, 3]) / dt)
        want = math.sqrt(np.mean(np.square(errs)))
        assert got == pytest.approx(want, abs=1e-10)

    def test_invariant_to_global_rigid_transform(self):
        rng = np.random.default_rng(8)
        gt, est = [], []
        g = Pose.identity()
        for i in range(60):
            g = compose(g, exp_twist(Twist(rng.normal(0, 0.01, 3),
                                           rng.normal(0, 0.02, 3))))
            gt.append((i / 30.0, g))
            est.append((i / 30.0, compose(g, exp_twist(
                Twist(rng.normal(0, 0.001, 3), rng.normal(0, 0.002, 3))))))
        base = translational_rpe_rmse(est, gt)
        world = exp_twist(Twist(np.array([0.3, -0.2, 0.9]),
                                np.array([5.0, -2.0, 1.0])))
        est_t = [(t, compose(world, p)) for t, p in est]
        gt_t = [(t, compose(world, p)) for t, p in gt]
        assert translational_rpe_rmse(est_t, gt_t) == pytest.approx(base,
                                                                    abs=1e-10)

    def test_insufficient_overlap(self):
        traj = static_trajectory(5)
        with pytest.raises(InsufficientOverlapInTime):
            translational_rpe_rmse(traj[:1], traj[:1])
        # aligned but shorter than the interval
        with pytest.raises(InsufficientOverlapInTime):
            translational_rpe_rmse(traj, traj, interval=10.0)

    def test_association_threshold(self):
        a = [0.0, 1.0, 2.0]
        b = [0.01, 1.05, 1.99]
        pairs = associate_timestamps(a, b, max_gap=0.02)
        assert pairs == [(0, 0), (2, 2)]
