import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trackmap.costvolume import (CostVolume, LabelSet, accumulate_cost_volume,
                                 confidence_weight, fixed_band_labels,
                                 load_cost_volume, narrow_band_labels,
                                 sad_cost_map, sad_patch_cost, save_cost_volume)
from trackmap.errors import EmptyFrameList, InvalidRange
from trackmap.geometry import Pose, relative_transform
from trackmap.imaging import Image, InverseDepthMap, warp_image
from trackmap.keyframe import Keyframe
from trackmap import synth


class TestFixedBand:
    def test_paper_range_endpoints(self):
        labels = fixed_band_labels(0.01, 2.5, 32)
        assert labels.labels[0] == 0.01
        assert labels.labels[-1] == 2.5
        assert labels.count == 32

    def test_second_label_arithmetic(self):
        labels = fixed_band_labels(0.01, 2.5, 32)
        assert labels.labels[1] == pytest.approx(0.01 + 2.49 / 31, abs=1e-12)
        assert labels.labels[1] == pytest.approx(0.0903226, abs=1e-7)

    def test_two_labels(self):
        labels = fixed_band_labels(0.01, 2.5, 2)
        assert labels.labels.tolist() == [0.01, 2.5]

    def test_strictly_increasing(self):
        labels = fixed_band_labels(0.2, 0.9, 17)
        assert (np.diff(labels.labels) > 0).all()

    def test_invalid_range(self):
        with pytest.raises(InvalidRange):
            fixed_band_labels(0.5, 0.1, 4)
        with pytest.raises(InvalidRange):
            fixed_band_labels(0.0, 1.0, 4)
        with pytest.raises(InvalidRange):
            fixed_band_labels(0.1, 1.0, 1)

    def test_reversal_invariance(self):
        a = fixed_band_labels(0.1, 1.0, 8).labels
        b = fixed_band_labels(0.1, 1.0, 8).labels[::-1][::-1]
        assert np.array_equal(a, b)


class TestNarrowBand:
    def test_paper_constants_band_edges(self):
        prev = InverseDepthMap.from_values(np.full((2, 2), 1.0))
        labels = narrow_band_labels(prev, sigma_nb=0.0125, n=32)
        assert labels.labels[0, 0, 0] == pytest.approx(0.8, abs=1e-12)
        assert labels.labels[-1, 0, 0] == pytest.approx(1.1875, abs=1e-12)

    def test_invalid_pixel_masked(self):
        vals = np.array([[1.0, 0.0]])
        prev = InverseDepthMap(vals, np.array([[True, True]]))
        labels = narrow_band_labels(prev, 0.0125, 32)
        assert labels.valid[0, 0]
        assert not labels.valid[0, 1]

    def test_sigma_zero_limit(self):
        prev = InverseDepthMap.from_values(np.full((1, 1), 0.7))
        labels = narrow_band_labels(prev, 0.0, 8)
        assert np.allclose(labels.labels[:, 0, 0], 0.7)

    def test_scales_linearly_with_prev(self):
        a = narrow_band_labels(InverseDepthMap.from_values(np.full((1, 1), 1.0)),
                               0.0125, 8).labels[:, 0, 0]
        b = narrow_band_labels(InverseDepthMap.from_values(np.full((1, 1), 3.0)),
                               0.0125, 8).labels[:, 0, 0]
        assert np.allclose(b, 3.0 * a, atol=1e-12)

    def test_collapsing_band_masked(self):
        prev = InverseDepthMap.from_values(np.full((1, 1), 1.0))
        labels = narrow_band_labels(prev, sigma_nb=0.3, n=8)  # 1 - 4*0.3 < 0
        assert not labels.valid[0, 0]


class TestSadPatch:
    def test_identical_patches_zero(self):
        rng = np.random.default_rng(0)
        img = Image(rng.uniform(0, 1, (5, 5)))
        cost, ok = sad_patch_cost(img, img, np.ones((5, 5), bool), 2, 2)
        assert ok and cost == 0.0

    def test_opposite_patches_one(self):
        a = Image(np.ones((5, 5)))
        b = Image(np.zeros((5, 5)))
        cost, ok = sad_patch_cost(a, b, np.ones((5, 5), bool), 2, 2)
        assert ok and cost == 1.0

    def test_matches_direct_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = Image(rng.uniform(0, 1, (7, 9)))
        b = Image(rng.uniform(0, 1, (7, 9)))
        mask = rng.uniform(0, 1, (7, 9)) > 0.2
        costs, ok = sad_cost_map(a, b, mask)
        for y in range(7):
            for x in range(9):
                total, count = 0.0, 0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy = min(max(y + dy, 0), 6)
                        xx = min(max(x + dx, 0), 8)
                        if mask[yy, xx]:
                            total += abs(a.values[yy, xx] - b.values[yy, xx])
                            count += 1
                if count >= 5:
                    assert ok[y, x]
                    assert abs(costs[y, x] - total / count) < 1e-12
                else:
                    assert not ok[y, x]

    def test_sparse_mask_invalidates(self):
        a = Image(np.zeros((5, 5)))
        mask = np.zeros((5, 5), bool)
        mask[2, 2] = True
        _, ok = sad_patch_cost(a, a, mask, 2, 2)
        assert not ok


class TestConfidence:
    def test_flat_curve_zero(self):
        assert confidence_weight(np.full(8, 0.3), 50.0) == pytest.approx(0.0, abs=1e-15)

    def test_sharp_minimum_near_one(self):
        costs = np.full(32, 10.0)
        costs[7] = 0.0
        w = confidence_weight(costs, 50.0)
        assert w > 1.0 - 1e-12

    def test_matches_direct_evaluation(self):
        costs = np.array([0.1, 0.2, 0.4])
        alpha = 50.0
        # direct evaluation from the formula
        want = 1.0 - (np.exp(-alpha * (0.2 - 0.1) ** 2)
                      + np.exp(-alpha * (0.4 - 0.1) ** 2)) / 2.0
        assert confidence_weight(costs, alpha) == pytest.approx(want, abs=1e-12)

    def test_tie_breaks_to_lowest_index(self):
        costs = np.array([0.3, 0.1, 0.1, 0.5])
        # argmin must pick index 1; exponent for index 2 is exp(0) = 1
        want = 1.0 - (np.exp(-50.0 * 0.04) + 1.0 + np.exp(-50.0 * 0.16)) / 3.0
        assert confidence_weight(costs, 50.0) == pytest.approx(want, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=16),
           st.floats(-0.5, 0.5))
    def test_invariant_to_constant_shift(self, costs, shift):
        costs = np.asarray(costs)
        a = confidence_weight(costs, 50.0)
        b = confidence_weight(costs + shift, 50.0)
        assert abs(a - b) < 1e-9


def brute_force_volume(kf, frames, labels, alpha_conf=50.0):
    """Independent per-pixel/per-label/per-frame reimplementation."""
    h, w = kf.inv_depth.height, kf.inv_depth.width
    n = labels.count
    lab, lab_valid = labels.per_pixel(h, w)
    ref = kf.image.to_gray()
    total = np.zeros((n, h, w))
    count = np.zeros((h, w), dtype=int)
    for img, pose in frames:
        rel = relative_transform(kf.pose, pose)
        rho = np.zeros((n, h, w))
        ok = np.zeros((n, h, w), bool)
        for j in range(n):
            d = lab[j] if labels.kind == "narrow" else float(labels.labels[j])
            warped, wmask = warp_image(img.to_gray(), rel, d, kf.intrinsics)
            costs, cok = sad_cost_map(ref, warped, wmask)
            rho[j], ok[j] = costs, cok
        for y in range(h):
            for x in range(w):
                if not lab_valid[y, x] or not ok[:, y, x].all():
                    continue
                curve = rho[:, y, x]
                wgt = confidence_weight(curve, alpha_conf)
                if wgt <= 0.0:
                    continue
                total[:, y, x] += curve * wgt
                count[y, x] += 1
    return total, count


class TestAccumulate:
    def test_empty_frames(self):
        kf, _ = _make_kf()
        with pytest.raises(EmptyFrameList):
            accumulate_cost_volume(kf, [], fixed_band_labels(0.1, 1.0, 4))

    def test_identical_frame_all_zero(self):
        # the frame's cost curve is exactly flat, so its confidence is zero:
        # it contributes neither cost nor observation
        kf, _ = _make_kf()
        vol = accumulate_cost_volume(kf, [(kf.image, kf.pose)],
                                     fixed_band_labels(0.1, 1.0, 4))
        assert np.abs(vol.costs).max() == 0.0
        assert vol.count.max() == 0

    def test_matches_brute_force_oracle(self):
        kf, scene = _make_kf(width=8, height=8)
        frames = []
        for _, pose in scene.trajectory[1:3]:
            img, _ = synth.render_scene(scene, pose)
            frames.append((img, pose))
        labels = fixed_band_labels(0.3, 0.7, 4)
        vol = accumulate_cost_volume(kf, frames, labels)
        want, want_count = brute_force_volume(kf, frames, labels)
        assert np.array_equal(vol.count, want_count)
        assert np.abs(vol.costs - want).max() < 1e-6

    def test_narrow_band_matches_brute_force(self):
        kf, scene = _make_kf(width=8, height=8)
        img, _ = synth.render_scene(scene, scene.trajectory[2][1])
        frames = [(img, scene.trajectory[2][1])]
        labels = narrow_band_labels(kf.inv_depth, 0.05, 4)
        vol = accumulate_cost_volume(kf, frames, labels)
        want, want_count = brute_force_volume(kf, frames, labels)
        assert np.array_equal(vol.count, want_count)
        assert np.abs(vol.costs - want).max() < 1e-6

    def test_additive_over_frame_partitions(self):
        kf, scene = _make_kf(width=16, height=12)
        frames = []
        for _, pose in scene.trajectory[1:5]:
            img, _ = synth.render_scene(scene, pose)
            frames.append((img, pose))
        labels = fixed_band_labels(0.3, 0.7, 4)
        vol_all = accumulate_cost_volume(kf, frames, labels)
        vol_a = accumulate_cost_volume(kf, frames[:2], labels)
        vol_b = accumulate_cost_volume(kf, frames[2:], labels)
        both = (vol_a.count > 0) & (vol_b.count > 0)
        joint_count = vol_a.count + vol_b.count
        assert np.array_equal(vol_all.count[both], joint_count[both])
        diff = np.abs(vol_all.costs - (vol_a.costs + vol_b.costs))
        assert diff[:, both].max() < 1e-9

    def test_argmin_matches_ground_truth_within_one_label(self):
        # translated-camera scene: WTA on the volume recovers true depth
        scene = synth.tilted_plane_scene(
            seed=4, width=32, height=24,
            trajectory=synth.lateral_trajectory(5, 0.03))
        img0, dep0 = synth.render_scene(scene, scene.poses[0])
        kf = Keyframe(img0, dep0, scene.poses[0], scene.intrinsics, id=0)
        frames = []
        for _, pose in scene.trajectory[1:]:
            img, _ = synth.render_scene(scene, pose)
            frames.append((img, pose))
        d_vals = dep0.values[dep0.valid]
        labels = fixed_band_labels(d_vals.min() * 0.8, d_vals.max() * 1.2, 24)
        vol = accumulate_cost_volume(kf, frames, labels)
        idx = np.argmin(vol.costs, axis=0)
        est = labels.labels[idx]
        step = labels.labels[1] - labels.labels[0]
        joint = vol.valid & dep0.valid
        frac = (np.abs(est - dep0.values) <= step + 1e-12)[joint].mean()
        assert frac >= 0.90


def _make_kf(width=16, height=12, seed=2):
    scene = synth.plane_scene(seed=seed, width=width, height=height,
                              trajectory=synth.lateral_trajectory(6, 0.02))
    img, dep = synth.render_scene(scene, scene.poses[0])
    return Keyframe(img, dep, scene.poses[0], scene.intrinsics, id=0), scene


class TestDumpFormat:
    def test_round_trip_fixed(self, tmp_path):
        kf, scene = _make_kf(width=8, height=8)
        img, _ = synth.render_scene(scene, scene.trajectory[1][1])
        vol = accumulate_cost_volume(kf, [(img, scene.trajectory[1][1])],
                                     fixed_band_labels(0.3, 0.7, 4))
        path = tmp_path / "vol.bin"
        save_cost_volume(path, vol)
        back = load_cost_volume(path)
        assert back.costs.shape == vol.costs.shape
        assert np.abs(back.costs - vol.costs).max() < 1e-6
        assert np.array_equal(back.count, vol.count)
        assert np.allclose(back.labels.labels, vol.labels.labels)

    def test_round_trip_narrow(self, tmp_path):
        kf, scene = _make_kf(width=8, height=8)
        img, _ = synth.render_scene(scene, scene.trajectory[1][1])
        labels = narrow_band_labels(kf.inv_depth, 0.05, 4)
        vol = accumulate_cost_volume(kf, [(img, scene.trajectory[1][1])], labels)
        path = tmp_path / "vol.bin"
        save_cost_volume(path, vol)
        back = load_cost_volume(path)
        assert back.labels.kind == "narrow"
        assert np.abs(back.labels.labels - vol.labels.labels).max() < 1e-6
        assert np.array_equal(back.labels.valid, vol.labels.valid)
