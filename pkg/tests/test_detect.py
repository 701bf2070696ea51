import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from eventpose.detect import (
    DensityPeakDetector,
    HeatmapFileDetector,
    KeypointSet,
    LossWeights,
    batch_peak_coordinates,
    detect_density_peaks,
    extract_peaks,
    loss_combined,
    loss_coord,
    loss_coord_grad,
    loss_heatmap,
    loss_heatmap_grad,
    loss_structure,
    read_heatmaps,
    slice_patch,
    stitch_patch,
    write_heatmaps,
)
from eventpose.events import TimeSurfacePair


def surfaces_with_density(density):
    density = np.asarray(density, dtype=float)
    zeros = np.zeros(density.shape, dtype=np.int64)
    return TimeSurfacePair(zeros, zeros.copy(), density, window=(0, 1000))


class TestExtractPeaks:
    def test_delta_heatmap(self):
        hm = np.zeros((1, 32, 32))
        hm[0, 20, 10] = 1.0  # keypoint at x=10, y=20
        ks = extract_peaks(hm)
        assert tuple(ks.points[0]) == (10.0, 20.0)
        assert ks.confidence[0] == 1.0
        assert ks.valid[0]

    def test_row_major_tie_break(self):
        hm = np.zeros((1, 10, 10))
        hm[0, 3, 3] = 0.8
        hm[0, 7, 7] = 0.8
        ks = extract_peaks(hm)
        assert tuple(ks.points[0]) == (3.0, 3.0)

    def test_sampled_gaussian_matches_bruteforce(self):
        ys, xs = np.mgrid[0:40, 0:50].astype(float)
        bump = np.exp(-((xs - 31.0) ** 2 + (ys - 17.0) ** 2) / (2 * 2.5**2))
        ks = extract_peaks(bump[None])
        # brute-force argmax oracle
        best = None
        for i in range(40):
            for j in range(50):
                if best is None or bump[i, j] > best[0]:
                    best = (bump[i, j], j, i)
        assert tuple(ks.points[0]) == (best[1], best[2]) == (31.0, 17.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        hm = rng.random((2, 12, 12))
        a = extract_peaks(hm)
        b = extract_peaks(hm * 0.37)
        assert np.array_equal(a.points, b.points)

    def test_zero_channel_invalid(self):
        ks = extract_peaks(np.zeros((2, 8, 8)))
        assert not ks.valid.any()

    def test_floor(self):
        hm = np.zeros((1, 8, 8))
        hm[0, 2, 2] = 0.05
        assert not extract_peaks(hm, floor=0.1).valid[0]
        assert extract_peaks(hm, floor=0.01).valid[0]


class TestSlicePatch:
    def test_corner_zero_padded(self):
        img = np.arange(100, dtype=float).reshape(10, 10) + 1.0
        patch, origin = slice_patch(img, (0, 0), 2)
        assert patch.shape == (5, 5)
        assert origin == (-2, -2)
        assert patch[:2, :].sum() == 0 and patch[:, :2].sum() == 0
        assert patch[2, 2] == img[0, 0]

    def test_interior_exact_copy(self):
        img = np.arange(100, dtype=float).reshape(10, 10)
        patch, origin = slice_patch(img, (5, 4), 3)
        assert origin == (2, 1)
        assert np.array_equal(patch, img[1:8, 2:9])

    def test_constant_image(self):
        img = np.full((12, 12), 3.25)
        patch, _ = slice_patch(img, (6, 6), 2)
        assert np.all(patch == 3.25)

    def test_stitch_inverse(self):
        img = np.arange(64, dtype=float).reshape(8, 8)
        patch, origin = slice_patch(img, (4, 4), 2)
        out = stitch_patch(img, patch * 0 + 9.0, origin)
        assert np.all(out[2:7, 2:7] == 9.0)
        assert out[0, 0] == img[0, 0]


def local_maxima_oracle(density, floor=0.0):
    """Brute-force 3x3 local maxima (zero-padded borders)."""
    h, w = density.shape
    out = []
    for y in range(h):
        for x in range(w):
            v = density[y, x]
            if v <= floor:
                continue
            neigh = density[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2]
            if v >= neigh.max():
                out.append((x, y, v))
    return out


class TestDensityPeaks:
    def gaussian_map(self, centers, shape=(48, 64), sigma=2.0):
        ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
        d = np.zeros(shape)
        for k, (cx, cy) in enumerate(centers):
            d += (1.0 - 0.05 * k) * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
        return d

    def test_separated_bumps_recovered(self):
        centers = [(10.0, 8.0), (40.0, 12.0), (22.0, 30.0), (52.0, 38.0), (33.0, 20.0)]
        d = self.gaussian_map(centers)
        ks = detect_density_peaks(surfaces_with_density(d), 5, min_separation=5.0)
        assert ks.valid.all()
        oracle = local_maxima_oracle(d)
        oracle_pts = {(x, y) for x, y, _ in oracle}
        by_x = ks.points[np.lexsort((ks.points[:, 1], ks.points[:, 0]))]
        for (px, py), (cx, cy) in zip(by_x, np.asarray(sorted(centers))):
            assert abs(px - cx) <= 1.0 and abs(py - cy) <= 1.0
            assert (px, py) in oracle_pts

    def test_all_zero_invalid(self):
        ks = detect_density_peaks(surfaces_with_density(np.zeros((20, 20))), 4, 3.0)
        assert not ks.valid.any()

    def test_close_bumps_suppressed(self):
        d = self.gaussian_map([(20.0, 20.0), (22.0, 20.0), (50.0, 40.0),
                               (10.0, 40.0), (40.0, 8.0)])
        ks = detect_density_peaks(surfaces_with_density(d), 5, min_separation=6.0)
        # the two bumps 2 px apart collapse into one winner
        assert ks.valid.sum() == 4
        kept = ks.points[ks.valid]
        near = np.linalg.norm(kept - np.array([20.0, 20.0]), axis=1) < 3.0
        assert near.sum() == 1

    def test_origin_offset_applied(self):
        d = np.zeros((16, 16))
        d[5, 7] = 2.0
        surf = TimeSurfacePair(
            np.zeros((16, 16), np.int64), np.zeros((16, 16), np.int64), d,
            window=(0, 10), origin=(100, 200),
        )
        ks = detect_density_peaks(surf, 4, 3.0)
        assert tuple(ks.points[0]) == (107.0, 205.0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def mse_loop_oracle(pred, truth):
    total, count = 0.0, 0
    b_n, k_n, h_n, w_n = pred.shape
    for b in range(b_n):
        for k in range(k_n):
            for i in range(h_n):
                for j in range(w_n):
                    total += (pred[b, k, i, j] - truth[b, k, i, j]) ** 2
                    count += 1
    return total / count


def l1_loop_oracle(pred, truth):
    total = 0.0
    b_n, k_n, _ = pred.shape
    for b in range(b_n):
        for k in range(k_n):
            total += abs(pred[b, k, 0] - truth[b, k, 0]) + abs(pred[b, k, 1] - truth[b, k, 1])
    return total / (b_n * k_n)


def structure_loop_oracle(pred, truth):
    b_n, k_n, _ = pred.shape
    total = 0.0
    for b in range(b_n):
        for i in range(k_n):
            for j in range(k_n):
                dp = np.hypot(*(pred[b, i] - pred[b, j]))
                dt = np.hypot(*(truth[b, i] - truth[b, j]))
                total += abs(dp - dt)
    return total / b_n


class TestLosses:
    def test_zero_at_truth(self, rng):
        hm = rng.random((2, 3, 6, 7))
        pts = rng.random((2, 3, 2)) * 10
        assert loss_heatmap(hm, hm) == 0.0
        assert loss_coord(pts, pts) == 0.0
        assert loss_structure(pts, pts) == 0.0

    def test_constant_offset_heatmap(self):
        truth = np.zeros((1, 1, 4, 4))
        assert loss_heatmap(truth + 0.5, truth) == pytest.approx(0.25, abs=1e-15)

    def test_heatmap_matches_loop_oracle(self, rng):
        pred = rng.random((2, 3, 5, 6))
        truth = rng.random((2, 3, 5, 6))
        assert loss_heatmap(pred, truth) == pytest.approx(
            mse_loop_oracle(pred, truth), abs=1e-12)

    def test_coord_single_offset(self):
        truth = np.array([[[5.0, 5.0]]])
        pred = np.array([[[8.0, 9.0]]])
        assert loss_coord(pred, truth) == pytest.approx(7.0, abs=1e-15)

    def test_coord_matches_loop_oracle(self, rng):
        pred = rng.random((3, 4, 2)) * 64
        truth = rng.random((3, 4, 2)) * 64
        assert loss_coord(pred, truth) == pytest.approx(
            l1_loop_oracle(pred, truth), abs=1e-12)

    def test_structure_translation_invariant(self, rng):
        truth = rng.random((2, 5, 2)) * 40
        pred = truth + np.array([13.7, -8.2])
        assert loss_structure(pred, truth) == pytest.approx(0.0, abs=1e-9)

    def test_structure_rotation_invariant(self, rng):
        truth = rng.random((2, 5, 2)) * 40
        ang = 0.7
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        pred = truth @ rot.T + np.array([3.0, 4.0])
        assert loss_structure(pred, truth) == pytest.approx(0.0, abs=1e-9)

    def test_structure_two_point_example(self):
        # distances 5 (truth) vs 8 (pred): two symmetric off-diagonal
        # entries differ by 3 each -> matrix L1 = 6
        truth = np.array([[[0.0, 0.0], [3.0, 4.0]]])
        pred = np.array([[[0.0, 0.0], [8.0, 0.0]]])
        assert loss_structure(pred, truth) == pytest.approx(6.0, abs=1e-12)

    def test_structure_matches_loop_oracle(self, rng):
        pred = rng.random((2, 6, 2)) * 32
        truth = rng.random((2, 6, 2)) * 32
        assert loss_structure(pred, truth) == pytest.approx(
            structure_loop_oracle(pred, truth), abs=1e-12)

    def test_combined_projection_weight(self, rng):
        pred = rng.random((1, 2, 8, 8))
        truth = rng.random((1, 2, 8, 8))
        w = LossWeights(1.0, 0.0, 0.0)
        assert loss_combined(pred, truth, w) == pytest.approx(
            loss_heatmap(pred, truth), abs=1e-15)

    def test_combined_weighted_sum(self, rng):
        ph = rng.random((2, 3, 6, 6))
        th = rng.random((2, 3, 6, 6))
        pp = rng.random((2, 3, 2)) * 20
        tp = rng.random((2, 3, 2)) * 20
        w = LossWeights(0.5, 0.3, 0.2)
        expected = (0.5 * loss_heatmap(ph, th) + 0.3 * loss_coord(pp, tp)
                    + 0.2 * loss_structure(pp, tp))
        assert loss_combined(ph, th, w, pp, tp) == pytest.approx(expected, abs=1e-12)

    def test_combined_defaults_to_peak_coords(self, rng):
        ph = rng.random((1, 2, 9, 9))
        th = rng.random((1, 2, 9, 9))
        w = LossWeights(0.0, 1.0, 0.0)
        pp = batch_peak_coordinates(ph)
        tp = batch_peak_coordinates(th)
        assert loss_combined(ph, th, w) == pytest.approx(loss_coord(pp, tp), abs=1e-14)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            loss_heatmap(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.0, 0.0)


class TestGradientChecks:
    def test_heatmap_grad_finite_difference(self, rng):
        pred = rng.random((2, 2, 4, 5))
        truth = rng.random((2, 2, 4, 5))
        grad = loss_heatmap_grad(pred, truth)
        eps = 1e-6
        for _ in range(20):
            b, k, i, j = (rng.integers(0, s) for s in pred.shape)
            bumped_p = pred.copy()
            bumped_m = pred.copy()
            bumped_p[b, k, i, j] += eps
            bumped_m[b, k, i, j] -= eps
            fd = (loss_heatmap(bumped_p, truth) - loss_heatmap(bumped_m, truth)) / (2 * eps)
            assert fd == pytest.approx(grad[b, k, i, j], rel=1e-4, abs=1e-12)

    def test_coord_grad_finite_difference(self, rng):
        # keep pred away from truth so no L1 tie is hit
        truth = rng.random((2, 3, 2)) * 10
        pred = truth + rng.choice([-1.0, 1.0], size=truth.shape) * (0.5 + rng.random(truth.shape))
        grad = loss_coord_grad(pred, truth)
        eps = 1e-6
        for _ in range(20):
            b, k, c = (rng.integers(0, s) for s in pred.shape)
            bumped_p = pred.copy()
            bumped_m = pred.copy()
            bumped_p[b, k, c] += eps
            bumped_m[b, k, c] -= eps
            fd = (loss_coord(bumped_p, truth) - loss_coord(bumped_m, truth)) / (2 * eps)
            assert fd == pytest.approx(grad[b, k, c], rel=1e-4)


def test_heatmap_file_roundtrip(tmp_path, rng):
    hm = rng.random((3, 12, 17)).astype(np.float32)
    path = tmp_path / "maps.hmp"
    write_heatmaps(path, hm)
    back = read_heatmaps(path)
    assert back.shape == (3, 12, 17)
    assert np.array_equal(back, hm)
    raw = path.read_bytes()
    assert raw[:4] == b"HMP1"
    assert len(raw) == 4 + 6 + 4 * 3 * 12 * 17


def test_heatmap_file_bad_magic(tmp_path):
    path = tmp_path / "bad.hmp"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        read_heatmaps(path)


def test_density_detector_params():
    det = DensityPeakDetector(num_keypoints=6, min_separation=4.0)
    params = det.get_params()
    assert params["num_keypoints"] == 6
    det.set_params(min_separation=9.0)
    assert det.min_separation == 9.0


def test_heatmap_file_detector_bridges_external_model(tmp_path, rng):
    hm = np.zeros((4, 24, 32), dtype=np.float32)
    centers = [(5, 7), (20, 3), (11, 18), (28, 14)]
    for k, (x, y) in enumerate(centers):
        hm[k, y, x] = 0.9
    path = tmp_path / "external.hmp"
    write_heatmaps(path, hm)
    det = HeatmapFileDetector(path)
    ks = det.detect(None)  # surfaces unused
    assert ks.valid.all()
    assert [tuple(p) for p in ks.points] == [(5.0, 7.0), (20.0, 3.0), (11.0, 18.0), (28.0, 14.0)]
