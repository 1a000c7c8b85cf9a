import numpy as np
import pytest

from stereomatch.evaluation import (
    CameraGeometry,
    combine_reports,
    disparity_to_depth,
    make_random_dot_stereogram,
    n_pixel_error,
    reproject,
)
from stereomatch.imaging import DisparityMap


def full_map(values):
    values = np.asarray(values, dtype=np.float64)
    return DisparityMap(values, np.ones(values.shape, dtype=bool))


def test_error_zero_for_exact_match():
    gt = full_map(np.arange(12.0).reshape(3, 4))
    report = n_pixel_error(gt, gt)
    assert report.error_percent == (0.0, 0.0, 0.0, 0.0)


def test_error_half_pixels_off_by_ten():
    values = np.zeros((2, 10))
    est = values.copy()
    est[:, :5] = 10.0
    report = n_pixel_error(full_map(est), full_map(values))
    assert report.error_percent == (50.0, 50.0, 50.0, 50.0)
    assert report.total_pixels == 20


def test_error_skips_invalid_gt():
    gt_values = np.zeros((1, 4))
    gt_valid = np.array([[True, False, True, False]])
    est = np.full((1, 4), 100.0)
    report = n_pixel_error(full_map(est), DisparityMap(gt_values, gt_valid))
    assert report.total_pixels == 2
    assert report.error_percent == (100.0, 100.0, 100.0, 100.0)


def test_error_counts_invalid_estimate_as_bad():
    gt = full_map(np.zeros((1, 4)))
    est = DisparityMap(np.zeros((1, 4)), np.array([[True, True, False, True]]))
    report = n_pixel_error(est, gt, thresholds=(2,))
    assert report.bad_pixels == (1,)


def test_error_non_increasing_in_threshold():
    rng = np.random.default_rng(0)
    gt = full_map(rng.uniform(0, 50, size=(30, 30)))
    est = full_map(gt.values + rng.normal(0, 4, size=(30, 30)))
    report = n_pixel_error(est, gt)
    pct = report.error_percent
    assert all(a >= b for a, b in zip(pct, pct[1:]))


def test_error_requires_valid_gt_pixels():
    gt = DisparityMap(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))
    with pytest.raises(ValueError):
        n_pixel_error(full_map(np.zeros((2, 2))), gt)


def test_combine_reports_pools_counts():
    gt = full_map(np.zeros((1, 4)))
    est_good = full_map(np.zeros((1, 4)))
    est_bad = full_map(np.full((1, 4), 50.0))
    combined = combine_reports([
        n_pixel_error(est_good, gt),
        n_pixel_error(est_bad, gt),
    ])
    assert combined.total_pixels == 8
    assert combined.error_percent == (50.0, 50.0, 50.0, 50.0)


def test_report_csv_format(tmp_path):
    gt = full_map(np.zeros((1, 4)))
    report = n_pixel_error(full_map(np.zeros((1, 4))), gt)
    path = tmp_path / "report.csv"
    report.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "threshold,error_percent,bad_pixels,total_pixels"
    assert lines[1].startswith("2,0.000000,0,4")


def test_depth_identity_case():
    assert disparity_to_depth(1.0, CameraGeometry(1.0, 1.0)) == 1.0


def test_depth_arithmetic():
    assert disparity_to_depth(35.0, CameraGeometry(0.5, 700.0)) == pytest.approx(10.0)


def test_depth_rejects_nonpositive():
    with pytest.raises(ValueError):
        disparity_to_depth(0.0, CameraGeometry(1.0, 1.0))


def test_depth_times_disparity_is_bf():
    rng = np.random.default_rng(1)
    geom = CameraGeometry(0.54, 721.0)
    d = rng.uniform(0.5, 100, size=50)
    z = disparity_to_depth(d, geom)
    assert np.allclose(z * d, geom.baseline * geom.focal_length)


def test_reproject_axis_point():
    x, y = reproject(0.0, 12.0, 5.0, CameraGeometry(1.0, 700.0))
    assert x == 0.0


def test_reproject_unit_scale():
    geom = CameraGeometry(1.0, 700.0)
    x, y = reproject(70.0, -35.0, 700.0, geom)
    assert x == pytest.approx(70.0) and y == pytest.approx(-35.0)


def test_reproject_arithmetic():
    x, _ = reproject(70.0, 0.0, 10.0, CameraGeometry(1.0, 700.0))
    assert x == pytest.approx(1.0)


def test_pinhole_reconstruction_round_trip():
    # plant 3-D points, project them through the pinhole pair, reconstruct
    rng = np.random.default_rng(2)
    geom = CameraGeometry(baseline=0.5, focal_length=720.0)
    pts = np.column_stack([
        rng.uniform(-5, 5, 40), rng.uniform(-2, 2, 40), rng.uniform(4, 40, 40)
    ])
    x_l = geom.focal_length * pts[:, 0] / pts[:, 2]
    y_l = geom.focal_length * pts[:, 1] / pts[:, 2]
    disparity = geom.focal_length * geom.baseline / pts[:, 2]
    z = disparity_to_depth(disparity, geom)
    x, y = reproject(x_l, y_l, z, geom)
    rebuilt = np.column_stack([x, y, z])
    assert np.max(np.abs(rebuilt - pts) / np.abs(pts).clip(min=1e-9)) < 1e-9


def test_stereogram_zero_field():
    left, right, gt = make_random_dot_stereogram((8, 10), np.zeros((8, 10), dtype=np.int64))
    assert np.array_equal(left, right)
    assert gt.valid.all()
    assert np.all(gt.values == 0.0)


def test_stereogram_constant_shift():
    field = np.zeros((6, 30), dtype=np.int64)
    field[:, 7:] = 7
    left, right, gt = make_random_dot_stereogram((6, 30), field, seed=3)
    assert np.array_equal(left[:, 7:], right[:, :-7])


def test_stereogram_matching_identity_on_valid():
    rng = np.random.default_rng(4)
    field = rng.integers(0, 4, size=(10, 20)).astype(np.int64)
    field[:, :4] = 0
    left, right, gt = make_random_dot_stereogram((10, 20), field, seed=5)
    ys, xs = np.nonzero(gt.valid)
    d = gt.values[ys, xs].astype(np.int64)
    assert np.array_equal(left[ys, xs], right[ys, xs - d])


def test_stereogram_occlusion_keeps_largest_d():
    # two-plane row: background 0, block at 12; background pixels whose
    # match is claimed by the block lose
    field = np.zeros((1, 60), dtype=np.int64)
    field[0, 30:40] = 12
    left, right, gt = make_random_dot_stereogram((1, 60), field, seed=6)
    assert gt.valid[0, 30:40].all()  # block pixels all valid
    # background pixels x in [18, 28) map onto targets claimed by the block
    claimed = ~gt.valid[0]
    assert claimed[18:28].all()
    assert not claimed[:18].any() and not claimed[40:].any()


def test_stereogram_seeded_determinism():
    field = np.zeros((5, 9), dtype=np.int64)
    a = make_random_dot_stereogram((5, 9), field, seed=7)
    b = make_random_dot_stereogram((5, 9), field, seed=7)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_stereogram_rejects_out_of_frame():
    field = np.full((3, 6), 2, dtype=np.int64)
    with pytest.raises(ValueError):
        make_random_dot_stereogram((3, 6), field)
