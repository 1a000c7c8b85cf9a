"""Accuracy metrics, stereo geometry, and the synthetic stereogram
generator used for desk-scale verification.
"""

from dataclasses import dataclass

import numpy as np

from .imaging import DisparityMap

DEFAULT_THRESHOLDS = (2, 3, 4, 5)


@dataclass
class CameraGeometry:
    baseline: float  # meters
    focal_length: float  # pixels

    def __post_init__(self):
        if self.baseline <= 0 or self.focal_length <= 0:
            raise ValueError("baseline and focal length must be positive")


@dataclass
class ErrorReport:
    """Per-threshold share of ground-truth pixels whose estimate is off by
    more than the threshold."""

    thresholds: tuple
    bad_pixels: tuple
    total_pixels: int

    @property
    def error_percent(self):
        return tuple(100.0 * b / self.total_pixels for b in self.bad_pixels)

    def rows(self):
        for t, b, pct in zip(self.thresholds, self.bad_pixels, self.error_percent):
            yield t, pct, b, self.total_pixels

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("threshold,error_percent,bad_pixels,total_pixels\n")
            for t, pct, bad, total in self.rows():
                fh.write(f"{t},{pct:.6f},{bad},{total}\n")

    def __str__(self):
        lines = ["threshold  error%      bad/total"]
        for t, pct, bad, total in self.rows():
            lines.append(f"{t:>9}  {pct:9.4f}  {bad}/{total}")
        return "\n".join(lines)


def n_pixel_error(estimate, gt, thresholds=DEFAULT_THRESHOLDS):
    """n-pixel error over valid-ground-truth pixels.

    Pixels where the estimate itself is invalid count as wrong at every
    threshold (the estimate offers no disparity there).
    """
    if estimate.shape != gt.shape:
        raise ValueError("estimate and ground truth must share a grid")
    scored = gt.valid
    total = int(scored.sum())
    if total == 0:
        raise ValueError("ground truth has no valid pixels to score")
    diff = np.abs(estimate.values - gt.values)
    diff[~estimate.valid] = np.inf
    bad = tuple(int((diff[scored] > t).sum()) for t in thresholds)
    return ErrorReport(tuple(thresholds), bad, total)


def combine_reports(reports):
    """Pool bad/total pixel counts of several reports (same thresholds)."""
    reports = list(reports)
    thresholds = reports[0].thresholds
    for r in reports:
        if r.thresholds != thresholds:
            raise ValueError("reports use different thresholds")
    bad = tuple(sum(r.bad_pixels[i] for r in reports) for i in range(len(thresholds)))
    total = sum(r.total_pixels for r in reports)
    return ErrorReport(thresholds, bad, total)


def disparity_to_depth(d, geom):
    """Depth from disparity: z = B*f/d, defined for d > 0."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth is undefined for disparity <= 0")
    z = geom.baseline * geom.focal_length / d
    return float(z) if z.ndim == 0 else z


def reproject(x_l, y_l, z, geom):
    """Metric scene coordinates from left-image pixel coordinates and depth:
    x = z*x_l/f, y = z*y_l/f."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("reprojection needs positive depth")
    x = z * np.asarray(x_l, dtype=np.float64) / geom.focal_length
    y = z * np.asarray(y_l, dtype=np.float64) / geom.focal_length
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def make_random_dot_stereogram(shape, disparity_field, seed=0):
    """Random-dot stereo pair with exact integer ground truth.

    The right view is uniform 8-bit noise and the left view copies it so
    that I_L(x, y) = I_R(x - d(x, y), y). Right-view pixels claimed by
    several left pixels keep the largest-disparity claimant; the losers'
    ground truth is marked invalid (occlusion).
    """
    field = np.asarray(disparity_field)
    if field.shape != tuple(shape):
        raise ValueError("disparity field must match the requested shape")
    if not np.issubdtype(field.dtype, np.integer):
        raise ValueError("disparity field must be integer-valued")
    if np.any(field < 0):
        raise ValueError("disparities must be non-negative")
    rows, cols = shape
    xs = np.arange(cols)
    if np.any(field > xs):
        raise ValueError("every pixel needs d <= x so its match stays in frame")

    rng = np.random.default_rng(seed)
    right = rng.integers(0, 256, size=(rows, cols), dtype=np.uint8)
    left = right[np.arange(rows)[:, None], xs[None, :] - field]

    valid = np.ones((rows, cols), dtype=bool)
    for y in range(rows):
        best_d = np.full(cols, -1, dtype=np.int64)
        best_x = np.full(cols, -1, dtype=np.int64)
        for x in range(cols):
            d = field[y, x]
            target = x - d
            if d > best_d[target]:
                if best_x[target] >= 0:
                    valid[y, best_x[target]] = False
                best_d[target] = d
                best_x[target] = x
            else:
                valid[y, x] = False
    gt = DisparityMap(field.astype(np.float64), valid)
    return left, right, gt
