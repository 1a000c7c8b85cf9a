"""Disparity selection and cleanup.

Winner-take-all over the cost volume, quadratic subpixel refinement,
left/right consistency checking, two-ray hole filling and edge padding back
to full image resolution. All transforms are pure and per-row independent.
"""

import numpy as np

from .imaging import DisparityMap


def wta(dsi):
    """Per-pixel argmin over disparities; ties break toward smaller d.

    Pixels whose every level is INVALID come back marked invalid.
    """
    finite = np.isfinite(dsi)
    any_finite = finite.any(axis=2)
    values = np.argmin(dsi, axis=2).astype(np.float64)
    values[~any_finite] = 0.0
    return DisparityMap(values, any_finite)


def subpixel_refine(dsi, integer_map):
    """Quadratic fit through the winning cost and its two neighbors.

    The vertex offset (c- - c+) / (2(c- - 2c0 + c+)) is applied only when
    the winner is interior, both neighbors are finite, and the parabola
    opens upward; otherwise the integer disparity is kept.
    """
    rows, cols, levels = dsi.shape
    d = integer_map.values.astype(np.int64)
    valid = integer_map.valid
    interior = valid & (d > 0) & (d < levels - 1)

    dc = np.clip(d, 1, levels - 2)
    yy, xx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    c_minus = dsi[yy, xx, dc - 1]
    c_zero = dsi[yy, xx, dc]
    c_plus = dsi[yy, xx, dc + 1]

    with np.errstate(invalid="ignore"):
        denom = c_minus - 2.0 * c_zero + c_plus
        fire = (interior & np.isfinite(c_minus) & np.isfinite(c_plus)
                & np.isfinite(c_zero) & (denom > 0))
    offset = np.zeros((rows, cols))
    np.divide(c_minus - c_plus, 2.0 * denom, out=offset, where=fire)
    return DisparityMap(integer_map.values + offset, valid.copy())


def consistency_check(d_left, d_right, threshold=1.0):
    """Validity mask: left and right disparities must agree within the
    threshold at the corresponding right-image position."""
    if d_left.shape != d_right.shape:
        raise ValueError("disparity maps must share a grid")
    rows, cols = d_left.shape
    xr = (np.arange(cols) - np.rint(d_left.values)).astype(np.int64)
    in_range = (xr >= 0) & (xr < cols)
    xr_safe = np.clip(xr, 0, cols - 1)
    yy = np.arange(rows)[:, None]
    right_vals = d_right.values[yy, xr_safe]
    right_ok = d_right.valid[yy, xr_safe]
    agree = np.abs(d_left.values - right_vals) <= threshold
    return d_left.valid & in_range & right_ok & agree


def fill_invalid(dmap, mask=None):
    """Fill invalid pixels from their row neighbors (background preference).

    Each invalid pixel takes the smaller of the nearest valid disparity to
    its left and to its right along the row; rows with no valid pixel fall
    back to the nearest filled row in the same column. The result is fully
    valid and the operation is idempotent.
    """
    mask = dmap.valid if mask is None else (np.asarray(mask, dtype=bool) & dmap.valid)
    if not mask.any():
        raise ValueError("cannot fill a fully invalid disparity map")
    rows, cols = dmap.shape
    out = dmap.values.copy()
    row_has_valid = mask.any(axis=1)
    for y in np.nonzero(row_has_valid)[0]:
        row_mask = mask[y]
        if row_mask.all():
            continue
        idx = np.nonzero(row_mask)[0]
        vals = out[y, idx]
        pos = np.arange(cols)
        right_slot = np.searchsorted(idx, pos, side="left")
        left_slot = right_slot - 1
        left_val = np.where(left_slot >= 0, vals[np.clip(left_slot, 0, len(idx) - 1)], np.inf)
        right_val = np.where(right_slot < len(idx), vals[np.clip(right_slot, 0, len(idx) - 1)], np.inf)
        out[y] = np.where(row_mask, out[y], np.minimum(left_val, right_val))
    filled_rows = np.nonzero(row_has_valid)[0]
    for y in np.nonzero(~row_has_valid)[0]:
        nearest = filled_rows[np.argmin(np.abs(filled_rows - y))]
        out[y] = out[nearest]
    return DisparityMap(out, np.ones_like(mask))


def pad_to_full(dmap, full_shape):
    """Replicate edge rows/columns outward until the map reaches full size.

    The interior produced by the network's receptive-field shrinkage is
    centered; an odd margin puts the extra row/column at the bottom/right.
    """
    rows, cols = dmap.shape
    full_rows, full_cols = full_shape
    if rows > full_rows or cols > full_cols:
        raise ValueError("disparity map is larger than the requested full size")
    top = (full_rows - rows) // 2
    bottom = full_rows - rows - top
    left = (full_cols - cols) // 2
    right = full_cols - cols - left
    values = np.pad(dmap.values, ((top, bottom), (left, right)), mode="edge")
    valid = np.pad(dmap.valid, ((top, bottom), (left, right)), mode="edge")
    return DisparityMap(values, valid)
