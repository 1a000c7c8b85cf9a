"""Disparity space image (DSI) construction.

A cost volume is a float64 array laid out (rows, cols, disparities); smaller
cost means a better match. Cells whose right-image correspondence falls
outside the frame hold the INVALID sentinel (+inf), which argmin and the
aggregation minima naturally skip. Volumes built from learned features live
on the valid-convolution interior grid (shrunk by the network's receptive
field); census/SAD volumes live on the window interior grid.
"""

import struct

import numpy as np

from .network import forward_blocks, size_chain

INVALID = np.inf


def build_dsi_learned(left, right, extractor, d_max):
    """Negated feature dot products: Cost(x,y,d) = -<f_L(x,y), f_R(x-d,y)>.

    Feature maps are computed once per image (the network is fully
    convolutional), which is identical to per-patch extraction under
    stride 1 / padding 0.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise ValueError("left and right images must have the same size")
    size_chain(extractor, left.shape[0])
    size_chain(extractor, left.shape[1])
    feat_l, _ = forward_blocks(extractor, left[None, :, :, None], training=False)
    feat_r, _ = forward_blocks(extractor, right[None, :, :, None], training=False)
    feat_l, feat_r = feat_l[0], feat_r[0]
    rows, cols = feat_l.shape[:2]
    dsi = np.full((rows, cols, d_max + 1), INVALID)
    for d in range(d_max + 1):
        if d >= cols:
            break
        sl = feat_l[:, d:]
        sr = feat_r[:, :cols - d]
        dsi[:, d:, d] = -np.einsum("ywc,ywc->yw", sl, sr)
    return dsi


def census_transform(image, window):
    """Boolean census descriptors: neighbor < center over the window.

    Returns an (H - w + 1, W - w + 1, w*w - 1) array on the interior grid.
    """
    if window % 2 != 1 or window < 3:
        raise ValueError("census window must be odd and >= 3")
    image = np.asarray(image)
    rows, cols = image.shape
    if window > rows or window > cols:
        raise ValueError("census window larger than the image")
    r = window // 2
    center = image[r:rows - r, r:cols - r]
    planes = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            neighbor = image[r + dy:rows - r + dy, r + dx:cols - r + dx]
            planes.append(neighbor < center)
    return np.stack(planes, axis=-1)


def build_dsi_census(left, right, window, d_max):
    """Hamming distance of census descriptors per disparity candidate."""
    cl = census_transform(left, window)
    cr = census_transform(right, window)
    rows, cols = cl.shape[:2]
    dsi = np.full((rows, cols, d_max + 1), INVALID)
    for d in range(d_max + 1):
        if d >= cols:
            break
        dsi[:, d:, d] = (cl[:, d:] != cr[:, :cols - d]).sum(axis=2)
    return dsi


def build_dsi_sad(left, right, window, d_max):
    """Sum of absolute intensity differences over the window."""
    if window % 2 != 1 or window < 1:
        raise ValueError("SAD window must be odd and >= 1")
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise ValueError("left and right images must have the same size")
    rows, cols = left.shape
    if window > rows or window > cols:
        raise ValueError("SAD window larger than the image")
    r = window // 2
    irows, icols = rows - 2 * r, cols - 2 * r
    dsi = np.full((irows, icols, d_max + 1), INVALID)
    kernel = np.ones((window, window))
    from numpy.lib.stride_tricks import sliding_window_view

    for d in range(d_max + 1):
        if d >= icols:
            break
        diff = np.abs(left[:, d:] - right[:, :cols - d])
        sums = sliding_window_view(diff, (window, window)).sum(axis=(2, 3))
        dsi[:, d:, d] = sums[:, :icols - d]
    return dsi


def derive_right_dsi(cost_left):
    """Right-view DSI from the left one: Cost_R(x,y,d) = Cost_L(x+d,y,d)."""
    rows, cols, levels = cost_left.shape
    cost_right = np.full_like(cost_left, INVALID)
    for d in range(levels):
        if d >= cols:
            break
        cost_right[:, :cols - d, d] = cost_left[:, d:, d]
    return cost_right


def derive_left_dsi(cost_right):
    """Inverse of derive_right_dsi: Cost_L(x,y,d) = Cost_R(x-d,y,d)."""
    rows, cols, levels = cost_right.shape
    cost_left = np.full_like(cost_right, INVALID)
    for d in range(levels):
        if d >= cols:
            break
        cost_left[:, d:, d] = cost_right[:, :cols - d, d]
    return cost_left


def write_dsi(path, dsi):
    """Dump a volume: u32 header (rows, cols, levels), then row-major f32."""
    rows, cols, levels = dsi.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", rows, cols, levels))
        fh.write(dsi.astype("<f4").tobytes())


def read_dsi(path):
    with open(path, "rb") as fh:
        rows, cols, levels = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != rows * cols * levels:
        raise ValueError("DSI payload does not match its header")
    return data.astype(np.float64).reshape(rows, cols, levels)
