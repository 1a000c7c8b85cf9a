"""Image and disparity-map I/O.

PNG reading/writing, the KITTI uint16 disparity codec and input
normalization. Images are plain 2-D numpy arrays; disparity maps carry a
per-pixel validity mask. All functions are pure and safe to call
concurrently.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image

# KITTI convention: raw = round(256 * disparity); a raw value of 0 marks an
# invalid pixel, so the largest encodable disparity is 65535/256.
DISPARITY_SCALE = 256.0
MAX_ENCODABLE_DISPARITY = 65535 / DISPARITY_SCALE

# ITU-R BT.601 luminance weights for RGB input.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class DisparityMap:
    """Per-pixel real disparity (pixels) plus a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("disparity values and validity mask differ in shape")

    @property
    def shape(self):
        return self.values.shape

    def copy(self):
        return DisparityMap(self.values.copy(), self.valid.copy())


def decode_kitti_disparity(raw):
    """Decode a uint16 disparity plane: disparity = raw/256, raw 0 = invalid."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError("expected a single-channel plane")
    values = raw.astype(np.float64) / DISPARITY_SCALE
    valid = raw != 0
    values[~valid] = 0.0
    return DisparityMap(values, valid)


def encode_kitti_disparity(dmap):
    """Encode a DisparityMap to the uint16 plane (round(256*d), invalid -> 0).

    Valid disparities below 1/512 px would round to the invalid sentinel 0;
    they are clamped to raw 1 so validity survives a round trip.
    """
    values, valid = dmap.values, dmap.valid
    raw = np.rint(values * DISPARITY_SCALE)
    if np.any(valid & ((values < 0) | (raw > 65535))):
        raise ValueError(
            "valid disparities must lie in [0, %g] to be encodable" % MAX_ENCODABLE_DISPARITY
        )
    raw = np.clip(raw, 1, 65535).astype(np.uint16)
    raw[~valid] = 0
    return raw


def normalize(plane):
    """Map 8-bit intensities to [0, 1] by dividing by 255."""
    return np.asarray(plane, dtype=np.float64) / 255.0


def rgb_to_luminance(rgb):
    """Collapse an (H, W, 3) RGB image to a luminance plane (BT.601 weights)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ValueError("expected an (H, W, 3) array")
    return rgb[:, :, :3] @ _LUMA_WEIGHTS


def read_image_png(path):
    """Read a PNG as an 8-bit grayscale plane (RGB collapsed via BT.601)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = np.rint(rgb_to_luminance(arr))
    return np.clip(arr, 0, 255).astype(np.uint8)


def write_image_png(path, plane):
    """Write an 8-bit grayscale plane to PNG."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ValueError("expected a single-channel plane")
    Image.fromarray(plane.astype(np.uint8), mode="L").save(path)


def load_image(path):
    """Read a PNG and normalize it to [0, 1]."""
    return normalize(read_image_png(path))


def read_disparity_png(path):
    """Read a KITTI-convention 16-bit disparity PNG and decode it."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError("expected a single-channel 16-bit plane")
    return decode_kitti_disparity(arr.astype(np.uint16))


def write_disparity_png(path, dmap):
    """Encode a DisparityMap and write it as a 16-bit grayscale PNG."""
    raw = encode_kitti_disparity(dmap)
    Image.fromarray(raw).save(path)
