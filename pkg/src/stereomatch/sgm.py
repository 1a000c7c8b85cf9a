"""Four-direction semi-global cost aggregation.

Scanline recurrence: each cell adds its raw cost to the cheapest of staying
at the same disparity, stepping one level (penalty P1) or jumping (penalty
P2 over the previous pixel's minimum), minus that minimum so values stay
bounded. Aggregation runs in float64; INVALID (+inf) cells stay invalid and
are skipped by every minimum. Scanlines are independent per direction and
directions are independent of each other.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np


@dataclass
class Penalties:
    p1: float = 30.0
    p2: float = 160.0

    def __post_init__(self):
        if not 0 < self.p1 <= self.p2:
            raise ValueError("penalties must satisfy 0 < P1 <= P2")


class Direction(Enum):
    LEFT_TO_RIGHT = "left_to_right"
    RIGHT_TO_LEFT = "right_to_left"
    TOP_TO_BOTTOM = "top_to_bottom"
    BOTTOM_TO_TOP = "bottom_to_top"


def _scan_forward(volume, p1, p2):
    """Recurrence along axis 1 in ascending order; scanlines start at L=C."""
    out = np.empty_like(volume)
    out[:, 0] = volume[:, 0]
    cols = volume.shape[1]
    for x in range(1, cols):
        prev = out[:, x - 1]
        m = prev.min(axis=1, keepdims=True)
        step = np.full_like(prev, np.inf)
        step[:, 1:] = prev[:, :-1]
        step[:, :-1] = np.minimum(step[:, :-1], prev[:, 1:])
        best = np.minimum(prev, np.minimum(step + p1, m + p2))
        with np.errstate(invalid="ignore"):
            cur = volume[:, x] + best - m
        # a fully invalid previous column restarts the scanline
        restart = ~np.isfinite(m[:, 0])
        if restart.any():
            cur[restart] = volume[:, x][restart]
        out[:, x] = cur
    return out


def aggregate_direction(dsi, direction, penalties):
    """Aggregate the volume along one scan direction."""
    if direction is Direction.LEFT_TO_RIGHT:
        return _scan_forward(dsi, penalties.p1, penalties.p2)
    if direction is Direction.RIGHT_TO_LEFT:
        return _scan_forward(dsi[:, ::-1], penalties.p1, penalties.p2)[:, ::-1]
    if direction is Direction.TOP_TO_BOTTOM:
        swapped = dsi.transpose(1, 0, 2)
        return _scan_forward(swapped, penalties.p1, penalties.p2).transpose(1, 0, 2)
    if direction is Direction.BOTTOM_TO_TOP:
        swapped = dsi[::-1].transpose(1, 0, 2)
        return _scan_forward(swapped, penalties.p1, penalties.p2).transpose(1, 0, 2)[::-1]
    raise ValueError(f"unknown direction {direction!r}")


def aggregate_all(dsi, penalties):
    """Sum of the four directional aggregations."""
    total = np.zeros_like(dsi)
    for direction in Direction:
        total += aggregate_direction(dsi, direction, penalties)
    return total
