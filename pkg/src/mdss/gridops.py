"""Numeric kernels shared by the RGB and point-cloud branches."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class CosineSchedule:
    """Half-cosine interpolation from ``start_value`` to ``end_value``."""

    start_value: float
    end_value: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")

    def value(self, t):
        return schedule_value(self, t)


def schedule_value(s: CosineSchedule, t) -> float:
    if not 0 <= t <= s.total_steps:
        raise ValueError(f"step {t} outside [0, {s.total_steps}]")
    cos = math.cos(math.pi * t / s.total_steps)
    return s.end_value + 0.5 * (s.start_value - s.end_value) * (1.0 + cos)


def quantile_index(n: int, q: float) -> int:
    """Sorted-order index used by :func:`quantile` (lower convention)."""
    if n < 1:
        raise ValueError("quantile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    return min(int(math.floor(q * (n - 1) + 1e-9)), n - 1)


def quantile(values, q: float) -> float:
    """Lower-interpolation quantile: ``sorted(values)[floor(q * (n - 1))]``."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    k = quantile_index(arr.size, q)
    return float(np.partition(arr, k)[k])


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps with radius ``ceil(4 * sigma)``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(score_map, sigma: float = 4.0) -> np.ndarray:
    """Separable Gaussian blur with half-sample symmetric (reflect) borders."""
    k = gaussian_kernel1d(sigma)
    out = np.asarray(score_map, dtype=np.float64)
    out = ndimage.correlate1d(out, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def _axis_weights(n_in: int, n_out: int):
    # align_corners=False source coordinates, clamped at the low edge
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    w[lo == hi] = 0.0
    return lo, hi, w


def bilinear_resize(score_map, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2D grid (half-pixel centres, align_corners=False).

    Trailing axes beyond the first two are carried along, so ``(H, W, 3)``
    images resize channel-wise.
    """
    a = np.asarray(score_map, dtype=np.float64)
    h, w = a.shape[:2]
    if (h, w) == (out_h, out_w):
        return a.copy()
    r0, r1, wr = _axis_weights(h, out_h)
    c0, c1, wc = _axis_weights(w, out_w)
    extra = (1,) * (a.ndim - 2)
    wr = wr.reshape((-1, 1) + extra)
    wc = wc.reshape((1, -1) + extra)
    top = a[r0][:, c0] * (1 - wc) + a[r0][:, c1] * wc
    bot = a[r1][:, c0] * (1 - wc) + a[r1][:, c1] * wc
    return top * (1 - wr) + bot * wr


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index picked for each output cell by nearest-neighbour resize.

    Uses ``floor(i * n_in / n_out)``, i.e. the top-left sample of each block
    when downscaling by an integer factor.
    """
    return (np.arange(n_out) * n_in) // n_out


def nearest_resize(grid, out_h: int, out_w: int) -> np.ndarray:
    a = np.asarray(grid)
    h, w = a.shape[:2]
    if (h, w) == (out_h, out_w):
        return a.copy()
    return a[nearest_indices(h, out_h)][:, nearest_indices(w, out_w)]
