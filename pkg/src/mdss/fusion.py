"""Alignment of RGB scores onto the 3D score scale and map fusion."""

from dataclasses import dataclass

import numpy as np


class DegenerateCalibration(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentStats:
    mu_rgb: float
    sigma_rgb: float
    mu_3d: float
    sigma_3d: float

    def __post_init__(self):
        if not (self.sigma_rgb > 0 and self.sigma_3d > 0):
            raise DegenerateCalibration(
                f"alignment needs positive spreads, got sigma_rgb={self.sigma_rgb}, "
                f"sigma_3d={self.sigma_3d}")

    def as_dict(self):
        return {"mu_rgb": self.mu_rgb, "sigma_rgb": self.sigma_rgb,
                "mu_3d": self.mu_3d, "sigma_3d": self.sigma_3d}


def _pooled(maps, masks):
    if len(maps) == 0:
        raise DegenerateCalibration("calibration needs at least one score map")
    if masks is None:
        vals = [np.asarray(m, dtype=np.float64).ravel() for m in maps]
    else:
        vals = [np.asarray(m, dtype=np.float64)[np.asarray(k, dtype=bool)] for m, k in zip(maps, masks)]
    return np.concatenate(vals)


def _mean_std(values, branch):
    if values.size == 0:
        raise DegenerateCalibration(f"no {branch} pixels to calibrate on")
    mu = float(values.mean())
    sigma = float(np.sqrt(np.mean((values - mu) ** 2)))
    if not sigma > 0:
        raise DegenerateCalibration(f"{branch} validation scores have zero variance")
    return mu, sigma


def calibrate(rgb_maps, sdl_maps, masks=None) -> AlignmentStats:
    """Population mean / std of each branch over the pooled (foreground) pixels."""
    mu_rgb, sigma_rgb = _mean_std(_pooled(rgb_maps, masks), "RGB")
    mu_3d, sigma_3d = _mean_std(_pooled(sdl_maps, masks), "3D")
    return AlignmentStats(mu_rgb, sigma_rgb, mu_3d, sigma_3d)


def align_rgb(score_map, stats: AlignmentStats, fg=None) -> np.ndarray:
    """Affine map taking mean +- 3 std of RGB scores onto mean +- 3 std of 3D scores.

    Pixels outside ``fg`` stay 0.
    """
    s = np.asarray(score_map, dtype=np.float64)
    out = stats.mu_3d + (s - stats.mu_rgb) * (stats.sigma_3d / stats.sigma_rgb)
    if fg is not None:
        out = np.where(fg, out, 0.0)
    return out


def fuse_pixel(rgb_aligned, sdl_map) -> np.ndarray:
    a = np.asarray(rgb_aligned, dtype=np.float64)
    b = np.asarray(sdl_map, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse maps of shape {a.shape} and {b.shape}")
    return np.maximum(a, b)


def image_score(rgb_map, sdl_map) -> float:
    """Product of the two branch maxima."""
    return float(np.max(rgb_map)) * float(np.max(sdl_map))
