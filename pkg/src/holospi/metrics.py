"""Validation metrics: Fourier ring correlation, rigid alignment,
latent-convergence tracking."""

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError
from .geometry import DetectorGrid

log = logging.getLogger("holospi")


@dataclass
class FrcCurve:
    """Ring radius -> correlation, plus the first 0.5 down-crossing radius.

    ``values`` is NaN on rings where either input has no power; ``crossing``
    is None when the curve never drops below 0.5 on present rings.
    """

    radii: np.ndarray
    values: np.ndarray
    crossing: float | None


def frc(model_a: np.ndarray, model_b: np.ndarray, grid: DetectorGrid) -> FrcCurve:
    """FRC(r) = Re(sum_r F_a F_b*) / sqrt(sum_r |F_a|^2 sum_r |F_b|^2)."""
    a = np.asarray(model_a)
    b = np.asarray(model_b)
    if a.shape != b.shape or a.shape != (grid.size, grid.size):
        raise ContractError(f"frc shapes {a.shape} vs {b.shape} do not match the grid")
    rings = grid.ring_index.ravel()
    n_rings = grid.n_rings
    cross = np.bincount(rings, weights=(a * np.conj(b)).real.ravel(), minlength=n_rings)
    pow_a = np.bincount(rings, weights=(np.abs(a) ** 2).ravel(), minlength=n_rings)
    pow_b = np.bincount(rings, weights=(np.abs(b) ** 2).ravel(), minlength=n_rings)
    values = np.full(n_rings, np.nan)
    ok = (pow_a > 0) & (pow_b > 0)
    values[ok] = cross[ok] / np.sqrt(pow_a[ok] * pow_b[ok])
    radii = np.arange(n_rings, dtype=np.float64) * grid.ring_width

    crossing = None
    prev_r, prev_v = None, None
    for r, v in zip(radii, values):
        if not np.isfinite(v):
            continue
        if v < 0.5:
            if prev_v is None:
                crossing = float(r)
            else:
                frac = (prev_v - 0.5) / (prev_v - v)
                crossing = float(prev_r + frac * (r - prev_r))
            break
        prev_r, prev_v = r, v
    return FrcCurve(radii=radii, values=values, crossing=crossing)


def align(recon_density: np.ndarray, truth_density: np.ndarray,
          angle_step_deg: float = 0.5, max_shift: int = 3, workers: int = 1):
    """Exhaustive rigid alignment maximizing real-space cross-correlation.

    Searches rotations in ``angle_step_deg`` steps over the full circle and
    integer translations within +-max_shift px. Returns (angle, shift,
    aligned_density).
    """
    rec = np.asarray(recon_density, dtype=np.float64)
    tru = np.asarray(truth_density, dtype=np.float64)
    if rec.shape != tru.shape:
        raise ContractError("align inputs must share a shape")
    if not rec.any() or not tru.any():
        log.warning("align: flat input, returning the identity transform")
        return 0.0, np.zeros(2, dtype=np.int64), rec.copy()

    angles = np.deg2rad(np.arange(0.0, 360.0, angle_step_deg))
    shifts = range(-max_shift, max_shift + 1)
    best = (-np.inf, 0.0, (0, 0))
    for ang in angles:
        rot = kernels.rotate_image_raw(rec, ang, workers)
        for dy in shifts:
            ry = np.roll(rot, dy, axis=0)
            for dx in shifts:
                score = float(np.dot(np.roll(ry, dx, axis=1).ravel(), tru.ravel()))
                if score > best[0]:
                    best = (score, ang, (dy, dx))
    _, ang, (dy, dx) = best
    aligned = np.roll(np.roll(kernels.rotate_image_raw(rec, ang, workers), dy, axis=0),
                      dx, axis=1)
    return float(ang), np.array([dy, dx], dtype=np.int64), aligned


def convergence_fraction(most_likely: np.ndarray, previous: np.ndarray) -> float:
    """Fraction of frames whose most-likely latent index changed."""
    a = np.asarray(most_likely)
    b = np.asarray(previous)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch {a.shape} vs {b.shape}")
    return float(np.mean(a != b))
