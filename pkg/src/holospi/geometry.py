"""Detector pixel grid, reciprocal coordinates, masking and ring binning."""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractError

RING_WIDTH = 1.0  # px; 1-px rings are adequate for diameter estimation


@dataclass(frozen=True)
class DetectorGrid:
    """Square, flat detector with a centered annular valid region.

    ``mask`` is True on valid pixels. ``qcoords[..., 0]`` is the row
    (y) frequency and ``qcoords[..., 1]`` the column (x) frequency,
    q = (p - center)/size in cycles per pixel. Immutable after
    construction; safe to share between workers.
    """

    size: int
    center: np.ndarray
    qcoords: np.ndarray
    mask: np.ndarray
    ring_index: np.ndarray
    ring_width: float = RING_WIDTH
    # derived lookups, filled by build_grid
    radius: np.ndarray = field(default=None, repr=False)
    valid_flat: np.ndarray = field(default=None, repr=False)
    valid_pos: np.ndarray = field(default=None, repr=False)

    @property
    def n_pix(self) -> int:
        return self.size * self.size

    @property
    def n_valid(self) -> int:
        return int(self.valid_flat.size)

    @property
    def n_rings(self) -> int:
        return int(self.ring_index.max()) + 1

    def qmag(self) -> np.ndarray:
        return np.hypot(self.qcoords[..., 0], self.qcoords[..., 1])


def build_grid(size: int, r_min: float, r_max: float) -> DetectorGrid:
    """Build the detector grid with an annular mask.

    Pixels with radius < r_min or radius > r_max are masked; this covers
    both the bright innermost region and the detector corners.
    """
    if size < 16:
        raise ConfigError(f"size must be >= 16, got {size}")
    if not 0 <= r_min:
        raise ConfigError(f"r_min must be >= 0, got {r_min}")
    if not r_min < r_max:
        raise ConfigError(f"r_min must be < r_max, got r_min={r_min}, r_max={r_max}")
    if not r_max <= size * np.sqrt(2.0) / 2.0:
        raise ConfigError(f"r_max must be <= size*sqrt(2)/2, got r_max={r_max}")

    center = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    rows, cols = np.indices((size, size), dtype=np.float64)
    dy = rows - center[0]
    dx = cols - center[1]
    radius = np.hypot(dy, dx)

    qcoords = np.stack([dy / size, dx / size], axis=-1)
    mask = (radius >= r_min) & (radius <= r_max)
    ring_index = np.floor(radius / RING_WIDTH).astype(np.int32)

    valid_flat = np.flatnonzero(mask.ravel()).astype(np.int32)
    valid_pos = np.full(size * size, -1, dtype=np.int32)
    valid_pos[valid_flat] = np.arange(valid_flat.size, dtype=np.int32)

    return DetectorGrid(
        size=size,
        center=center,
        qcoords=qcoords,
        mask=mask,
        ring_index=ring_index,
        radius=radius,
        valid_flat=valid_flat,
        valid_pos=valid_pos,
    )


class RingProfile(NamedTuple):
    """Azimuthal profile; rings with no valid pixels have count 0 and NaN mean."""

    mean: np.ndarray
    count: np.ndarray


def azimuthal_average(values: np.ndarray, grid: DetectorGrid) -> RingProfile:
    """Mean of ``values`` over the valid pixels of each 1-px radial ring."""
    flat = np.asarray(values).ravel()
    if flat.size != grid.n_pix:
        raise ContractError(
            f"expected {grid.n_pix} pixel values, got {flat.size}"
        )
    n_rings = grid.n_rings
    rings = grid.ring_index.ravel()[grid.valid_flat]
    count = np.bincount(rings, minlength=n_rings)
    total = np.bincount(rings, weights=flat[grid.valid_flat], minlength=n_rings)
    mean = np.full(n_rings, np.nan)
    present = count > 0
    mean[present] = total[present] / count[present]
    return RingProfile(mean=mean, count=count)
