"""Latent-state grids and posterior responsibility tables."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError


@dataclass
class LatentGrid:
    """Discretized (rotation, shift, diameter) states.

    The flat latent index is ((i_d * n_t) + i_t) * n_rot + i_rot: rotation
    fastest, diameter slowest. ``diameter_subsets`` (one row of diameter
    indices per frame, from pre-estimation) restricts the states each frame
    is scored against.
    """

    angles: np.ndarray
    shifts: np.ndarray       # (n_t, 2)
    diameters: np.ndarray
    diameter_subsets: np.ndarray | None = None  # (n_frames, k) int32

    def __post_init__(self):
        a = self.angles
        if a.size < 1 or a[0] != 0.0:
            raise ConfigError("latent angles must start at 0")
        if a.size > 1:
            steps = np.diff(a)
            if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-12):
                raise ConfigError("latent angles must be uniformly increasing")

    @property
    def n_rot(self) -> int:
        return self.angles.size

    @property
    def n_t(self) -> int:
        return self.shifts.shape[0]

    @property
    def n_d(self) -> int:
        return self.diameters.size

    @property
    def n_latents(self) -> int:
        return self.n_d * self.n_t * self.n_rot

    def index(self, i_d: int, i_t: int, i_rot: int) -> int:
        return (i_d * self.n_t + i_t) * self.n_rot + i_rot

    def unravel(self, index):
        index = np.asarray(index)
        i_rot = index % self.n_rot
        rest = index // self.n_rot
        i_t = rest % self.n_t
        i_d = rest // self.n_t
        return i_d, i_t, i_rot


def uniform_angles(n_rot: int) -> np.ndarray:
    return np.arange(n_rot) * (2.0 * np.pi / n_rot)


def shift_grid(extent: float, step: float) -> np.ndarray:
    """Square grid {-extent, ..., +extent}^2, row (y) index slowest."""
    n = int(round(2 * extent / step)) + 1
    axis = -extent + step * np.arange(n)
    sy, sx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([sy.ravel(), sx.ravel()], axis=1)


def diameter_grid(d_min: float, d_max: float, step: float) -> np.ndarray:
    n = int(round((d_max - d_min) / step)) + 1
    return d_min + step * np.arange(n)


def latent_grid_from_config(cfg) -> LatentGrid:
    return LatentGrid(
        angles=uniform_angles(cfg.n_rot),
        shifts=shift_grid(cfg.shift_extent, cfg.shift_step),
        diameters=diameter_grid(cfg.d_min, cfg.d_max, cfg.d_step),
    )


@dataclass
class ResponsibilityTable:
    """Per-frame sparse posterior over latent states.

    ``indices`` are global latent indices; per-frame probabilities sum to 1
    (entries below the sparsity floor are dropped and the rest renormalized).
    ``log_evidence`` is the per-frame log marginal likelihood up to
    photon-factorial constants.
    """

    n_latents: int
    indptr: np.ndarray
    indices: np.ndarray
    probs: np.ndarray
    log_evidence: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.indptr.size - 1

    def frame(self, i: int):
        k0, k1 = self.indptr[i], self.indptr[i + 1]
        return self.indices[k0:k1], self.probs[k0:k1]

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_frames, self.n_latents))
        for f in range(self.n_frames):
            idx, p = self.frame(f)
            out[f, idx] = p
        return out

    def validate(self, tol: float = 1e-9) -> None:
        if np.any(self.probs < 0):
            raise ContractError("negative responsibility")
        sums = np.zeros(self.n_frames)
        for f in range(self.n_frames):
            sums[f] = self.probs[self.indptr[f]:self.indptr[f + 1]].sum()
        if np.any(np.abs(sums - 1.0) > tol):
            raise ContractError(f"responsibility sums deviate from 1 by up to "
                                f"{np.abs(sums - 1.0).max():.3e}")
