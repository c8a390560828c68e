"""Single-particle-reference forward model.

A spherical reference of diameter d attached at offset t to the unknown
object gives the composite intensity

    I(q, d, t) = |F_o(q) + F_s(|q|, d) exp(2*pi*i q.t)|^2

with the analytic sphere transform F_s. Frame synthesis rotates the
complex object model in-plane, applies the reference ramp, rescales to the
photon budget and Poisson-samples each valid pixel.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError
from .fftutil import centered_ft
from .geometry import DetectorGrid

BLOB_RADIUS_RANGE = (3.0, 8.0)  # px, test-object disk radii
MIN_DIAMETER = 1.0              # px, truncation of the diameter distribution


@dataclass
class ComplexModel:
    """Complex Fourier amplitudes F_o(q) on the centered detector-size grid."""

    size: int
    values: np.ndarray
    real_size: int

    def __post_init__(self):
        if self.values.shape != (self.size, self.size):
            raise ContractError(
                f"model values shape {self.values.shape} does not match size {self.size}"
            )

    def copy(self) -> "ComplexModel":
        return ComplexModel(self.size, self.values.copy(), self.real_size)


@dataclass(frozen=True)
class SphereParams:
    """Reference sphere: diameter (px), center shift (px), density contrast."""

    diameter: float
    shift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    contrast: float = 11.0

    def __post_init__(self):
        if not self.diameter > 0:
            raise ConfigError(f"diameter must be > 0, got {self.diameter}")
        if not self.contrast >= 0:
            raise ConfigError(f"contrast must be >= 0, got {self.contrast}")
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=np.float64))


@dataclass
class PhotonFrame:
    """Sparse photon counts of one frame, split by multiplicity."""

    one_photon_pixels: np.ndarray
    multi_photon_pixels: np.ndarray  # (n, 2) array of (pixel index, count >= 2)
    total_photons: int


@dataclass
class PhotonDataset:
    """Sparse photon counts for all frames, CSR-style.

    ``indices`` are flat full-grid pixel indices, sorted and unique within
    each frame; ``counts`` are the per-pixel photon counts (>= 1).
    """

    n_pix: int
    indptr: np.ndarray   # int64, n_frames + 1
    indices: np.ndarray  # int32
    counts: np.ndarray   # int32

    @property
    def n_frames(self) -> int:
        return self.indptr.size - 1

    def frame(self, i: int) -> PhotonFrame:
        k0, k1 = self.indptr[i], self.indptr[i + 1]
        idx = self.indices[k0:k1]
        cnt = self.counts[k0:k1]
        multi = cnt >= 2
        return PhotonFrame(
            one_photon_pixels=idx[~multi].copy(),
            multi_photon_pixels=np.stack([idx[multi], cnt[multi]], axis=1),
            total_photons=int(cnt.sum()),
        )

    def frame_totals(self) -> np.ndarray:
        totals = np.zeros(self.n_frames, dtype=np.int64)
        lens = np.diff(self.indptr)
        nonempty = lens > 0
        if self.counts.size:
            totals[nonempty] = np.add.reduceat(
                self.counts.astype(np.int64), self.indptr[:-1][nonempty]
            )
        return totals

    def validate(self, grid: DetectorGrid | None = None) -> None:
        if self.n_pix <= 0 or self.indices.size != self.counts.size:
            raise ContractError("inconsistent photon dataset arrays")
        for f in range(self.n_frames):
            idx = self.indices[self.indptr[f]:self.indptr[f + 1]]
            if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.n_pix):
                raise ContractError(f"frame {f}: pixel indices not sorted/unique/in range")
        if np.any(self.counts < 1):
            raise ContractError("photon counts must be >= 1")
        if grid is not None:
            if grid.n_pix != self.n_pix:
                raise ContractError("dataset pixel count does not match grid")
            if self.indices.size and np.any(grid.valid_pos[self.indices] < 0):
                raise ContractError("photons recorded on masked pixels")


@dataclass
class GroundTruth:
    """Latent parameters used to synthesize each frame."""

    angles: np.ndarray     # radians
    diameters: np.ndarray  # px
    shifts: np.ndarray     # (n, 2) px, lab frame
    contrast: float


def sphere_ft(qmag, params: SphereParams):
    """Analytic sphere transform contrast * (pi d^3/6) * 3(sin s - s cos s)/s^3.

    s = pi * d * |q|; the s -> 0 limit equals contrast times the sphere
    volume. Even in q, computed with a series branch near s = 0.
    """
    s = np.pi * params.diameter * np.asarray(qmag, dtype=np.float64)
    scalar = s.ndim == 0
    s = np.atleast_1d(s)
    out = np.empty_like(s)
    small = np.abs(s) < 1e-3
    ss = s[small]
    out[small] = 1.0 - ss**2 / 10.0 + ss**4 / 280.0
    sb = s[~small]
    out[~small] = 3.0 * (np.sin(sb) - sb * np.cos(sb)) / sb**3
    out *= params.contrast * np.pi * params.diameter**3 / 6.0
    return float(out[0]) if scalar else out


def reference_wave(params: SphereParams, grid: DetectorGrid) -> np.ndarray:
    """F_s(|q|, d) * exp(2*pi*i q.t) on the full pixel grid."""
    fs = sphere_ft(grid.qmag(), params)
    phase = 2.0 * np.pi * (grid.qcoords[..., 0] * params.shift[0]
                           + grid.qcoords[..., 1] * params.shift[1])
    return fs * np.exp(1j * phase)


def composite_intensity(model: ComplexModel, params: SphereParams, grid: DetectorGrid) -> np.ndarray:
    """|F_o + F_s e^{2 pi i q.t}|^2 on valid pixels, zero on masked ones."""
    if model.size != grid.size:
        raise ContractError(f"model size {model.size} != grid size {grid.size}")
    field = model.values + reference_wave(params, grid)
    intens = field.real**2 + field.imag**2
    intens[~grid.mask] = 0.0
    return intens


def snr_map(model: ComplexModel, params: SphereParams, grid: DetectorGrid) -> np.ndarray:
    """Single-shot SNR (I - F_s^2)/sqrt(I); zero where I is zero."""
    intens = composite_intensity(model, params, grid)
    fs2 = sphere_ft(grid.qmag(), params) ** 2
    out = np.zeros_like(intens)
    pos = intens > 0
    out[pos] = (intens[pos] - fs2[pos]) / np.sqrt(intens[pos])
    return out


def rotate_image(image: np.ndarray, angle: float, grid: DetectorGrid | None = None,
                 workers: int = 1) -> np.ndarray:
    """Bilinear in-plane rotation about the grid center; outside samples -> 0."""
    image = np.asarray(image)
    if grid is not None and image.shape != (grid.size, grid.size):
        raise ContractError(f"image shape {image.shape} does not match grid")
    if image.shape[0] != image.shape[1]:
        raise ContractError("rotate_image requires a square image")
    return kernels.rotate_image_raw(image, angle, workers)


def make_test_object(seed: int, n_blobs: int, size: int, real_size: int = 50):
    """Random disk agglomeration clustered at the field center.

    Returns (model, density): the centered transform and the real-space
    density. Deterministic in ``seed``.
    """
    if n_blobs < 1:
        raise ConfigError(f"n_blobs must be >= 1, got {n_blobs}")
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2.0
    rows, cols = np.indices((size, size), dtype=np.float64)
    density = np.zeros((size, size))
    lo, hi = BLOB_RADIUS_RANGE
    for _ in range(n_blobs):
        center = c + rng.normal(0.0, real_size / 6.0, size=2)
        radius = rng.uniform(lo, hi)
        density += ((rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius**2)
    half = real_size / 2.0
    inside = (np.abs(rows - c) <= half) & (np.abs(cols - c) <= half)
    density[~inside] = 0.0
    model = ComplexModel(size=size, values=centered_ft(density), real_size=real_size)
    return model, density


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    """Derived per-frame stream; frame synthesis order never matters."""
    return np.random.default_rng(np.random.SeedSequence((seed, frame_index)))


def _draw_latent(rng, d_mean, d_std, t_std):
    d = rng.normal(d_mean, d_std)
    while d <= MIN_DIAMETER:
        d = rng.normal(d_mean, d_std)
    t = rng.normal(0.0, t_std, size=2)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return angle, d, t


def predicted_intensity(model: ComplexModel, grid: DetectorGrid, angle: float,
                        params: SphereParams, workers: int = 1) -> np.ndarray:
    """Intensity of the object rotated by ``angle`` with the reference added.

    This is the expand-step forward path; simulation uses it too, so the
    two agree exactly at the ground-truth latent.
    """
    frot = kernels.rotate_image_raw(model.values, angle, workers)
    field = frot + reference_wave(params, grid)
    intens = field.real**2 + field.imag**2
    intens[~grid.mask] = 0.0
    return intens


def simulate_dataset(model: ComplexModel, grid: DetectorGrid, n_frames: int,
                     photons_per_frame: float, d_mean: float, d_std: float,
                     t_std: float, contrast: float, seed: int,
                     workers: int = 1):
    """Synthesize a sparse Poisson dataset plus its ground-truth sidecar.

    Per frame: d ~ N(d_mean, d_std) truncated to d > 1 px, t ~ N(0, t_std)^2
    (lab frame), angle ~ U[0, 2 pi); the valid-pixel intensity sum is
    rescaled to exactly ``photons_per_frame`` before sampling.
    """
    if n_frames < 1:
        raise ConfigError(f"n_frames must be >= 1, got {n_frames}")
    if not photons_per_frame > 0:
        raise ConfigError(f"photons_per_frame must be > 0, got {photons_per_frame}")

    valid = grid.valid_flat
    indptr = np.zeros(n_frames + 1, dtype=np.int64)
    idx_parts, cnt_parts = [], []
    angles = np.empty(n_frames)
    diameters = np.empty(n_frames)
    shifts = np.empty((n_frames, 2))

    for f in range(n_frames):
        rng = frame_rng(seed, f)
        angle, d, t = _draw_latent(rng, d_mean, d_std, t_std)
        params = SphereParams(diameter=d, shift=t, contrast=contrast)
        intens = predicted_intensity(model, grid, angle, params, workers)
        rates = intens.ravel()[valid]
        rates = rates * (photons_per_frame / rates.sum())
        counts = rng.poisson(rates)
        hit = counts > 0
        idx_parts.append(valid[hit])
        cnt_parts.append(counts[hit].astype(np.int32))
        indptr[f + 1] = indptr[f] + int(hit.sum())
        angles[f], diameters[f], shifts[f] = angle, d, t

    dataset = PhotonDataset(
        n_pix=grid.n_pix,
        indptr=indptr,
        indices=np.concatenate(idx_parts) if idx_parts else np.empty(0, np.int32),
        counts=np.concatenate(cnt_parts) if cnt_parts else np.empty(0, np.int32),
    )
    truth = GroundTruth(angles=angles, diameters=diameters, shifts=shifts, contrast=contrast)
    return dataset, truth


def powder_image(dataset: PhotonDataset, grid: DetectorGrid) -> np.ndarray:
    """Sum of all frames (virtual powder pattern)."""
    flat = np.zeros(grid.n_pix)
    np.add.at(flat, dataset.indices, dataset.counts.astype(np.float64))
    return flat.reshape(grid.size, grid.size)
