"""2D-crystal reference: reciprocal peaks, integrated Bragg intensities,
and the per-peak phase-constraint reconstruction.

The measurement model per peak q_i for object rotation R and translation t
(modulo the unit cell) is

    I_obs(q_i) = |N F_c(q_i)|^2
               + 2 N |F_o(R q_i)| |F_c(q_i)| cos(phi_o + 2 pi q_i.t - phi_c)

with N the integrated probe weight per peak and F_c the unit-cell
transform (a centered sphere by default, so F_c is known in closed form).
The diffuse |F_o|^2 term is taken as lost in the background.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .fftutil import bilinear_sample
from .forward import ComplexModel, SphereParams, sphere_ft

log = logging.getLogger("holospi")


@dataclass
class LatticeGeometry:
    """Real/reciprocal lattice bases plus the per-peak reference values.

    ``basis`` columns are the real-space lattice vectors (px, (y, x)
    components); the reciprocal basis satisfies A^T B = I (the 2 pi lives
    in the e^{2 pi i} kernel). ``fc`` holds F_c(q_i) per peak.
    """

    basis: np.ndarray        # (2, 2), columns a1, a2
    recip: np.ndarray        # (2, 2), columns b1, b2
    peak_hk: np.ndarray      # (n_peaks, 2) int
    peak_q: np.ndarray       # (n_peaks, 2)
    fc: np.ndarray           # (n_peaks,) complex
    probe_n: float
    cell_diameter: float
    cell_contrast: float

    @property
    def n_peaks(self) -> int:
        return self.peak_hk.shape[0]

    def unit_cell_ft(self, qvec: np.ndarray) -> np.ndarray:
        """Unit-cell transform at arbitrary q (centered sphere model)."""
        qmag = np.hypot(np.asarray(qvec)[..., 0], np.asarray(qvec)[..., 1])
        return sphere_ft(qmag, SphereParams(diameter=self.cell_diameter,
                                            contrast=self.cell_contrast)).astype(complex)

    def cell_shift(self, u: float, v: float) -> np.ndarray:
        """Translation u*a1 + v*a2 for fractional cell coordinates."""
        return self.basis @ np.array([u, v])


def lattice_basis(kind: str, a: float) -> np.ndarray:
    """Real-space basis vectors as columns, (y, x) components."""
    if kind == "square":
        a1 = np.array([0.0, a])
        a2 = np.array([a, 0.0])
    elif kind == "triangular":
        a1 = np.array([0.0, a])
        a2 = np.array([a * np.sqrt(3.0) / 2.0, a / 2.0])
    else:
        raise ConfigError(f"unknown lattice type {kind!r}")
    return np.stack([a1, a2], axis=1)


def reciprocal_basis(basis: np.ndarray) -> np.ndarray:
    det = np.linalg.det(basis)
    if abs(det) <= 1e-9:
        raise ConfigError(f"lattice basis is degenerate (|det| = {abs(det):.3e})")
    return np.linalg.inv(basis.T)


def reciprocal_peaks(basis: np.ndarray, q_max: float):
    """All reciprocal-lattice points 0 < |h b1 + k b2| <= q_max.

    Returns (hk (n, 2) int, q (n, 2)). The list is closed under negation
    and ordered by (|q|, h, k) for determinism.
    """
    recip = reciprocal_basis(basis)
    # smallest singular value bounds |q| >= sigma_min * |(h, k)|
    sigma_min = np.linalg.svd(recip, compute_uv=False)[-1]
    hmax = int(np.ceil(q_max / sigma_min)) + 1
    hh, kk = np.meshgrid(np.arange(-hmax, hmax + 1), np.arange(-hmax, hmax + 1),
                         indexing="ij")
    hk = np.stack([hh.ravel(), kk.ravel()], axis=1)
    q = hk @ recip.T
    mag = np.hypot(q[:, 0], q[:, 1])
    keep = (mag > 0) & (mag <= q_max)
    hk, q, mag = hk[keep], q[keep], mag[keep]
    order = np.lexsort((hk[:, 1], hk[:, 0], mag))
    return hk[order].astype(np.int64), q[order]


def build_lattice_geometry(kind: str, a: float, cell_diameter: float,
                           cell_contrast: float, probe_n: float,
                           q_max: float) -> LatticeGeometry:
    basis = lattice_basis(kind, a)
    recip = reciprocal_basis(basis)
    hk, q = reciprocal_peaks(basis, q_max)
    qmag = np.hypot(q[:, 0], q[:, 1])
    fc = sphere_ft(qmag, SphereParams(diameter=cell_diameter,
                                      contrast=cell_contrast)).astype(complex)
    return LatticeGeometry(basis=basis, recip=recip, peak_hk=hk, peak_q=q, fc=fc,
                           probe_n=probe_n, cell_diameter=cell_diameter,
                           cell_contrast=cell_contrast)


def sample_model_at(model: ComplexModel, positions_q: np.ndarray) -> np.ndarray:
    """Bilinear sample of F_o at arbitrary q positions (cycles/px)."""
    c = (model.size - 1) / 2.0
    rows = positions_q[..., 0] * model.size + c
    cols = positions_q[..., 1] * model.size + c
    return bilinear_sample(model.values, rows, cols)


def rotated_peak_positions(geom: LatticeGeometry, angle: float) -> np.ndarray:
    """Peak positions rotated into the object frame, rot(q_i, -angle)."""
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    qy, qx = geom.peak_q[:, 0], geom.peak_q[:, 1]
    return np.stack([cos_t * qy + sin_t * qx, -sin_t * qy + cos_t * qx], axis=-1)


def integrated_peak_intensities(model: ComplexModel, geom: LatticeGeometry,
                                angle: float, t: np.ndarray) -> np.ndarray:
    """Integrated Bragg counts model per peak; negative values clamp to 0."""
    fo = sample_model_at(model, rotated_peak_positions(geom, angle))
    ramp = np.exp(2j * np.pi * (geom.peak_q[:, 0] * t[0] + geom.peak_q[:, 1] * t[1]))
    n = geom.probe_n
    vals = (n * np.abs(geom.fc)) ** 2 + 2.0 * n * (fo * np.conj(geom.fc) * ramp).real
    n_clamped = int((vals < 0).sum())
    if n_clamped:
        log.debug("integrated_peak_intensities: clamped %d negative peaks", n_clamped)
    return np.maximum(vals, 0.0)


@dataclass
class PeakMeasurement:
    """Integrated counts of one frame plus its latent parameters (if known)."""

    counts: np.ndarray
    angle: float | None = None
    shift: np.ndarray | None = None


def simulate_lattice_dataset(model: ComplexModel, geom: LatticeGeometry,
                             n_frames: int, photons_scale: float, seed: int):
    """Poisson peak counts for uniformly distributed (angle, cell shift).

    Returns (counts (n_frames, n_peaks) int64, angles, shifts). Expected
    counts are photons_scale times the integrated intensities.
    """
    if not photons_scale >= 0:
        raise ConfigError(f"photons_scale must be >= 0, got {photons_scale}")
    counts = np.empty((n_frames, geom.n_peaks), dtype=np.int64)
    angles = np.empty(n_frames)
    shifts = np.empty((n_frames, 2))
    for f in range(n_frames):
        rng = np.random.default_rng(np.random.SeedSequence((seed, f)))
        angle = rng.uniform(0.0, 2.0 * np.pi)
        u, v = rng.uniform(0.0, 1.0, size=2)
        t = geom.cell_shift(u, v)
        rates = photons_scale * integrated_peak_intensities(model, geom, angle, t)
        counts[f] = rng.poisson(rates)
        angles[f] = angle
        shifts[f] = t
    return counts, angles, shifts


def peak_constraint_projection(z, measured_cross):
    """Closest point with the prescribed real part: Re(z) := measured_cross."""
    z = np.asarray(z, dtype=complex)
    return measured_cross + 1j * z.imag


def cross_terms_from_counts(mean_counts: np.ndarray, photons_scale: float,
                            geom: LatticeGeometry) -> np.ndarray:
    """Recovered |F_o| cos(...) per peak from (averaged) integrated counts."""
    n = geom.probe_n
    fc_mag = np.abs(geom.fc)
    return (mean_counts / photons_scale - (n * fc_mag) ** 2) / (2.0 * n * np.maximum(fc_mag, 1e-300))
