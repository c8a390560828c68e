"""EMC over (rotation, cell shift) latents for the lattice reference.

The intensities are sampled only at the reciprocal peaks, so the state
the compress step phases is the per-(class, peak) complex value

    z_{l,i} = F_o(R_l q_i) exp(i (2 pi q_i . t_l - phi_c,i)),

whose real part is fixed by the merged counts (divide projection). The
concur projection splats the implied F_o point samples onto the model
grid, applies support and positivity in real space, and resamples.

The latent grids here are small enough that dense numpy suffices; the
compiled kernels are not involved.
"""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .emc import EmcDiagnostics, _normalize_rows
from .errors import ContractError
from .fftutil import bilinear_sample, centered_ft, centered_ift
from .forward import ComplexModel
from .lattice import LatticeGeometry, cross_terms_from_counts, rotated_peak_positions
from .phasing import SupportMask, shrinkwrap_update, square_support

log = logging.getLogger("holospi")


@dataclass
class LatticeLatents:
    angles: np.ndarray      # (n_rot,)
    cell_uv: np.ndarray     # (n_t, 2) fractional cell coordinates in [0, 1)
    shifts: np.ndarray      # (n_t, 2) px

    @property
    def n_rot(self) -> int:
        return self.angles.size

    @property
    def n_t(self) -> int:
        return self.cell_uv.shape[0]

    @property
    def n_latents(self) -> int:
        return self.n_rot * self.n_t

    def index(self, i_t: int, i_rot: int) -> int:
        # shift-major, rotation fastest, mirroring the single-particle layout
        return i_t * self.n_rot + i_rot


def lattice_latents(geom: LatticeGeometry, n_rot: int, n_cell: int) -> LatticeLatents:
    angles = np.arange(n_rot) * (2.0 * np.pi / n_rot)
    u = np.arange(n_cell) / n_cell
    uu, vv = np.meshgrid(u, u, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    shifts = uv @ geom.basis.T
    return LatticeLatents(angles=angles, cell_uv=uv, shifts=shifts)


class _LatticeWorkspace:
    """Per-run precomputed tables for the lattice engine."""

    def __init__(self, geom: LatticeGeometry, latents: LatticeLatents, size: int):
        self.geom = geom
        self.latents = latents
        self.size = size
        m = geom.n_peaks
        c = (size - 1) / 2.0

        # rotated peak positions (grid units) per latent angle
        self.pos = np.empty((latents.n_rot, m, 2))
        for r, a in enumerate(latents.angles):
            self.pos[r] = rotated_peak_positions(geom, a) * size + c

        # phase factors e^{i psi} = e^{2 pi i q.t} conj(unit(fc)) per (shift, peak)
        unit_fc = np.ones(m, dtype=complex)
        nz = np.abs(geom.fc) > 0
        unit_fc[nz] = geom.fc[nz] / np.abs(geom.fc[nz])
        ramps = np.exp(2j * np.pi * (latents.shifts @ geom.peak_q.T))   # (n_t, m)
        self.e_phase = ramps * np.conj(unit_fc)[None, :]

        # bilinear splat tables per angle: 4 neighbors and weights
        n = size
        r0 = np.clip(np.floor(self.pos[..., 0]).astype(np.int64), 0, n - 2)
        c0 = np.clip(np.floor(self.pos[..., 1]).astype(np.int64), 0, n - 2)
        fr = self.pos[..., 0] - r0
        fc_ = self.pos[..., 1] - c0
        inside = ((self.pos[..., 0] >= 0) & (self.pos[..., 0] <= n - 1)
                  & (self.pos[..., 1] >= 0) & (self.pos[..., 1] <= n - 1))
        if not inside.all():
            raise ContractError("rotated peak positions leave the model grid; "
                                "lower peak_q_max or enlarge the model grid")
        w = np.stack([(1 - fr) * (1 - fc_), (1 - fr) * fc_, fr * (1 - fc_), fr * fc_],
                     axis=-1)                                           # (n_rot, m, 4)
        idx = np.stack([r0 * n + c0, r0 * n + c0 + 1, (r0 + 1) * n + c0,
                        (r0 + 1) * n + c0 + 1], axis=-1)
        self.splat_w = w
        self.splat_idx = idx
        self.base_intens = (geom.probe_n * np.abs(geom.fc)) ** 2


def expand_lattice(model: ComplexModel, geom: LatticeGeometry,
                   latents: LatticeLatents, ws: _LatticeWorkspace | None = None) -> np.ndarray:
    """Integrated peak intensities W[latent][peak], clamped at zero."""
    ws = ws or _LatticeWorkspace(geom, latents, model.size)
    fo = np.empty((latents.n_rot, geom.n_peaks), dtype=complex)
    for r in range(latents.n_rot):
        fo[r] = bilinear_sample(model.values, ws.pos[r, :, 0], ws.pos[r, :, 1])
    cross = 2.0 * geom.probe_n * np.abs(geom.fc)[None, None, :] * (
        fo[None, :, :] * ws.e_phase[:, None, :]).real        # (n_t, n_rot, m)
    w = ws.base_intens[None, None, :] + cross
    return np.maximum(w, 0.0).reshape(latents.n_latents, geom.n_peaks)


def estimate_photons_scale(counts: np.ndarray, geom: LatticeGeometry) -> float:
    """Scale from the N^2 |F_c|^2 baseline; the cross term averages out."""
    base = ((geom.probe_n * np.abs(geom.fc)) ** 2).sum()
    return float(counts.sum() / (counts.shape[0] * base))


@dataclass
class LatticeEmcState:
    model: ComplexModel
    support: SupportMask
    latents: LatticeLatents
    iteration: int = 0
    most_likely: np.ndarray | None = None
    probs: np.ndarray | None = field(default=None, repr=False)
    log_evidence: np.ndarray | None = None


def initial_lattice_state(size: int, real_size: int, geom: LatticeGeometry,
                          latents: LatticeLatents, cfg, seed: int) -> LatticeEmcState:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBEEF)))
    scale = cfg.init_scale * float(np.abs(geom.fc).mean())
    values = scale * (rng.standard_normal((size, size))
                      + 1j * rng.standard_normal((size, size)))
    model = ComplexModel(size=size, values=values, real_size=real_size)
    return LatticeEmcState(model=model, support=square_support(size, cfg.support_init),
                           latents=latents)


class _SplatCache:
    """Flattened splat indices/weights for the used classes of one compress."""

    def __init__(self, ws: _LatticeWorkspace, used: np.ndarray, occ_w: np.ndarray):
        lat = ws.latents
        m = ws.geom.n_peaks
        sel = np.flatnonzero(used)
        i_rot = sel % lat.n_rot
        self.sel = sel
        self.flat_idx = ws.splat_idx[i_rot].ravel()
        self.weights = (ws.splat_w[i_rot] * occ_w[sel, None, None]).reshape(sel.size, m, 4)
        self.den = np.bincount(self.flat_idx, weights=self.weights.ravel(),
                               minlength=ws.size * ws.size)


def _concur_lattice(z: np.ndarray, splat: _SplatCache, ws: _LatticeWorkspace,
                    support: SupportMask):
    """Splat the implied F_o samples onto the grid, project, resample.

    Returns (z_projected, grid_model). Unused classes resample too (their z
    follows the common grid) but contribute no splat weight.
    """
    latents = ws.latents
    n = ws.size
    m = z.shape[1]
    e_conj = np.conj(ws.e_phase)
    f_tgt = (z.reshape(latents.n_t, latents.n_rot, m)
             * e_conj[:, None, :]).reshape(z.shape)
    vals = (f_tgt[splat.sel][..., None] * splat.weights).ravel()
    num = (np.bincount(splat.flat_idx, weights=vals.real, minlength=n * n)
           + 1j * np.bincount(splat.flat_idx, weights=vals.imag, minlength=n * n))
    grid_f = np.zeros(n * n, dtype=complex)
    good = splat.den > 0
    grid_f[good] = num[good] / splat.den[good]
    grid_f = grid_f.reshape(n, n)

    rho = centered_ift(grid_f)
    proj = np.zeros_like(rho)
    proj[support.inside] = np.maximum(rho.real[support.inside], 0.0)
    common = centered_ft(proj)

    fo = np.empty((latents.n_rot, m), dtype=complex)
    for r in range(latents.n_rot):
        fo[r] = bilinear_sample(common, ws.pos[r, :, 0], ws.pos[r, :, 1])
    z_new = (fo[None, :, :] * ws.e_phase[:, None, :]).reshape(z.shape)
    return z_new, common


def lattice_compress(cross: np.ndarray, used: np.ndarray, occ_w: np.ndarray,
                     ws: _LatticeWorkspace, support: SupportMask,
                     prev_model: ComplexModel, dm_iters: int):
    """Divide-and-concur difference map in z space (beta = 1)."""
    latents = ws.latents
    fo0 = np.empty((latents.n_rot, ws.geom.n_peaks), dtype=complex)
    for r in range(latents.n_rot):
        fo0[r] = bilinear_sample(prev_model.values, ws.pos[r, :, 0], ws.pos[r, :, 1])
    z = (fo0[None, :, :] * ws.e_phase[:, None, :]).reshape(latents.n_latents,
                                                           ws.geom.n_peaks)

    splat = _SplatCache(ws, used, occ_w)
    err = 0.0
    for _ in range(dm_iters):
        pc, _ = _concur_lattice(z, splat, ws, support)
        fc = 2.0 * pc - z
        pd_fc = fc
        pd_fc[used] = cross[used] + 1j * fc[used].imag     # divide: pin Re(z)
        diff = pd_fc - pc
        z += diff
        err = float(np.sqrt(np.mean(np.abs(diff[used]) ** 2))) if used.any() else 0.0
    _, common = _concur_lattice(z, splat, ws, support)
    return ComplexModel(size=ws.size, values=common,
                        real_size=prev_model.real_size), err


def emc_iterate_lattice(state: LatticeEmcState, counts: np.ndarray,
                        geom: LatticeGeometry, cfg,
                        workspace: _LatticeWorkspace | None = None,
                        photons_scale: float | None = None,
                        fixed_probs: np.ndarray | None = None):
    """One lattice EMC iteration; returns (state, diagnostics).

    ``fixed_probs`` skips the E-step and uses the given responsibility
    matrix (known-latent cheat mode).
    """
    t0 = time.perf_counter()
    lat = state.latents
    ws = workspace or _LatticeWorkspace(geom, lat, state.model.size)
    scale = photons_scale if photons_scale is not None else estimate_photons_scale(counts, geom)
    n_frames = counts.shape[0]
    if counts.shape[1] != geom.n_peaks:
        raise ContractError("peak count table does not match the geometry")

    w = expand_lattice(state.model, geom, lat, ws)
    if fixed_probs is not None:
        probs = fixed_probs
        log_ev = np.zeros(n_frames)
        best = np.argmax(probs, axis=1)
    else:
        rates = np.maximum(scale * w, cfg.rate_floor)
        ll = counts.astype(np.float64) @ np.log(rates).T
        ll -= rates.sum(axis=1)[None, :]
        probs, log_ev, best = _normalize_rows(ll, None, cfg.resp_floor)

    occ = probs.sum(axis=0)
    eps = cfg.class_occupancy_eps_rel * occ.mean()
    used = occ >= max(eps, 1e-300)
    mean_counts = np.zeros((lat.n_latents, geom.n_peaks))
    sel = np.flatnonzero(used)
    mean_counts[sel] = (probs[:, sel].T @ counts.astype(np.float64)) / occ[sel, None]
    cross = cross_terms_from_counts(mean_counts, scale, geom)

    support = state.support
    if state.iteration > 0 and state.iteration % cfg.shrinkwrap_every == 0:
        density = centered_ift(state.model.values)
        support = shrinkwrap_update(density, cfg.shrinkwrap_sigma,
                                    cfg.support_n_inside, previous=support)
    model, dm_err = lattice_compress(cross, used, occ, ws, support,
                                     state.model, cfg.dm_iters)

    change = 1.0
    if state.most_likely is not None:
        change = float(np.mean(best != state.most_likely))
    diag = EmcDiagnostics(iteration=state.iteration + 1,
                          mean_log_evidence=float(log_ev.mean()),
                          change_fraction=change,
                          wall_time=time.perf_counter() - t0,
                          dm_error=dm_err,
                          n_used_classes=int(used.sum()))
    new_state = LatticeEmcState(model=model, support=support, latents=lat,
                                iteration=state.iteration + 1, most_likely=best,
                                probs=probs, log_evidence=log_ev)
    return new_state, diag
