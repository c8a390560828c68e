"""Modified EMC loop: expand, maximize, compress.

Latent states are (rotation, shift, diameter) triples. Because every
simulated frame carries the same photon budget, predicted intensities are
normalized to that budget before the Poisson likelihood; this reproduces
the generating rates exactly at the true latent and model.

The engine streams (diameter, shift) blocks of 'n_rot' latent states
through the compiled kernels: pass A accumulates per-frame log
likelihoods, pass B merges responsibility-weighted photons into per-class
tomograms by back-rotation. Per-output accumulation orders are fixed, so
responsibilities and tomograms are bitwise independent of the worker
count.
"""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError
from .forward import ComplexModel, PhotonDataset, SphereParams, sphere_ft
from .geometry import DetectorGrid
from .latent import LatentGrid, ResponsibilityTable
from .phasing import SupportMask, run_compress, square_support

log = logging.getLogger("holospi")


# --------------------------------------------------------------- expand

def _ramp(grid: DetectorGrid, shift) -> np.ndarray:
    phase = 2.0 * np.pi * (grid.qcoords[..., 0] * shift[0]
                           + grid.qcoords[..., 1] * shift[1])
    return np.exp(1j * phase)


def expand(model: ComplexModel, grid: DetectorGrid, latents: LatentGrid,
           contrast: float, workers: int = 1) -> np.ndarray:
    """Predicted intensities W[latent][pixel] on the full flat grid.

    Materializes the whole table; meant for small instances and tests. The
    iteration engine streams the same arithmetic blockwise instead.
    """
    if not np.all(np.isfinite(model.values)):
        raise ContractError("model must be finite")
    if latents.n_latents == 0:
        raise ContractError("latent grid is empty")
    n_pix = grid.n_pix
    w = np.empty((latents.n_latents, n_pix))
    frot = [kernels.rotate_image_raw(model.values, a, workers) for a in latents.angles]
    qmag = grid.qmag()
    invalid = ~grid.mask
    for i_d, d in enumerate(latents.diameters):
        fs = sphere_ft(qmag, SphereParams(diameter=float(d), contrast=contrast))
        for i_t, t in enumerate(latents.shifts):
            ref = fs * _ramp(grid, t)
            for i_r in range(latents.n_rot):
                fld = frot[i_r] + ref
                intens = fld.real**2 + fld.imag**2
                intens[invalid] = 0.0
                w[latents.index(i_d, i_t, i_r)] = intens.ravel()
    return w


def expand_from_tomograms(tomograms, grid: DetectorGrid, latents: LatentGrid,
                          workers: int = 1) -> np.ndarray:
    """Expand step of the intensity-model mode: rotate each class's tomogram."""
    n_pix = grid.n_pix
    w = np.empty((latents.n_latents, n_pix))
    invalid = ~grid.mask
    for i_d in range(latents.n_d):
        for i_t in range(latents.n_t):
            timg = tomograms.intens[i_d * latents.n_t + i_t]
            for i_r, a in enumerate(latents.angles):
                img = kernels.rotate_image_raw(timg, a, workers)
                img[invalid] = 0.0
                w[latents.index(i_d, i_t, i_r)] = img.ravel()
    return w


# ----------------------------------------------------------- likelihood

def frame_log_likelihood(frame, w, fluence: float = 1.0,
                         rate_floor: float = 1e-20) -> float:
    """Poisson log likelihood sum_i (K_i ln(phi W_i) - phi W_i), floored.

    ``frame`` is a PhotonFrame; ``w`` the per-pixel rates (flat or square).
    Factorial constants are dropped. Pixels with W = 0 are floored at
    ``rate_floor`` so the result stays finite.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    idx = frame.one_photon_pixels
    total = -fluence * w.sum()
    total += np.log(np.maximum(fluence * w[idx], rate_floor * fluence)).sum()
    if frame.multi_photon_pixels.size:
        midx = frame.multi_photon_pixels[:, 0]
        mcnt = frame.multi_photon_pixels[:, 1]
        total += (mcnt * np.log(np.maximum(fluence * w[midx], rate_floor * fluence))).sum()
    return float(total)


def _loglik_matrix(dataset: PhotonDataset, w: np.ndarray, phi: np.ndarray,
                   rate_floor: float) -> np.ndarray:
    """Dense (n_frames, n_latents) log-likelihood table (small instances)."""
    n_frames = dataset.n_frames
    lnw = np.log(np.maximum(w, rate_floor))
    wsum = w.sum(axis=1)
    ktot = dataset.frame_totals().astype(np.float64)
    ll = np.empty((n_frames, w.shape[0]))
    for f in range(n_frames):
        k0, k1 = dataset.indptr[f], dataset.indptr[f + 1]
        idx = dataset.indices[k0:k1]
        cnt = dataset.counts[k0:k1].astype(np.float64)
        ll[f] = (lnw[:, idx] * cnt).sum(axis=1)
        ll[f] += ktot[f] * np.log(phi[f]) - phi[f] * wsum
    return ll


def _normalize_rows(ll: np.ndarray, lnprior: np.ndarray | None, resp_floor: float):
    """Softmax rows of ll (in place) with floor truncation and renormalization.

    Returns (probs, log_evidence, argmax). The per-row reduction order is
    fixed, so results are independent of any worker count.
    """
    if lnprior is not None:
        ll += lnprior
    best = np.argmax(ll, axis=1)
    mx = ll[np.arange(ll.shape[0]), best]
    bad = ~np.isfinite(mx)
    if bad.any():
        log.warning("%d frames with no probability mass anywhere; "
                    "using uniform responsibilities", int(bad.sum()))
        ll[bad] = 0.0
        mx[bad] = 0.0
    np.exp(ll - mx[:, None], out=ll)
    sums = ll.sum(axis=1)
    log_evidence = mx + np.log(sums)
    ll /= sums[:, None]
    ll[ll < resp_floor] = 0.0
    ll /= ll.sum(axis=1)[:, None]
    return ll, log_evidence, best


def maximize(dataset: PhotonDataset, w: np.ndarray, latents: LatentGrid,
             priors: np.ndarray | None = None, fluence_mode: str = "fixed-1",
             rate_floor: float = 1e-20, resp_floor: float = 1e-10):
    """Expectation-maximization step over materialized views.

    Returns (ResponsibilityTable, updated views W', fluences). W'_j(i) =
    sum_d P_dj K_di / sum_d P_dj phi_d. Small-instance path; the iteration
    engine fuses the same update with the tomogram merge.
    """
    if dataset.n_frames == 0 or dataset.counts.size == 0:
        raise ContractError("maximize needs at least one non-empty frame")
    n_frames = dataset.n_frames
    phi = np.ones(n_frames)
    lnprior = None if priors is None else np.log(np.maximum(priors, 1e-300))

    ll = _loglik_matrix(dataset, w, phi, rate_floor)
    probs, log_ev, _ = _normalize_rows(ll, lnprior, resp_floor)

    if fluence_mode == "per-frame-ML":
        ktot = dataset.frame_totals().astype(np.float64)
        wsum = w.sum(axis=1)
        phi = ktot / (probs @ wsum)
        ll = _loglik_matrix(dataset, w, phi, rate_floor)
        probs, log_ev, _ = _normalize_rows(ll, lnprior, resp_floor)
    elif fluence_mode != "fixed-1":
        raise ContractError(f"unknown fluence_mode {fluence_mode!r}")

    # updated views
    numer = np.zeros_like(w)
    for f in range(n_frames):
        k0, k1 = dataset.indptr[f], dataset.indptr[f + 1]
        idx = dataset.indices[k0:k1]
        cnt = dataset.counts[k0:k1].astype(np.float64)
        active = probs[f] > 0
        numer[np.ix_(active, idx)] += probs[f, active, None] * cnt[None, :]
    denom = probs.T @ phi
    views = numer / np.maximum(denom, 1e-300)[:, None]

    indptr = np.zeros(n_frames + 1, dtype=np.int64)
    idx_parts, p_parts = [], []
    for f in range(n_frames):
        nz = np.flatnonzero(probs[f])
        idx_parts.append(nz.astype(np.int64))
        p_parts.append(probs[f, nz])
        indptr[f + 1] = indptr[f] + nz.size
    table = ResponsibilityTable(
        n_latents=latents.n_latents, indptr=indptr,
        indices=np.concatenate(idx_parts), probs=np.concatenate(p_parts),
        log_evidence=log_ev)
    return table, views, phi


# ------------------------------------------------------------ tomograms

@dataclass
class TomogramSet:
    """Per-(diameter, shift) class merged detector intensities.

    ``intens`` is the coverage-weighted mean photon image of each class
    (photon scale unless rescaled by the engine); ``weight`` the coverage;
    classes with occupancy below the epsilon are flagged unused.
    """

    intens: np.ndarray     # (n_class, N, N)
    weight: np.ndarray     # (n_class, N, N)
    occupancy: np.ndarray  # (n_class,)
    class_d: np.ndarray
    class_t: np.ndarray
    used: np.ndarray       # (n_class,) bool
    contrast: float = 0.0


def _rotation_weight_maps(grid: DetectorGrid, angles: np.ndarray, workers: int) -> np.ndarray:
    valid = grid.mask.astype(np.float64)
    out = np.empty((angles.size, grid.size, grid.size))
    for r, a in enumerate(angles):
        out[r] = kernels.rotate_image_raw(valid, -a, workers)
    return out


def compress_merge(resp: ResponsibilityTable, dataset: PhotonDataset,
                   latents: LatentGrid, grid: DetectorGrid,
                   phi: np.ndarray | None = None, occupancy_eps_rel: float = 1e-3,
                   contrast: float = 0.0, workers: int = 1) -> TomogramSet:
    """Merge photons into per-(d, t) tomograms by back-rotation.

    Numerators accumulate frames in frame-major order per latent, then
    rotations in grid order, so the result is bitwise reproducible and
    worker-count independent.
    """
    n = grid.size
    n_class = latents.n_d * latents.n_t
    if phi is None:
        phi = np.ones(dataset.n_frames)
    probs = resp.dense()
    wmaps = _rotation_weight_maps(grid, latents.angles, workers)

    intens = np.zeros((n_class, n, n))
    weight = np.zeros((n_class, n, n))
    occupancy = np.zeros(n_class)
    valid_full = grid.mask.ravel()
    for i_d in range(latents.n_d):
        for i_t in range(latents.n_t):
            c = i_d * latents.n_t + i_t
            j0 = latents.index(i_d, i_t, 0)
            pblock = probs[:, j0:j0 + latents.n_rot]       # (n_frames, n_rot)
            v = np.zeros((latents.n_rot, grid.n_pix))
            for f in range(dataset.n_frames):
                k0, k1 = dataset.indptr[f], dataset.indptr[f + 1]
                active = pblock[f] > 0
                if active.any():
                    v[np.ix_(active, dataset.indices[k0:k1])] += (
                        pblock[f, active, None]
                        * dataset.counts[k0:k1].astype(np.float64)[None, :])
            v[:, ~valid_full] = 0.0
            numer = np.zeros((n, n))
            kernels.backrot_accum(v.reshape(latents.n_rot, n, n), latents.angles,
                                  numer, workers)
            omega_phi = pblock.T @ phi
            denom = np.einsum("r,rij->ij", omega_phi, wmaps)
            good = denom > 0
            intens[c][good] = numer[good] / denom[good]
            weight[c] = denom
            occupancy[c] = pblock.sum()

    eps = occupancy_eps_rel * occupancy.mean()
    used = occupancy >= max(eps, 1e-300)
    class_d = np.repeat(latents.diameters, latents.n_t)
    class_t = np.tile(latents.shifts, (latents.n_d, 1))
    return TomogramSet(intens=intens, weight=weight, occupancy=occupancy,
                       class_d=class_d, class_t=class_t, used=used,
                       contrast=contrast)


# ----------------------------------------------------- diameter estimate

class DiameterTables:
    """Per-ring sphere-only intensity sums over a diameter scan."""

    def __init__(self, grid: DetectorGrid, d_values: np.ndarray, contrast: float):
        self.d_values = np.asarray(d_values, dtype=np.float64)
        qmag_valid = grid.qmag().ravel()[grid.valid_flat]
        rings = grid.ring_index.ravel()[grid.valid_flat]
        self.n_rings = grid.n_rings
        self.ring_of_pixel = rings
        self.s = np.empty((self.d_values.size, self.n_rings))
        for i, d in enumerate(self.d_values):
            fs2 = sphere_ft(qmag_valid, SphereParams(diameter=float(d),
                                                     contrast=max(contrast, 1e-12))) ** 2
            self.s[i] = np.bincount(rings, weights=fs2, minlength=self.n_rings)
        self.log_rates = np.log(np.maximum(self.s / self.s.sum(axis=1, keepdims=True),
                                           1e-300))


def _ring_counts(frame_idx, frame_cnt, grid: DetectorGrid) -> np.ndarray:
    rings = grid.ring_index.ravel()[frame_idx]
    return np.bincount(rings, weights=frame_cnt, minlength=grid.n_rings)


def _ring_loglik(kr: np.ndarray, tables: DiameterTables) -> np.ndarray:
    # Poisson over rings with rates ktot * s_r / sum(s): the -ktot term is
    # diameter-independent and dropped.
    return tables.log_rates @ kr


def estimate_diameter(frame, grid: DetectorGrid, d_range, contrast: float,
                      scan_step: float = 0.1, min_photons: int = 100):
    """Best sphere diameter from the azimuthal photon profile.

    Scans d_range in ``scan_step`` increments maximizing the Poisson
    likelihood of ring-summed counts against the sphere-only ring profile;
    the object contribution is neglected. Frames with fewer than
    ``min_photons`` photons return the full range with zero confidence.
    """
    lo, hi = d_range
    d_values = np.arange(lo, hi + scan_step / 2, scan_step)
    tables = DiameterTables(grid, d_values, contrast)
    idx = np.concatenate([frame.one_photon_pixels,
                          frame.multi_photon_pixels[:, 0]]).astype(np.int64)
    cnt = np.concatenate([np.ones(frame.one_photon_pixels.size),
                          frame.multi_photon_pixels[:, 1].astype(np.float64)])
    if cnt.sum() < min_photons:
        return 0.5 * (lo + hi), 0.0
    kr = _ring_counts(idx, cnt, grid)
    ll = _ring_loglik(kr, tables)
    order = np.argsort(ll)
    best = order[-1]
    confidence = float(ll[best] - ll[order[-2]]) if ll.size > 1 else 0.0
    return float(d_values[best]), confidence


def estimate_diameters_batch(dataset: PhotonDataset, grid: DetectorGrid,
                             grid_diameters: np.ndarray, contrast: float,
                             top_k: int, scan_step: float = 0.1,
                             min_photons: int = 100):
    """Per-frame diameter estimates plus top-k grid-state restriction.

    Returns (estimates, confidences, subsets (n_frames, k) int32). Frames
    below the photon threshold keep the k grid states nearest the range
    center (no informative restriction).
    """
    lo, hi = float(grid_diameters[0]), float(grid_diameters[-1])
    scan = DiameterTables(grid, np.arange(lo, hi + scan_step / 2, scan_step), contrast)
    coarse = DiameterTables(grid, grid_diameters, contrast)
    n_frames = dataset.n_frames
    k = min(top_k, grid_diameters.size) if top_k > 0 else grid_diameters.size
    estimates = np.empty(n_frames)
    confidences = np.zeros(n_frames)
    subsets = np.empty((n_frames, k), dtype=np.int32)
    center_order = np.argsort(np.abs(grid_diameters - 0.5 * (lo + hi)),
                              kind="stable")[:k]
    center_subset = np.sort(center_order).astype(np.int32)
    for f in range(n_frames):
        k0, k1 = dataset.indptr[f], dataset.indptr[f + 1]
        idx = dataset.indices[k0:k1]
        cnt = dataset.counts[k0:k1].astype(np.float64)
        if cnt.sum() < min_photons:
            estimates[f] = 0.5 * (lo + hi)
            subsets[f] = center_subset
            continue
        kr = _ring_counts(idx, cnt, grid)
        ll_fine = _ring_loglik(kr, scan)
        order = np.argsort(ll_fine)
        estimates[f] = scan.d_values[order[-1]]
        confidences[f] = ll_fine[order[-1]] - ll_fine[order[-2]]
        ll_coarse = _ring_loglik(kr, coarse)
        top = np.sort(np.argsort(ll_coarse, kind="stable")[-k:])
        subsets[f] = top.astype(np.int32)
    return estimates, confidences, subsets


# -------------------------------------------------------------- iteration

@dataclass
class EmcDiagnostics:
    iteration: int
    mean_log_evidence: float
    change_fraction: float
    wall_time: float
    dm_error: float = 0.0
    n_used_classes: int = 0


@dataclass
class EmcState:
    model: ComplexModel
    support: SupportMask
    latents: LatentGrid
    iteration: int = 0
    most_likely: np.ndarray | None = None
    tomograms: TomogramSet | None = None
    probs: np.ndarray | None = field(default=None, repr=False)
    log_evidence: np.ndarray | None = field(default=None, repr=False)


def initial_state(grid: DetectorGrid, latents: LatentGrid, cfg, seed: int) -> EmcState:
    """Random complex starting model and the initial centered square support."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0FFEE)))
    mid = SphereParams(diameter=float(np.median(latents.diameters)),
                       contrast=max(cfg.contrast, 1e-6))
    scale = cfg.init_scale * np.abs(sphere_ft(grid.qmag().ravel()[grid.valid_flat], mid)).mean()
    values = scale * (rng.standard_normal((grid.size, grid.size))
                      + 1j * rng.standard_normal((grid.size, grid.size)))
    model = ComplexModel(size=grid.size, values=values, real_size=cfg.real_size)
    support = square_support(grid.size, cfg.support_init)
    return EmcState(model=model, support=support, latents=latents)


class _EngineWorkspace:
    """Preallocated buffers and frame/latent bookkeeping for the big path."""

    def __init__(self, dataset: PhotonDataset, grid: DetectorGrid,
                 latents: LatentGrid, cfg, workers: int):
        self.grid = grid
        self.latents = latents
        self.workers = workers
        self.budget = float(cfg.photons_per_frame)
        self.rate_floor = cfg.rate_floor
        self.resp_floor = cfg.resp_floor
        self.occupancy_eps_rel = cfg.class_occupancy_eps_rel
        self.contrast = cfg.contrast

        n_frames = dataset.n_frames
        self.indptr = dataset.indptr.astype(np.int64)
        self.pidx = dataset.indices.astype(np.int32)
        self.counts = dataset.counts.astype(np.float64)
        self.ktot = dataset.frame_totals().astype(np.float64)
        self.valid_flat = grid.valid_flat.astype(np.int64)

        # map dataset pixel indices onto the valid-packed axis
        packed = grid.valid_pos[self.pidx]
        if np.any(packed < 0):
            raise ContractError("dataset contains photons on masked pixels")
        self.pidx_packed = packed.astype(np.int32)

        subsets = latents.diameter_subsets
        if subsets is None:
            subsets = np.tile(np.arange(latents.n_d, dtype=np.int32), (n_frames, 1))
        self.subsets = subsets
        self.k_d = subsets.shape[1]
        self.n_slots = self.k_d * latents.n_t * latents.n_rot

        # frames that carry each diameter, with the slot each one uses
        self.frames_by_d = []
        self.slot_by_d = []
        for i_d in range(latents.n_d):
            sel, slot = np.nonzero(subsets == i_d)
            self.frames_by_d.append(sel.astype(np.int64))
            self.slot_by_d.append(slot.astype(np.int64))

        qmag_valid = grid.qmag().ravel()[grid.valid_flat]
        self.fs_by_d = np.stack([
            sphere_ft(qmag_valid, SphereParams(diameter=float(d), contrast=cfg.contrast))
            for d in latents.diameters])
        qy = grid.qcoords[..., 0].ravel()[grid.valid_flat]
        qx = grid.qcoords[..., 1].ravel()[grid.valid_flat]
        self.ramps = np.stack([
            np.exp(2j * np.pi * (qy * t[0] + qx * t[1])) for t in latents.shifts])

        self.ll = np.empty((n_frames, self.n_slots))
        self.scratch = np.empty((grid.n_valid, latents.n_rot))
        self.wsum = np.empty((latents.n_d, latents.n_t, latents.n_rot))
        self.wmaps = _rotation_weight_maps(grid, latents.angles, workers)
        self.lnprior = self._build_lnprior(cfg)
        self.neg_t_index = self._build_neg_t_index(latents)

    @staticmethod
    def _build_neg_t_index(latents: LatentGrid):
        """Index of -t for each shift, if the grid is closed under negation."""
        out = np.full(latents.n_t, -1, dtype=np.int64)
        for i, t in enumerate(latents.shifts):
            match = np.flatnonzero(np.all(np.abs(latents.shifts + t) < 1e-12, axis=1))
            if match.size != 1:
                return None
            out[i] = match[0]
        return out

    def _build_lnprior(self, cfg):
        if cfg.priors == "uniform":
            return None
        lat = self.latents
        # Gaussian priors matching the generating distributions
        pd = np.exp(-0.5 * ((lat.diameters - cfg.d_mean) / max(cfg.d_std, 1e-9)) ** 2)
        pt = np.exp(-0.5 * (lat.shifts**2).sum(axis=1) / max(cfg.t_std, 1e-9) ** 2)
        lnprior = np.empty((self.subsets.shape[0], self.n_slots))
        base = np.log(np.outer(pd, pt).reshape(lat.n_d, lat.n_t) + 1e-300)
        for f in range(self.subsets.shape[0]):
            row = base[self.subsets[f]]                      # (k_d, n_t)
            lnprior[f] = np.repeat(row.ravel(), lat.n_rot)
        return lnprior

    def global_index(self, frame_slots: np.ndarray, best_slot: np.ndarray) -> np.ndarray:
        """Global most-likely latent index, folded onto canonical twins.

        For a real object, (theta, t, d) and (theta + pi, -t, d) predict
        bitwise-equal intensities (Friedel pair plus a real reference), so
        the argmax is only defined on the quotient; representatives with
        theta < pi keep the convergence diagnostic from flipping on ties.
        """
        lat = self.latents
        i_rot = best_slot % lat.n_rot
        rest = best_slot // lat.n_rot
        i_t = rest % lat.n_t
        slot_d = rest // lat.n_t
        i_d = self.subsets[np.arange(best_slot.size), slot_d].astype(np.int64)
        if lat.n_rot % 2 == 0 and self.neg_t_index is not None:
            half = lat.n_rot // 2
            fold = i_rot >= half
            i_rot = np.where(fold, i_rot - half, i_rot)
            i_t = np.where(fold, self.neg_t_index[i_t], i_t)
        return (i_d * lat.n_t + i_t) * lat.n_rot + i_rot


def emc_iterate(state: EmcState, dataset: PhotonDataset, grid: DetectorGrid,
                cfg, workspace: _EngineWorkspace | None = None,
                workers: int | None = None):
    """One expand -> maximize -> compress iteration; returns (state, diag)."""
    t0 = time.perf_counter()
    if workers is None:
        workers = cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)
    if cfg.phasing_mode == "none":
        return _emc_iterate_intensity(state, dataset, grid, cfg, workers, t0)

    ws = workspace or _EngineWorkspace(dataset, grid, state.latents, cfg, workers)
    lat = state.latents
    n = grid.size

    # expand: per-angle rotated models on the valid-pixel axis
    frot = np.empty((lat.n_rot, grid.n_valid), dtype=np.complex128)
    for r, a in enumerate(lat.angles):
        frot[r] = kernels.rotate_image_raw(state.model.values, a, workers).ravel()[ws.valid_flat]

    # pass A: log likelihoods
    log_budget = np.log(ws.budget)
    for i_d in range(lat.n_d):
        frames = ws.frames_by_d[i_d]
        if frames.size == 0:
            ws.wsum[i_d] = 1.0
            continue
        slots = ws.slot_by_d[i_d]
        for i_t in range(lat.n_t):
            cols = (slots * lat.n_t + i_t) * lat.n_rot
            kernels.loglik_wsum_block(
                frot, ws.fs_by_d[i_d], ws.ramps[i_t], ws.scratch,
                ws.indptr, ws.pidx_packed, ws.counts, ws.ktot,
                frames, cols, ws.ll, ws.wsum[i_d, i_t], log_budget,
                ws.rate_floor, workers)

    phi = np.ones(dataset.n_frames)
    if cfg.fluence_mode == "per-frame-ML":
        phi = ws.ktot / ws.budget
        ws.ll += (ws.ktot * np.log(phi))[:, None]
        # the rate scaling of the ln term: sum K ln(phi W) = sum K lnW + Ktot ln phi;
        # the -phi*B term is latent-independent and handled in the evidence below.

    probs, log_ev, best_slot = _normalize_rows(ws.ll, ws.lnprior, ws.resp_floor)
    log_ev = log_ev - phi * ws.budget
    most_likely = ws.global_index(ws.subsets, best_slot)

    # pass B: responsibility-weighted merge into (d, t) class tomograms
    n_class = lat.n_d * lat.n_t
    intens = np.zeros((n_class, n, n))
    weight = np.zeros((n_class, n, n))
    occupancy = np.zeros(n_class)
    scale = np.ones(n_class)
    v_block = np.empty((lat.n_rot, grid.n_valid))
    omega = np.empty(lat.n_rot)
    omega_phi = np.empty(lat.n_rot)
    v_full = np.zeros((lat.n_rot, n, n))
    for i_d in range(lat.n_d):
        frames = ws.frames_by_d[i_d]
        slots = ws.slot_by_d[i_d]
        for i_t in range(lat.n_t):
            c = i_d * lat.n_t + i_t
            if frames.size == 0:
                continue
            cols = (slots * lat.n_t + i_t) * lat.n_rot
            kernels.mstep_block(probs, frames, cols, phi, ws.indptr,
                                ws.pidx_packed, ws.counts, v_block, omega,
                                omega_phi, workers)
            occupancy[c] = omega.sum()
            if occupancy[c] <= 0:
                continue
            v_full[:] = 0.0
            v_full.reshape(lat.n_rot, -1)[:, ws.valid_flat] = v_block
            numer = np.zeros((n, n))
            kernels.backrot_accum(v_full, lat.angles, numer, workers)
            denom = np.einsum("r,rij->ij", omega_phi, ws.wmaps)
            good = denom > 0
            intens[c][good] = numer[good] / denom[good]
            weight[c] = denom
            # photon scale -> physical intensity scale for this class
            scale[c] = float(ws.wsum[i_d, i_t].mean()) / ws.budget

    eps = ws.occupancy_eps_rel * occupancy.mean()
    used = occupancy >= max(eps, 1e-300)
    tomograms = TomogramSet(
        intens=intens * scale[:, None, None], weight=weight,
        occupancy=occupancy,
        class_d=np.repeat(lat.diameters, lat.n_t),
        class_t=np.tile(lat.shifts, (lat.n_d, 1)),
        used=used, contrast=ws.contrast)

    model, support, dm_err = run_compress(tomograms, state.model, state.support,
                                          cfg, state.iteration, grid)

    change = 1.0
    if state.most_likely is not None:
        change = float(np.mean(most_likely != state.most_likely))
    diag = EmcDiagnostics(
        iteration=state.iteration + 1,
        mean_log_evidence=float(log_ev.mean()),
        change_fraction=change,
        wall_time=time.perf_counter() - t0,
        dm_error=dm_err,
        n_used_classes=int(used.sum()))
    new_state = EmcState(model=model, support=support, latents=lat,
                         iteration=state.iteration + 1, most_likely=most_likely,
                         tomograms=tomograms, probs=probs, log_evidence=log_ev)
    return new_state, diag


def _emc_iterate_intensity(state: EmcState, dataset: PhotonDataset,
                           grid: DetectorGrid, cfg, workers: int, t0: float):
    """Intensity-model mode: tomograms are the model; no phase retrieval.

    Small-instance path (materializes the view table); its acceptance use
    is the degenerate single-class EM monotonicity check.
    """
    lat = state.latents
    if state.tomograms is None:
        from .forward import predicted_intensity  # local import avoids a cycle

        n_class = lat.n_d * lat.n_t
        intens = np.empty((n_class, grid.size, grid.size))
        for i_d, d in enumerate(lat.diameters):
            for i_t, t in enumerate(lat.shifts):
                params = SphereParams(diameter=float(d), shift=t,
                                      contrast=max(cfg.contrast, 1e-12))
                intens[i_d * lat.n_t + i_t] = predicted_intensity(
                    state.model, grid, 0.0, params, workers)
        state.tomograms = TomogramSet(
            intens=intens,
            weight=np.repeat(grid.mask.astype(np.float64)[None], n_class, axis=0),
            occupancy=np.ones(n_class), class_d=np.repeat(lat.diameters, lat.n_t),
            class_t=np.tile(lat.shifts, (lat.n_d, 1)),
            used=np.ones(n_class, dtype=bool), contrast=cfg.contrast)

    w = expand_from_tomograms(state.tomograms, grid, lat, workers)
    resp, views, phi = maximize(dataset, w, lat, fluence_mode=cfg.fluence_mode,
                                rate_floor=cfg.rate_floor, resp_floor=cfg.resp_floor)
    tomograms = compress_merge(resp, dataset, lat, grid, phi=phi,
                               occupancy_eps_rel=cfg.class_occupancy_eps_rel,
                               contrast=cfg.contrast, workers=workers)
    idx = np.argmax(resp.dense(), axis=1)
    change = 1.0
    if state.most_likely is not None:
        change = float(np.mean(idx != state.most_likely))
    diag = EmcDiagnostics(
        iteration=state.iteration + 1,
        mean_log_evidence=float(resp.log_evidence.mean()),
        change_fraction=change,
        wall_time=time.perf_counter() - t0,
        n_used_classes=int(tomograms.used.sum()))
    new_state = EmcState(model=state.model, support=state.support, latents=lat,
                         iteration=state.iteration + 1, most_likely=idx,
                         tomograms=tomograms)
    return new_state, diag
