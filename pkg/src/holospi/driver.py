"""End-to-end pipelines behind the CLI subcommands."""

import logging
import os

import numpy as np

from . import fileio
from .config import RunConfig, config_hash
from .emc import (EmcState, _EngineWorkspace, emc_iterate,
                  estimate_diameters_batch, initial_state)
from .errors import ContractError
from .fftutil import centered_ift
from .forward import (ComplexModel, make_test_object, powder_image,
                      simulate_dataset)
from .geometry import build_grid
from .lattice import build_lattice_geometry, simulate_lattice_dataset
from .lattice_emc import (_LatticeWorkspace, emc_iterate_lattice,
                          initial_lattice_state, lattice_latents)
from .latent import latent_grid_from_config
from .metrics import align, convergence_fraction, frc

log = logging.getLogger("holospi")


def _ensure_out(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def geometry_from_config(cfg: RunConfig):
    return build_grid(cfg.size, cfg.r_min, cfg.r_max)


def object_from_config(cfg: RunConfig):
    return make_test_object(cfg.object_seed, cfg.n_blobs, cfg.size, cfg.real_size)


def lattice_geometry_from_config(cfg: RunConfig):
    return build_lattice_geometry(cfg.lattice_type, cfg.lattice_a,
                                  cfg.cell_diameter, cfg.cell_contrast,
                                  cfg.probe_n, cfg.peak_q_max)


def run_make_object(cfg: RunConfig, out_dir) -> None:
    _ensure_out(out_dir)
    model, density = object_from_config(cfg)
    h = config_hash(cfg)
    fileio.write_model(os.path.join(out_dir, "object.bin"), model.values, 0, h,
                       cfg.real_size)
    fileio.write_pgm(os.path.join(out_dir, "object_intensity.pgm"),
                     np.abs(model.values) ** 2, log_scale=True)
    fileio.write_pgm(os.path.join(out_dir, "object_density.pgm"), density,
                     log_scale=False)
    log.info("object written to %s (DC = %.6g)", out_dir, density.sum())


def run_simulate_single(cfg: RunConfig, out_dir) -> None:
    _ensure_out(out_dir)
    grid = geometry_from_config(cfg)
    model, density = object_from_config(cfg)
    workers = cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)
    dataset, truth = simulate_dataset(
        model, grid, cfg.n_frames, cfg.photons_per_frame, cfg.d_mean, cfg.d_std,
        cfg.t_std, cfg.contrast, cfg.seed, workers)
    h = config_hash(cfg)
    fileio.write_photons(os.path.join(out_dir, "photons.hspi"), dataset)
    fileio.write_truth(os.path.join(out_dir, "truth.txt"), truth)
    fileio.write_model(os.path.join(out_dir, "object.bin"), model.values, 0, h,
                       cfg.real_size)
    fileio.write_pgm(os.path.join(out_dir, "powder.pgm"),
                     powder_image(dataset, grid), log_scale=True)
    log.info("simulated %d frames, %.3g photons total", dataset.n_frames,
             float(dataset.counts.sum()))


def _write_diagnostics(out_dir, rows):
    fileio.write_csv(os.path.join(out_dir, "diagnostics.csv"),
                     ["iteration", "mean_log_evidence", "change_fraction"],
                     [[d.iteration, d.mean_log_evidence, d.change_fraction]
                      for d in rows])
    fileio.write_csv(os.path.join(out_dir, "timings.csv"),
                     ["iteration", "wall_time_s", "dm_error", "n_used_classes"],
                     [[d.iteration, d.wall_time, d.dm_error, d.n_used_classes]
                      for d in rows])


def run_reconstruct(cfg: RunConfig, out_dir, data_path=None) -> list:
    """Single-particle EMC reconstruction; returns the diagnostics rows."""
    _ensure_out(out_dir)
    data_path = data_path or os.path.join(out_dir, "photons.hspi")
    dataset = fileio.read_photons(data_path)
    grid = geometry_from_config(cfg)
    dataset.validate(grid)
    workers = cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)

    latents = latent_grid_from_config(cfg)
    if cfg.diameter_top_k > 0 and latents.n_d > 1:
        _, _, subsets = estimate_diameters_batch(
            dataset, grid, latents.diameters, cfg.contrast, cfg.diameter_top_k)
        latents.diameter_subsets = subsets
        log.info("diameter pre-estimation done (top-%d of %d states per frame)",
                 subsets.shape[1], latents.n_d)

    state = initial_state(grid, latents, cfg, cfg.seed)
    ws = _EngineWorkspace(dataset, grid, latents, cfg, workers)
    h = config_hash(cfg)
    rows = []
    for _ in range(cfg.n_iterations):
        state, diag = emc_iterate(state, dataset, grid, cfg, ws, workers)
        rows.append(diag)
        log.info("iter %03d  log-ev %.6g  change %.4f  dm_err %.3g  classes %d  (%.1fs)",
                 diag.iteration, diag.mean_log_evidence, diag.change_fraction,
                 diag.dm_error, diag.n_used_classes, diag.wall_time)
        if diag.iteration % cfg.snapshot_every == 0:
            fileio.write_model(
                os.path.join(out_dir, f"model_iter_{diag.iteration:03d}.bin"),
                state.model.values, diag.iteration, h, cfg.real_size)
        if diag.iteration > 1 and diag.change_fraction < cfg.early_exit_change:
            log.info("early exit: change fraction %.4f < %.4f",
                     diag.change_fraction, cfg.early_exit_change)
            break
    fileio.write_model(os.path.join(out_dir, "model_final.bin"),
                       state.model.values, state.iteration, h, cfg.real_size)
    _write_diagnostics(out_dir, rows)
    return rows


def run_simulate_lattice(cfg: RunConfig, out_dir) -> None:
    _ensure_out(out_dir)
    geom = lattice_geometry_from_config(cfg)
    model, density = object_from_config(cfg)
    counts, angles, shifts = simulate_lattice_dataset(
        model, geom, cfg.lattice_n_frames, cfg.lattice_photons_scale, cfg.seed)
    h = config_hash(cfg)
    fileio.write_peaks(os.path.join(out_dir, "peaks.hspk"),
                       counts.astype(np.uint32), geom.peak_hk, geom.peak_q)
    fileio.write_peaks_truth(os.path.join(out_dir, "peaks_truth.txt"), angles, shifts)
    fileio.write_model(os.path.join(out_dir, "object.bin"), model.values, 0, h,
                       cfg.real_size)
    log.info("simulated %d lattice frames over %d peaks", counts.shape[0],
             geom.n_peaks)


def run_reconstruct_lattice(cfg: RunConfig, out_dir, data_path=None) -> list:
    _ensure_out(out_dir)
    data_path = data_path or os.path.join(out_dir, "peaks.hspk")
    counts, hk, q = fileio.read_peaks(data_path)
    geom = lattice_geometry_from_config(cfg)
    if hk.shape[0] != geom.n_peaks or not np.array_equal(hk, geom.peak_hk):
        raise ContractError("peaks file does not match the configured lattice")
    latents = lattice_latents(geom, cfg.lattice_n_rot, cfg.lattice_n_cell)
    state = initial_lattice_state(cfg.size, cfg.real_size, geom, latents, cfg,
                                  cfg.seed)
    ws = _LatticeWorkspace(geom, latents, cfg.size)
    h = config_hash(cfg)
    rows = []
    for _ in range(cfg.lattice_n_iterations):
        state, diag = emc_iterate_lattice(state, counts, geom, cfg, ws)
        rows.append(diag)
        log.info("lattice iter %03d  log-ev %.6g  change %.4f  dm_err %.3g  (%.1fs)",
                 diag.iteration, diag.mean_log_evidence, diag.change_fraction,
                 diag.dm_error, diag.wall_time)
        if diag.iteration % cfg.snapshot_every == 0:
            fileio.write_model(
                os.path.join(out_dir, f"model_iter_{diag.iteration:03d}.bin"),
                state.model.values, diag.iteration, h, cfg.real_size)
        if diag.iteration > 1 and diag.change_fraction < cfg.early_exit_change:
            log.info("early exit at lattice iteration %d", diag.iteration)
            break
    fileio.write_model(os.path.join(out_dir, "model_final.bin"),
                       state.model.values, state.iteration, h, cfg.real_size)
    _write_diagnostics(out_dir, rows)
    return rows


def run_metrics(cfg: RunConfig, out_dir, model_path, truth_path,
                diagnostics_path=None) -> dict:
    """Aligned FRC between a snapshot and the truth model, plus convergence."""
    _ensure_out(out_dir)
    grid = geometry_from_config(cfg)
    rec_values, it, _ = fileio.read_model(model_path, config_hash(cfg))
    tru_values, _, _ = fileio.read_model(truth_path, config_hash(cfg))
    rec_density = centered_ift(rec_values).real
    tru_density = centered_ift(tru_values).real
    angle, shift, aligned = align(rec_density, tru_density)
    from .fftutil import centered_ft
    curve = frc(centered_ft(aligned.astype(complex)), tru_values, grid)
    rows = [[float(r), float(v)] for r, v in zip(curve.radii, curve.values)
            if np.isfinite(v)]
    fileio.write_csv(os.path.join(out_dir, "frc.csv"), ["ring_radius", "frc"], rows)
    fileio.atomic_write_text(
        os.path.join(out_dir, "align.txt"),
        f"angle_rad {angle!r}\nshift_y {int(shift[0])}\nshift_x {int(shift[1])}\n"
        f"frc_crossing {curve.crossing!r}\n")
    out = {"angle": angle, "shift": shift, "crossing": curve.crossing,
           "iteration": it}
    if diagnostics_path:
        import csv
        with open(diagnostics_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        fileio.write_csv(os.path.join(out_dir, "convergence.csv"),
                         ["iteration", "fraction"],
                         [[int(r["iteration"]), float(r["change_fraction"])]
                          for r in rows])
    log.info("metrics: aligned at %.2f deg shift (%d, %d); FRC 0.5 crossing %s",
             np.rad2deg(angle), shift[0], shift[1], out["crossing"])
    return out
