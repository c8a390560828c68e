"""Compress-step solver: divide-and-concur difference map.

One copy of the complex object model per active (diameter, shift) class.
The divide projection is a modulus projection against each class's merged
intensities with the known reference wave subtracted; the concur
projection averages the copies and applies the real-space support and
positivity constraints.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError
from .fftutil import centered_ft, centered_ift
from .forward import ComplexModel, SphereParams, sphere_ft

log = logging.getLogger("holospi")

WEIGHT_REL_FLOOR = 1e-9   # coverage below this fraction of the max is unconstrained
SMALL_MODULUS = 1e-12


@dataclass
class SupportMask:
    """Real-space support; True inside."""

    inside: np.ndarray

    def __post_init__(self):
        if not self.inside.any():
            raise ContractError("support must contain at least one pixel")

    @property
    def n_inside(self) -> int:
        return int(self.inside.sum())


def square_support(size: int, side: int) -> SupportMask:
    """Centered side x side square (side odd keeps it exactly centered)."""
    c = (size - 1) // 2
    lo, hi = c - (side - 1) // 2, c + side // 2
    inside = np.zeros((size, size), dtype=bool)
    inside[lo:hi + 1, lo:hi + 1] = True
    return SupportMask(inside=inside)


@dataclass
class CopySet:
    """One model copy per active class, stacked; metadata per class."""

    values: np.ndarray      # (n_class, N, N) complex
    class_d: np.ndarray     # (n_class,)
    class_t: np.ndarray     # (n_class, 2)
    occupancy: np.ndarray   # (n_class,)

    @property
    def n_class(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "CopySet":
        return CopySet(self.values.copy(), self.class_d, self.class_t, self.occupancy)


def reference_stack(copies: CopySet, grid, contrast: float) -> np.ndarray:
    """F_s(q, d_n) e^{2 pi i q.t_n} for every class, full grid."""
    qmag = grid.qmag()
    qy, qx = grid.qcoords[..., 0], grid.qcoords[..., 1]
    out = np.empty((copies.n_class,) + qmag.shape, dtype=np.complex128)
    for n in range(copies.n_class):
        params = SphereParams(diameter=float(copies.class_d[n]),
                              shift=copies.class_t[n], contrast=contrast)
        fs = sphere_ft(qmag, params)
        phase = 2.0 * np.pi * (qy * copies.class_t[n, 0] + qx * copies.class_t[n, 1])
        out[n] = fs * np.exp(1j * phase)
    return out


def constraint_masks(intens: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Pixels with usable coverage in each class's tomogram."""
    wmax = weight.max(axis=(1, 2), keepdims=True)
    return weight > WEIGHT_REL_FLOOR * np.maximum(wmax, 1e-300)


def divide_projection(copies: CopySet, intens: np.ndarray, cmask: np.ndarray,
                      refs: np.ndarray, ratio_printed: bool = False,
                      out: np.ndarray | None = None) -> CopySet:
    """Modulus projection per class with the reference wave subtracted.

    Rescales |F_o,n + ref_n| to sqrt(I_obs,n) keeping the phase, then
    subtracts ref_n; unconstrained pixels pass through unchanged. With
    ``ratio_printed`` the reciprocal ratio is used instead (for comparison
    with the as-printed projection formula).
    """
    if np.any(intens[cmask] < 0):
        raise ContractError("negative tomogram intensity reached the divide projection")
    x = copies.values
    if out is None:
        out = x.copy()
    elif out is not x:
        out[:] = x
    f_calc = x + refs
    mag = np.abs(f_calc)
    target = np.sqrt(np.maximum(intens, 0.0))
    ok = cmask & (mag > SMALL_MODULUS)
    ratio = np.ones_like(mag)
    ratio[ok] = (mag[ok] / target[ok]) if ratio_printed else (target[ok] / mag[ok])
    out[ok] = ratio[ok] * f_calc[ok] - refs[ok]
    # vanishing modulus: take the phase from the reference wave
    tiny = cmask & ~ok
    if tiny.any():
        unit = np.ones_like(refs)
        nz = np.abs(refs) > 0
        unit[nz] = refs[nz] / np.abs(refs[nz])
        out[tiny] = target[tiny] * unit[tiny] - refs[tiny]
    return CopySet(out, copies.class_d, copies.class_t, copies.occupancy)


def concur_projection(copies: CopySet, support: SupportMask, positivity: bool = True,
                      uniform: bool = False):
    """Average the copies, project to support/positivity, broadcast back.

    Returns (copies, common) where ``common`` is the shared projected model.
    """
    if copies.n_class < 1:
        raise ContractError("concur projection needs at least one copy")
    if uniform:
        avg = copies.values.mean(axis=0)
    else:
        w = copies.occupancy / copies.occupancy.sum()
        avg = np.einsum("n,nij->ij", w, copies.values)
    rho = centered_ift(avg)
    proj = np.zeros_like(rho)
    if positivity:
        proj[support.inside] = np.maximum(rho.real[support.inside], 0.0)
    else:
        proj[support.inside] = rho[support.inside]
    common = centered_ft(proj)
    copies.values[:] = common[None]
    return copies, common


def difference_map_step(copies: CopySet, intens, cmask, refs, support: SupportMask,
                        beta: float = 1.0, positivity: bool = True,
                        uniform: bool = False, ratio_printed: bool = False):
    """One difference-map update; returns (copies, error).

    With the two projections P_D (divide) and P_C (concur) the update is
        x <- x + beta * (P_D(f_C(x)) - P_C(f_D(x)))
    with the estimates f_C(x) = (1 + 1/beta) P_C(x) - x/beta and
    f_D(x) = (1 - 1/beta) P_D(x) + x/beta; at beta = 1 this reduces to
        x <- x + P_D(2 P_C(x) - x) - P_C(x).
    The error is the RMS of P_D(f_C(x)) - P_C(f_D(x)) over all copies and
    constrained pixels.
    """
    x = copies.values
    pc, _ = concur_projection(copies.copy(), support, positivity, uniform)
    fc = (1.0 + 1.0 / beta) * pc.values - x / beta
    pd_fc = divide_projection(
        CopySet(fc, copies.class_d, copies.class_t, copies.occupancy),
        intens, cmask, refs, ratio_printed, out=fc)
    if beta == 1.0:
        pc_fd_values = pc.values      # f_D(x) = x, so P_C(f_D(x)) = P_C(x)
    else:
        pdx = divide_projection(copies, intens, cmask, refs, ratio_printed)
        fd = (1.0 - 1.0 / beta) * pdx.values + x / beta
        pc_fd, _ = concur_projection(
            CopySet(fd, copies.class_d, copies.class_t, copies.occupancy),
            support, positivity, uniform)
        pc_fd_values = pc_fd.values
    diff = pd_fc.values - pc_fd_values
    x += beta * diff
    err = float(np.sqrt(np.mean(np.abs(diff[cmask]) ** 2))) if cmask.any() else 0.0
    return copies, err


def shrinkwrap_update(estimate: np.ndarray, kernel_sigma: float, n_inside: int,
                      previous: SupportMask | None = None) -> SupportMask:
    """Blur the magnitude and keep exactly the n_inside largest pixels.

    Ties break toward the lowest linear index. An identically-zero estimate
    keeps the previous support (with a warning).
    """
    mag = np.abs(estimate)
    if not mag.any():
        log.warning("shrinkwrap: estimate is identically zero, keeping previous support")
        if previous is None:
            raise ContractError("shrinkwrap on a zero estimate with no previous support")
        return previous
    blurred = gaussian_filter(mag, sigma=kernel_sigma)
    flat = blurred.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))
    inside = np.zeros(flat.size, dtype=bool)
    inside[order[:n_inside]] = True
    return SupportMask(inside=inside.reshape(estimate.shape))


def run_compress(tomograms, prev_model: ComplexModel, support: SupportMask,
                 cfg, emc_iteration: int, grid):
    """Difference-map phasing of the merged tomograms; returns (model, support).

    Copies warm-start from the previous model. The support refreshes via
    shrinkwrap every cfg.shrinkwrap_every EMC iterations. The returned model
    is the concur projection of the final state.
    """
    used = np.flatnonzero(tomograms.used)
    if used.size == 0:
        raise ContractError("no tomogram class is usable for phasing")

    if emc_iteration > 0 and emc_iteration % cfg.shrinkwrap_every == 0:
        density = centered_ift(prev_model.values)
        support = shrinkwrap_update(density, cfg.shrinkwrap_sigma,
                                    cfg.support_n_inside, previous=support)

    intens = tomograms.intens[used]
    weight = tomograms.weight[used]
    cmask = constraint_masks(intens, weight)
    copies = CopySet(
        values=np.broadcast_to(prev_model.values, (used.size,) + prev_model.values.shape).copy(),
        class_d=tomograms.class_d[used],
        class_t=tomograms.class_t[used],
        occupancy=tomograms.occupancy[used],
    )
    refs = reference_stack(copies, grid, tomograms.contrast)

    err = 0.0
    for _ in range(cfg.dm_iters):
        copies, err = difference_map_step(
            copies, intens, cmask, refs, support, beta=cfg.beta,
            uniform=cfg.concur_uniform, ratio_printed=cfg.divide_ratio_printed)
    _, common = concur_projection(copies, support, positivity=True,
                                  uniform=cfg.concur_uniform)
    model = ComplexModel(size=prev_model.size, values=common, real_size=prev_model.real_size)
    return model, support, err
