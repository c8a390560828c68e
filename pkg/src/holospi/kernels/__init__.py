"""Hot-loop kernels: compiled Cython core with a numpy fallback.

The backend is chosen at import time: the compiled extension if it built,
otherwise the pure-numpy implementation. Override with the environment
variable HSPI_KERNELS in {auto, cython, python}.

Both backends implement the same contracts and produce results that are
independent of the worker count (per-output-element accumulation order is
fixed; threads never share accumulators).
"""

import os

import numpy as np

from . import pykernels

_choice = os.environ.get("HSPI_KERNELS", "auto")
if _choice not in ("auto", "cython", "python"):
    raise RuntimeError(f"HSPI_KERNELS must be auto, cython or python, got {_choice!r}")

_impl = None
if _choice in ("auto", "cython"):
    try:
        from . import _cykernels as _impl
    except ImportError:
        if _choice == "cython":
            raise RuntimeError("HSPI_KERNELS=cython but the compiled extension is unavailable")
        _impl = None
if _impl is None:
    _impl = pykernels

BACKEND = "cython" if _impl is not pykernels else "python"


def backend_name() -> str:
    return BACKEND


def rotate_image_raw(image: np.ndarray, angle: float, workers: int = 1) -> np.ndarray:
    """Rotate image content by ``angle`` about the grid center, bilinear.

    output[p] = image[c + R(-angle)(p - c)]; samples outside the grid are 0.
    Complex images are rotated as independent real and imaginary parts.
    """
    image = np.ascontiguousarray(image)
    if np.iscomplexobj(image):
        re = _impl.rotate_bilinear(np.ascontiguousarray(image.real), angle, workers)
        im = _impl.rotate_bilinear(np.ascontiguousarray(image.imag), angle, workers)
        return re + 1j * im
    return _impl.rotate_bilinear(image.astype(np.float64, copy=False), angle, workers)


def loglik_wsum_block(frot, fs, ramp, scratch, indptr, pidx, counts, ktot,
                      frames, cols, out_ll, wsum, log_budget, rate_floor, workers=1):
    """Poisson log-likelihood block for one (diameter, shift) latent slab.

    Predicted intensities W[r, i] = |frot[r, i] + fs[i] * ramp[i]|^2 on the
    valid-pixel axis i; for each selected frame f the slice
    out_ll[frames[s], cols[s]:cols[s]+n_rot] is set to
    sum_k counts[k] * ln(max(W[r, pidx[k]], rate_floor))
    + ktot[f] * (log_budget - ln wsum[r]),
    which is the Poisson log likelihood of the frame under the
    budget-normalized rates, up to the frame-constant -budget term.
    wsum[r] = sum_i W[r, i] is also returned. ``scratch`` is an (n_valid,
    n_rot) float64 workspace owned by the caller.
    """
    return _impl.loglik_wsum_block(frot, fs, ramp, scratch, indptr, pidx, counts,
                                   ktot, frames, cols, out_ll, wsum,
                                   log_budget, rate_floor, workers)


def mstep_block(prob, frames, cols, phi, indptr, pidx, counts, v_out, omega, omega_phi, workers=1):
    """Responsibility-weighted photon sums for one latent slab.

    v_out[r, :] = sum_s prob[frames[s], cols[s]+r] * (sparse frame s),
    omega[r] = sum_s prob[...], omega_phi[r] = sum_s prob[...] * phi[f].
    Accumulation order over s is fixed, so results do not depend on the
    worker count.
    """
    return _impl.mstep_block(prob, frames, cols, phi, indptr, pidx, counts,
                             v_out, omega, omega_phi, workers)


def backrot_accum(images, angles, out, workers=1):
    """out += sum_r rotate_image_raw(images[r], -angles[r]) (bilinear)."""
    return _impl.backrot_accum(images, angles, out, workers)
