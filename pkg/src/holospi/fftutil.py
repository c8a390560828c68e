"""Centered Fourier transforms and bilinear sampling on square grids.

Conventions used everywhere in the package:

* grids are square with odd side N; the center pixel is c = (N-1)/2,
* spatial frequency of pixel p is q = (p - c)/N in cycles per pixel,
* the forward transform uses the positive kernel,
  F(q) = sum_r rho(r) exp(+2*pi*i q.r) with r = p - c,
  so a real-space shift by +t multiplies F by exp(+2*pi*i q.t).

With these choices the centered q grid coincides exactly with the
fftshifted DFT frequencies, which requires odd N.
"""

import numpy as np

from .errors import ContractError


def require_odd(size: int) -> None:
    if size % 2 == 0:
        raise ContractError(
            f"model-space operations require an odd grid size, got {size} "
            "(even sizes misalign the centered q grid with DFT frequencies)"
        )


def centered_ft(density: np.ndarray) -> np.ndarray:
    """Forward transform (positive kernel) on the centered grid."""
    n = density.shape[-1]
    require_odd(n)
    axes = (-2, -1)
    work = np.fft.ifftshift(density, axes=axes)
    out = np.fft.ifft2(work, axes=axes) * (n * n)
    return np.fft.fftshift(out, axes=axes)


def centered_ift(model: np.ndarray) -> np.ndarray:
    """Inverse of :func:`centered_ft`."""
    n = model.shape[-1]
    require_odd(n)
    axes = (-2, -1)
    work = np.fft.ifftshift(model, axes=axes)
    out = np.fft.fft2(work, axes=axes) / (n * n)
    return np.fft.fftshift(out, axes=axes)


def bilinear_sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill=0.0) -> np.ndarray:
    """Sample ``image`` at fractional (row, col) positions.

    Samples whose 2x2 neighbourhood leaves the image contribute ``fill``.
    Works for real and complex images; the result dtype follows the image.
    """
    h, w = image.shape
    inside = (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1)
    r0c = np.clip(np.floor(rows).astype(np.int64), 0, h - 2)
    c0c = np.clip(np.floor(cols).astype(np.int64), 0, w - 2)
    fr = rows - r0c
    fc = cols - c0c

    v00 = image[r0c, c0c]
    v01 = image[r0c, c0c + 1]
    v10 = image[r0c + 1, c0c]
    v11 = image[r0c + 1, c0c + 1]
    out = ((1 - fr) * (1 - fc) * v00 + (1 - fr) * fc * v01
           + fr * (1 - fc) * v10 + fr * fc * v11)
    return np.where(inside, out, fill)
