"""Pure-numpy implementations of the hot kernels.

Selected automatically when the compiled extension is unavailable. Slower
than the Cython core but contract-identical; reduction orders match the
compiled kernels (per frame / per latent, pixel order), so both backends
are worker-count independent.
"""

import numpy as np


def _snap_trig(angle):
    c, s = np.cos(angle), np.sin(angle)
    if abs(c) < 1e-15:
        c = 0.0
    if abs(s) < 1e-15:
        s = 0.0
    return c, s


def _sample_grid(image, rows, cols):
    h, w = image.shape
    inside = (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1)
    r0 = np.clip(np.floor(rows).astype(np.int64), 0, h - 2)
    c0 = np.clip(np.floor(cols).astype(np.int64), 0, w - 2)
    fr = rows - r0
    fc = cols - c0
    v00 = image[r0, c0]
    v01 = image[r0, c0 + 1]
    v10 = image[r0 + 1, c0]
    v11 = image[r0 + 1, c0 + 1]
    out = ((1 - fr) * (1 - fc) * v00 + (1 - fr) * fc * v01
           + fr * (1 - fc) * v10 + fr * fc * v11)
    return np.where(inside, out, 0.0)


def _rot_coords(n, cos_t, sin_t):
    c = (n - 1) / 2.0
    rows, cols = np.indices((n, n), dtype=np.float64)
    dy = rows - c
    dx = cols - c
    return c + cos_t * dy + sin_t * dx, c - sin_t * dy + cos_t * dx


def rotate_bilinear(image, angle, workers=1):
    n = image.shape[0]
    cos_t, sin_t = _snap_trig(angle)
    src_r, src_c = _rot_coords(n, cos_t, sin_t)
    return _sample_grid(image, src_r, src_c)


def loglik_wsum_block(frot, fs, ramp, scratch, indptr, pidx, counts, ktot,
                      frames, cols, out_ll, wsum, log_budget, rate_floor, workers=1):
    field = frot + fs[None, :] * ramp[None, :]
    w = field.real**2 + field.imag**2        # (n_rot, n_valid)
    wsum[:] = w.sum(axis=1)
    lnw = np.log(np.maximum(w, rate_floor))
    n_rot = lnw.shape[0]
    norm = log_budget - np.log(wsum)
    for s in range(frames.shape[0]):
        f = int(frames[s])
        k0, k1 = int(indptr[f]), int(indptr[f + 1])
        seg = lnw[:, pidx[k0:k1]] * counts[k0:k1][None, :]
        c0 = int(cols[s])
        out_ll[f, c0:c0 + n_rot] = seg.sum(axis=1) + ktot[f] * norm


def mstep_block(prob, frames, cols, phi, indptr, pidx, counts, v_out, omega, omega_phi, workers=1):
    n_rot = v_out.shape[0]
    v_out[:] = 0.0
    omega[:] = 0.0
    omega_phi[:] = 0.0
    for s in range(frames.shape[0]):
        f = int(frames[s])
        c0 = int(cols[s])
        p = prob[f, c0:c0 + n_rot]
        active = p > 0.0
        if not active.any():
            continue
        k0, k1 = int(indptr[f]), int(indptr[f + 1])
        omega += np.where(active, p, 0.0)
        omega_phi += np.where(active, p, 0.0) * phi[f]
        v_out[np.ix_(active, pidx[k0:k1])] += p[active, None] * counts[k0:k1][None, :]


def backrot_accum(images, angles, out, workers=1):
    n = out.shape[0]
    for r in range(images.shape[0]):
        cos_t, sin_t = _snap_trig(-angles[r])
        src_r, src_c = _rot_coords(n, cos_t, sin_t)
        out += _sample_grid(images[r], src_r, src_c)
    return out
