# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot-loop kernels.

Layouts are chosen for the E-step inner loop: the per-block log-intensity
table is pixel-major (n_valid, n_rot) so that each photon pixel update is a
contiguous fused-multiply-add over the rotation axis. Threads never share
accumulators (parallel over frames in the E-step, over rotations in the
M-step, over output pixels in the merge), so every output element has a
fixed accumulation order and results are independent of the worker count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport cos, fabs, floor, log, sin

cnp.import_array()


cdef inline double _bisample(const double[:, ::1] img, double r, double c,
                             Py_ssize_t n, Py_ssize_t m) nogil:
    cdef Py_ssize_t r0, c0
    cdef double fr, fc
    if r < 0.0 or r > n - 1 or c < 0.0 or c > m - 1:
        return 0.0
    r0 = <Py_ssize_t>floor(r)
    c0 = <Py_ssize_t>floor(c)
    if r0 > n - 2:
        r0 = n - 2
    if c0 > m - 2:
        c0 = m - 2
    if r0 < 0:
        r0 = 0
    if c0 < 0:
        c0 = 0
    fr = r - r0
    fc = c - c0
    return ((1 - fr) * (1 - fc) * img[r0, c0] + (1 - fr) * fc * img[r0, c0 + 1]
            + fr * (1 - fc) * img[r0 + 1, c0] + fr * fc * img[r0 + 1, c0 + 1])


def rotate_bilinear(const double[:, ::1] image, double angle, int workers=1):
    cdef Py_ssize_t n = image.shape[0], m = image.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double cos_t = cos(angle), sin_t = sin(angle)
    if fabs(cos_t) < 1e-15:
        cos_t = 0.0
    if fabs(sin_t) < 1e-15:
        sin_t = 0.0
    cdef double cy = (n - 1) / 2.0, cx = (m - 1) / 2.0
    cdef Py_ssize_t i, j
    cdef double dy, dx
    if workers < 1:
        workers = 1
    for i in prange(n, nogil=True, schedule="static", num_threads=workers):
        dy = i - cy
        for j in range(m):
            dx = j - cx
            out[i, j] = _bisample(image, cy + cos_t * dy + sin_t * dx,
                                  cx - sin_t * dy + cos_t * dx, n, m)
    return out_arr


def loglik_wsum_block(const double complex[:, ::1] frot,
                      const double[::1] fs,
                      const double complex[::1] ramp,
                      double[:, ::1] scratch,
                      const cnp.int64_t[::1] indptr,
                      const cnp.int32_t[::1] pidx,
                      const double[::1] counts,
                      const double[::1] ktot,
                      const cnp.int64_t[::1] frames,
                      const cnp.int64_t[::1] cols,
                      double[:, ::1] out_ll,
                      double[::1] wsum,
                      double log_budget,
                      double rate_floor,
                      int workers=1):
    cdef Py_ssize_t n_rot = frot.shape[0]
    cdef Py_ssize_t n_val = frot.shape[1]
    cdef Py_ssize_t n_sel = frames.shape[0]
    cdef Py_ssize_t i, r, s, k, f, c0, k0, k1
    cdef double wre, wim, v, acc_norm, cnt
    if workers < 1:
        workers = 1

    # predicted intensities, pixel-major
    for i in prange(n_val, nogil=True, schedule="static", num_threads=workers):
        for r in range(n_rot):
            wre = frot[r, i].real + fs[i] * ramp[i].real
            wim = frot[r, i].imag + fs[i] * ramp[i].imag
            scratch[i, r] = wre * wre + wim * wim

    # per-rotation intensity sums, fixed pixel order per rotation
    for r in prange(n_rot, nogil=True, schedule="static", num_threads=workers):
        v = 0.0
        for i in range(n_val):
            v = v + scratch[i, r]
        wsum[r] = v

    # floored log intensities, in place
    for i in prange(n_val, nogil=True, schedule="static", num_threads=workers):
        for r in range(n_rot):
            v = scratch[i, r]
            if v < rate_floor:
                v = rate_floor
            scratch[i, r] = log(v)

    # per-frame accumulation; each frame is handled by exactly one thread
    for s in prange(n_sel, nogil=True, schedule="static", num_threads=workers):
        f = frames[s]
        c0 = cols[s]
        for r in range(n_rot):
            out_ll[f, c0 + r] = ktot[f] * (log_budget - log(wsum[r]))
        k0 = indptr[f]
        k1 = indptr[f + 1]
        for k in range(k0, k1):
            cnt = counts[k]
            i = pidx[k]
            for r in range(n_rot):
                out_ll[f, c0 + r] += cnt * scratch[i, r]


def mstep_block(const double[:, ::1] prob,
                const cnp.int64_t[::1] frames,
                const cnp.int64_t[::1] cols,
                const double[::1] phi,
                const cnp.int64_t[::1] indptr,
                const cnp.int32_t[::1] pidx,
                const double[::1] counts,
                double[:, ::1] v_out,
                double[::1] omega,
                double[::1] omega_phi,
                int workers=1):
    cdef Py_ssize_t n_rot = v_out.shape[0]
    cdef Py_ssize_t n_val = v_out.shape[1]
    cdef Py_ssize_t n_sel = frames.shape[0]
    cdef Py_ssize_t r, s, k, f
    cdef double p, om, omp
    if workers < 1:
        workers = 1
    for r in prange(n_rot, nogil=True, schedule="static", num_threads=workers):
        for k in range(n_val):
            v_out[r, k] = 0.0
        om = 0.0
        omp = 0.0
        for s in range(n_sel):
            f = frames[s]
            p = prob[f, cols[s] + r]
            if p > 0.0:
                om = om + p
                omp = omp + p * phi[f]
                for k in range(indptr[f], indptr[f + 1]):
                    v_out[r, pidx[k]] += p * counts[k]
        omega[r] = om
        omega_phi[r] = omp


def backrot_accum(const double[:, :, ::1] images,
                  const double[::1] angles,
                  double[:, ::1] out,
                  int workers=1):
    cdef Py_ssize_t n_rot = images.shape[0]
    cdef Py_ssize_t n = images.shape[1]
    cdef Py_ssize_t i, j, r
    cdef double dy, dx, acc, cos_t, sin_t
    cdef double cy = (n - 1) / 2.0
    cdef double[::1] cos_a = np.empty(n_rot)
    cdef double[::1] sin_a = np.empty(n_rot)
    if workers < 1:
        workers = 1
    for r in range(n_rot):
        # back-rotation by -angle: sample the source at R(+angle)(p - c) + c
        cos_t = cos(-angles[r])
        sin_t = sin(-angles[r])
        if fabs(cos_t) < 1e-15:
            cos_t = 0.0
        if fabs(sin_t) < 1e-15:
            sin_t = 0.0
        cos_a[r] = cos_t
        sin_a[r] = sin_t
    for i in prange(n, nogil=True, schedule="static", num_threads=workers):
        dy = i - cy
        for j in range(n):
            dx = j - cy
            acc = 0.0
            for r in range(n_rot):
                acc = acc + _bisample(images[r], cy + cos_a[r] * dy + sin_a[r] * dx,
                                      cy - sin_a[r] * dy + cos_a[r] * dx, n, n)
            out[i, j] += acc
    return None
