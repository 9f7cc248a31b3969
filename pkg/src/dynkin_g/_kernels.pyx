# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled backward-step kernel: implicit one-step solves for a whole layer."""

from libc.math cimport fabs

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def step_layer(
    double[::1] y_next,
    long[:, ::1] child_local,
    double[::1] p,
    double[::1] dw,
    long[::1] branch_jump,
    double[::1] lam_delta,
    double delta,
    double c0,
    double a,
    double b,
    double b_abs,
    double[::1] gn,
    double tol=1e-12,
    int max_iter=100,
):
    cdef Py_ssize_t width = child_local.shape[0]
    cdef Py_ssize_t B = child_local.shape[1]
    cdef Py_ssize_t J = lam_delta.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(width, dtype=np.float64)
    cdef double[::1] y = out
    cdef Py_ssize_t n, bi, j, it
    cdef double ey, z, yv, drift0, base, ad, y_cur, y_new, d
    cdef double ell_j
    cdef int o
    cdef bint converged

    ad = delta * a
    for n in range(width):
        ey = 0.0
        z = 0.0
        for bi in range(B):
            yv = y_next[child_local[n, bi]]
            ey += p[bi] * yv
            z += p[bi] * yv * dw[bi]
        z /= delta
        drift0 = c0 + b * z + b_abs * fabs(z)
        for j in range(J):
            ell_j = 0.0
            for bi in range(B):
                o = <int> branch_jump[bi]
                yv = y_next[child_local[n, bi]]
                if o == <int> j:
                    ell_j += p[bi] * yv * (1.0 - lam_delta[j])
                else:
                    ell_j += p[bi] * yv * (-lam_delta[j])
            ell_j /= lam_delta[j]
            drift0 += gn[j] * ell_j

        base = ey + delta * drift0
        y_cur = ey
        converged = False
        for it in range(max_iter):
            y_new = base + ad * y_cur
            d = fabs(y_new - y_cur)
            y_cur = y_new
            if d <= tol:
                converged = True
                break
        if not converged:
            raise RuntimeError(
                "one-step Picard iteration failed to converge within "
                f"{max_iter} iterations (was the driver validated?)"
            )
        y[n] = y_cur
    return out
