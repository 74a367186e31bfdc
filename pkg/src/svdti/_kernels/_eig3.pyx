# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython implementation of the batched 3x3 symmetric eigensolver.

Mirrors ``_eig3_np``: closed-form characteristic cubic, cross-product
eigenvectors, residual-gated cyclic-Jacobi fallback.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport acos, cos, fabs, sqrt

cnp.import_array()

cdef double RESIDUAL_TOL = 1e-13
cdef double TWO_PI_3 = 2.0943951023931953


cdef inline void _cross(const double* a, const double* b, double* out) noexcept nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef inline double _dot(const double* a, const double* b) noexcept nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef bint _cross_eigenvector(const double b[3][3], double w, double* out) noexcept nogil:
    """Largest cross product of rows of (b - w*I); False if degenerate."""
    cdef double r0[3]
    cdef double r1[3]
    cdef double r2[3]
    cdef double c01[3]
    cdef double c02[3]
    cdef double c12[3]
    cdef double n01, n02, n12, best, nrm
    cdef int k
    for k in range(3):
        r0[k] = b[0][k]
        r1[k] = b[1][k]
        r2[k] = b[2][k]
    r0[0] -= w
    r1[1] -= w
    r2[2] -= w
    _cross(r0, r1, c01)
    _cross(r0, r2, c02)
    _cross(r1, r2, c12)
    n01 = _dot(c01, c01)
    n02 = _dot(c02, c02)
    n12 = _dot(c12, c12)
    best = n01
    for k in range(3):
        out[k] = c01[k]
    if n02 > best:
        best = n02
        for k in range(3):
            out[k] = c02[k]
    if n12 > best:
        best = n12
        for k in range(3):
            out[k] = c12[k]
    if best <= 0.0 or best != best:
        return False
    nrm = sqrt(best)
    for k in range(3):
        out[k] /= nrm
    return True


cdef void _jacobi3(const double b[3][3], double* w, double v[3][3]) noexcept nogil:
    """Cyclic Jacobi; eigenvalues into w, eigenvector ROWS into v, descending."""
    cdef double a[3][3]
    cdef double vc[3][3]  # columns are eigenvectors while iterating
    cdef double tmp[3][3]
    cdef double off, apq, h, tau, t, c, s
    cdef int sweep, p, q, i, j, key
    cdef int pairs[3][2]
    cdef int idx[3]
    cdef double kv
    pairs[0][0] = 0; pairs[0][1] = 1
    pairs[1][0] = 0; pairs[1][1] = 2
    pairs[2][0] = 1; pairs[2][1] = 2
    for i in range(3):
        for j in range(3):
            a[i][j] = b[i][j]
            vc[i][j] = 1.0 if i == j else 0.0
    for sweep in range(50):
        off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]
        if off <= 1e-60:
            break
        for i in range(3):
            p = pairs[i][0]
            q = pairs[i][1]
            apq = a[p][q]
            if apq == 0.0:
                continue
            h = a[q][q] - a[p][p]
            if fabs(h) + 100.0 * fabs(apq) == fabs(h):
                t = apq / h  # below-precision angle; tau would overflow
            else:
                tau = h / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + sqrt(1.0 + tau * tau))
            c = 1.0 / sqrt(1.0 + t * t)
            s = t * c
            # a <- J^T a J with J the (p, q) rotation
            for j in range(3):
                tmp[0][j] = a[p][j]
                tmp[1][j] = a[q][j]
            for j in range(3):
                a[p][j] = c * tmp[0][j] - s * tmp[1][j]
                a[q][j] = s * tmp[0][j] + c * tmp[1][j]
            for j in range(3):
                tmp[0][j] = a[j][p]
                tmp[1][j] = a[j][q]
            for j in range(3):
                a[j][p] = c * tmp[0][j] - s * tmp[1][j]
                a[j][q] = s * tmp[0][j] + c * tmp[1][j]
            for j in range(3):
                tmp[0][j] = vc[j][p]
                tmp[1][j] = vc[j][q]
            for j in range(3):
                vc[j][p] = c * tmp[0][j] - s * tmp[1][j]
                vc[j][q] = s * tmp[0][j] + c * tmp[1][j]
    # stable descending sort of the diagonal
    idx[0] = 0; idx[1] = 1; idx[2] = 2
    for j in range(1, 3):
        key = idx[j]
        kv = a[key][key]
        i = j - 1
        while i >= 0 and a[idx[i]][idx[i]] < kv:
            idx[i + 1] = idx[i]
            i -= 1
        idx[i + 1] = key
    for i in range(3):
        w[i] = a[idx[i]][idx[i]]
        for j in range(3):
            v[i][j] = vc[j][idx[i]]


cdef void _eig3_one(const double* comp, double* evals, double* evecs) noexcept nogil:
    cdef double scale, off, q, p2, p, half_det, phi
    cdef double w[3]
    cdef double b[3][3]
    cdef double vrows[3][3]
    cdef double v0[3]
    cdef double v1[3]
    cdef double v2[3]
    cdef double y[3]
    cdef double d, resid, wmax, r
    cdef int i, j, k, key
    cdef int idx[3]
    cdef double kv
    cdef bint ok

    scale = 0.0
    for i in range(6):
        d = fabs(comp[i])
        if d > scale:
            scale = d
    if scale == 0.0 or scale != scale:
        for i in range(3):
            evals[i] = 0.0
            for j in range(3):
                evecs[3 * i + j] = 1.0 if i == j else 0.0
        return

    b[0][0] = comp[0] / scale
    b[1][1] = comp[1] / scale
    b[2][2] = comp[2] / scale
    b[0][1] = b[1][0] = comp[3] / scale
    b[0][2] = b[2][0] = comp[4] / scale
    b[1][2] = b[2][1] = comp[5] / scale

    off = b[0][1] * b[0][1] + b[0][2] * b[0][2] + b[1][2] * b[1][2]
    if off == 0.0:
        # exactly diagonal: stable descending sort of the diagonal
        idx[0] = 0; idx[1] = 1; idx[2] = 2
        for j in range(1, 3):
            key = idx[j]
            kv = b[key][key]
            i = j - 1
            while i >= 0 and b[idx[i]][idx[i]] < kv:
                idx[i + 1] = idx[i]
                i -= 1
            idx[i + 1] = key
        for i in range(3):
            evals[i] = b[idx[i]][idx[i]] * scale
            for j in range(3):
                evecs[3 * i + j] = 1.0 if j == idx[i] else 0.0
        return

    q = (b[0][0] + b[1][1] + b[2][2]) / 3.0
    p2 = (b[0][0] - q) ** 2 + (b[1][1] - q) ** 2 + (b[2][2] - q) ** 2 + 2.0 * off
    p = sqrt(p2 / 6.0)
    # half the determinant of (B - q I) / p
    half_det = (
        (b[0][0] - q) * ((b[1][1] - q) * (b[2][2] - q) - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * (b[2][2] - q) - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - (b[1][1] - q) * b[2][0])
    ) / (2.0 * p * p * p)
    if half_det > 1.0:
        half_det = 1.0
    elif half_det < -1.0:
        half_det = -1.0
    phi = acos(half_det) / 3.0
    w[0] = q + 2.0 * p * cos(phi)
    w[2] = q + 2.0 * p * cos(phi + TWO_PI_3)
    # trace identity; clamp so roundoff cannot break the ordering
    w[1] = 3.0 * q - w[0] - w[2]
    if w[1] < w[2]:
        w[1] = w[2]
    elif w[1] > w[0]:
        w[1] = w[0]

    ok = _cross_eigenvector(b, w[0], v0)
    if ok:
        ok = _cross_eigenvector(b, w[2], v2)
    if ok:
        d = _dot(v2, v0)
        for k in range(3):
            v2[k] -= d * v0[k]
        d = sqrt(_dot(v2, v2))
        if d <= 0.0 or d != d:
            ok = False
        else:
            for k in range(3):
                v2[k] /= d
            _cross(v2, v0, v1)
    if ok:
        for k in range(3):
            vrows[0][k] = v0[k]
            vrows[1][k] = v1[k]
            vrows[2][k] = v2[k]
        resid = 0.0
        for i in range(3):
            for k in range(3):
                y[k] = (
                    b[k][0] * vrows[i][0]
                    + b[k][1] * vrows[i][1]
                    + b[k][2] * vrows[i][2]
                ) - w[i] * vrows[i][k]
                r = fabs(y[k])
                if r > resid:
                    resid = r
        wmax = 1.0
        if fabs(w[0]) > wmax:
            wmax = fabs(w[0])
        if fabs(w[2]) > wmax:
            wmax = fabs(w[2])
        if resid != resid or resid > RESIDUAL_TOL * wmax:
            ok = False
    if not ok:
        _jacobi3(b, w, vrows)

    for i in range(3):
        evals[i] = w[i] * scale
        for j in range(3):
            evecs[3 * i + j] = vrows[i][j]


def eig3_batch(comps):
    """Eigendecompose a batch of symmetric 3x3 matrices.

    Parameters
    ----------
    comps : ndarray, shape (n, 6)
        Unique components per matrix, ordered [a00, a11, a22, a01, a02, a12].

    Returns
    -------
    evals : ndarray, shape (n, 3)
        Eigenvalues in descending order.
    evecs : ndarray, shape (n, 3, 3)
        ``evecs[i, k]`` is the unit eigenvector paired with ``evals[i, k]``;
        the three rows are orthonormal.
    """
    comps = np.ascontiguousarray(comps, dtype=np.float64)
    if comps.ndim != 2 or comps.shape[1] != 6:
        raise ValueError(f"expected component array of shape (n, 6), got {comps.shape}")
    cdef Py_ssize_t n = comps.shape[0]
    evals = np.zeros((n, 3), dtype=np.float64)
    evecs = np.empty((n, 3, 3), dtype=np.float64)
    if n == 0:
        return evals, evecs
    cdef double[:, ::1] cv = comps
    cdef double[:, ::1] wv = evals
    cdef double[:, :, ::1] vv = evecs
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            _eig3_one(&cv[i, 0], &wv[i, 0], &vv[i, 0, 0])
    return evals, evecs
