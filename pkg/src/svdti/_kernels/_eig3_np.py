"""Vectorized NumPy implementation of the 3x3 symmetric eigensolver.

Same algorithm as the Cython backend: trigonometric closed form for the
characteristic cubic, eigenvectors from row cross products of (A - w*I),
and a per-item cyclic-Jacobi fallback whenever the residual check fails
(near-degenerate eigenvalues, exact diagonal matrices with ties, ...).
"""

import numpy as np

# Residual gate on the scaled matrix (max |entry| == 1); items failing it
# are recomputed with Jacobi rotations.
_RESIDUAL_TOL = 1e-13
_TWO_PI_3 = 2.0 * np.pi / 3.0


def _comps_to_mats(comps):
    """(n, 6) component rows [xx, yy, zz, xy, xz, yz] -> (n, 3, 3) matrices."""
    n = comps.shape[0]
    m = np.empty((n, 3, 3), dtype=np.float64)
    m[:, 0, 0] = comps[:, 0]
    m[:, 1, 1] = comps[:, 1]
    m[:, 2, 2] = comps[:, 2]
    m[:, 0, 1] = m[:, 1, 0] = comps[:, 3]
    m[:, 0, 2] = m[:, 2, 0] = comps[:, 4]
    m[:, 1, 2] = m[:, 2, 1] = comps[:, 5]
    return m


def _det3(m):
    return (
        m[:, 0, 0] * (m[:, 1, 1] * m[:, 2, 2] - m[:, 1, 2] * m[:, 2, 1])
        - m[:, 0, 1] * (m[:, 1, 0] * m[:, 2, 2] - m[:, 1, 2] * m[:, 2, 0])
        + m[:, 0, 2] * (m[:, 1, 0] * m[:, 2, 1] - m[:, 1, 1] * m[:, 2, 0])
    )


def _cross_eigenvector(b, w):
    """Best cross-product eigenvector of each (b - w*I), unnormalized."""
    m = b.copy()
    idx = np.arange(3)
    m[:, idx, idx] -= w[:, None]
    c01 = np.cross(m[:, 0, :], m[:, 1, :])
    c02 = np.cross(m[:, 0, :], m[:, 2, :])
    c12 = np.cross(m[:, 1, :], m[:, 2, :])
    cand = np.stack([c01, c02, c12], axis=1)  # (n, 3, 3)
    norms2 = np.sum(cand * cand, axis=2)
    best = np.argmax(norms2, axis=1)
    return cand[np.arange(b.shape[0]), best, :]


def _normalize_rows(v):
    with np.errstate(divide="ignore", invalid="ignore"):
        return v / np.sqrt(np.sum(v * v, axis=1))[:, None]


def _jacobi3(a):
    """Cyclic Jacobi on one symmetric 3x3 matrix; returns (evals, evecs rows)."""
    a = a.copy()
    v = np.eye(3)
    for _ in range(50):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= 1e-60:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            h = a[q, q] - a[p, p]
            if abs(h) + 100.0 * abs(apq) == abs(h):
                t = apq / h  # below-precision angle; tau would overflow
            else:
                tau = h / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            j = np.eye(3)
            j[p, p] = j[q, q] = c
            j[p, q] = s
            j[q, p] = -s
            a = j.T @ a @ j
            v = v @ j
    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], v[:, order].T


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
    n = comps.shape[0]
    evals = np.zeros((n, 3), dtype=np.float64)
    evecs = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if n == 0:
        return evals, evecs

    scale = np.max(np.abs(comps), axis=1)
    active = scale > 0.0
    if not np.any(active):
        return evals, evecs

    b6 = comps[active] / scale[active, None]
    b = _comps_to_mats(b6)
    m = b.shape[0]
    w = np.empty((m, 3), dtype=np.float64)
    v = np.empty((m, 3, 3), dtype=np.float64)

    off = b6[:, 3] ** 2 + b6[:, 4] ** 2 + b6[:, 5] ** 2
    diag_items = off == 0.0

    if np.any(diag_items):
        d = b6[diag_items, :3]
        order = np.argsort(-d, axis=1, kind="stable")
        w[diag_items] = np.take_along_axis(d, order, axis=1)
        v[diag_items] = np.eye(3)[order]

    gen = ~diag_items
    if np.any(gen):
        bg = b[gen]
        b6g = b6[gen]
        q = (b6g[:, 0] + b6g[:, 1] + b6g[:, 2]) / 3.0
        p2 = (
            (b6g[:, 0] - q) ** 2
            + (b6g[:, 1] - q) ** 2
            + (b6g[:, 2] - q) ** 2
            + 2.0 * off[gen]
        )
        p = np.sqrt(p2 / 6.0)
        c = (bg - q[:, None, None] * np.eye(3)) / p[:, None, None]
        half_det = np.clip(_det3(c) / 2.0, -1.0, 1.0)
        phi = np.arccos(half_det) / 3.0
        w0 = q + 2.0 * p * np.cos(phi)
        w2 = q + 2.0 * p * np.cos(phi + _TWO_PI_3)
        # trace identity; clamp so roundoff cannot break the ordering
        w1 = np.clip(3.0 * q - w0 - w2, w2, w0)
        wg = np.stack([w0, w1, w2], axis=1)

        v0 = _normalize_rows(_cross_eigenvector(bg, w0))
        v2 = _cross_eigenvector(bg, w2)
        v2 = _normalize_rows(v2 - np.sum(v2 * v0, axis=1)[:, None] * v0)
        v1 = np.cross(v2, v0)
        vg = np.stack([v0, v1, v2], axis=1)

        w[gen] = wg
        v[gen] = vg

    # Residual gate: ||B v_k - w_k v_k||_inf per item, on the scaled matrix.
    bv = np.einsum("nij,nkj->nki", b, v)
    resid = np.max(np.abs(bv - w[:, :, None] * v), axis=(1, 2))
    wmax = np.maximum(1.0, np.max(np.abs(w), axis=1))
    bad = ~np.isfinite(resid) | (resid > _RESIDUAL_TOL * wmax)
    for i in np.nonzero(bad)[0]:
        w[i], v[i] = _jacobi3(b[i])

    evals[active] = w * scale[active, None]
    evecs[active] = v
    return evals, evecs
