"""Log-linear tensor fitting and scalar metric derivation.

The classical route: ordinary least squares on ln S_i = ln S0 - b_i g_i^T D
g_i per voxel, then FA / MD / AD from the tensor eigenvalues. Serves both
as the comparison method and as the ground-truth generator for training.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._kernels import eig3_batch
from .core import DwiVolume, MetricMaps, _readonly
from .phantom import TensorField

# Fraction of the per-voxel b0 mean used as the positivity floor before log.
SIGNAL_CLAMP = 1e-8

# Relative smallest-singular-value threshold for declaring the design rank
# deficient.
RANK_TOL = 1e-12

ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Descending eigenvalues and matching orthonormal eigenvector rows."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __post_init__(self):
        evals = np.asarray(self.eigenvalues, dtype=np.float64)
        evecs = np.asarray(self.eigenvectors, dtype=np.float64)
        if evals.shape != (3,) or evecs.shape != (3, 3):
            raise ValueError(
                f"expected shapes (3,) and (3, 3), got {evals.shape} and {evecs.shape}"
            )
        if not (evals[0] >= evals[1] >= evals[2]):
            raise ValueError(f"eigenvalues must be descending, got {evals}")
        gram = evecs @ evecs.T
        if np.abs(gram - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("eigenvectors must be orthonormal")
        object.__setattr__(self, "eigenvalues", _readonly(evals))
        object.__setattr__(self, "eigenvectors", _readonly(evecs))


@dataclass(frozen=True)
class FitReport:
    """Bookkeeping from one least-squares fit."""

    total_masked: int
    fitted_voxels: int
    flagged_voxels: int
    condition_number: float
    residual_rms_mean: float
    residual_rms_max: float

    def to_dict(self) -> dict:
        return asdict(self)


def eigen3_sym(tensor) -> EigenSystem:
    """Eigendecompose one symmetric tensor given as its 6 components.

    Component order is (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
    """
    comps = np.asarray(tensor, dtype=np.float64)
    if comps.shape != (6,):
        raise ValueError(f"expected 6 components, got shape {comps.shape}")
    if not np.all(np.isfinite(comps)):
        raise ValueError("tensor components must be finite")
    evals, evecs = eig3_batch(comps[None, :])
    return EigenSystem(eigenvalues=evals[0], eigenvectors=evecs[0])


def design_matrix(scheme) -> np.ndarray:
    """Rows [1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz].

    Unknown order: (ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
    """
    b = scheme.bvals
    g = scheme.bvecs
    return np.column_stack([
        np.ones_like(b),
        -b * g[:, 0] ** 2,
        -b * g[:, 1] ** 2,
        -b * g[:, 2] ** 2,
        -2.0 * b * g[:, 0] * g[:, 1],
        -2.0 * b * g[:, 0] * g[:, 2],
        -2.0 * b * g[:, 1] * g[:, 2],
    ])


def fit_tensor_ols(volume: DwiVolume, *, with_report: bool = False):
    """Per-voxel OLS fit of the log-linearized tensor model.

    Signals are floored at ``SIGNAL_CLAMP`` times the voxel's mean b0 value
    before the log; voxels whose floor is not positive cannot be fitted and
    are masked out of the result. Returns a TensorField (with PSD checking
    off, since noisy fits may carry negative eigenvalues), or the pair
    (field, FitReport) when ``with_report`` is true.

    Raises
    ------
    ValueError
        If the scheme lacks a b0 or 6 diffusion-weighted entries, or the
        design matrix is rank deficient.
    """
    scheme = volume.scheme
    if scheme.b0_indices.size < 1:
        raise ValueError("fitting requires at least one b0 measurement")
    if scheme.dwi_indices.size < 6:
        raise ValueError(
            f"fitting requires at least 6 diffusion-weighted measurements, "
            f"scheme has {scheme.dwi_indices.size}"
        )
    a = design_matrix(scheme)
    sv = np.linalg.svd(a, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    if sv[-1] <= sv[0] * RANK_TOL:
        raise ValueError(
            f"design matrix is rank deficient for tensor fitting "
            f"(condition number {cond:.3e})"
        )

    mask = volume.mask
    dims = volume.dims
    signals = volume.data[mask].astype(np.float64)
    n_masked = signals.shape[0]
    b0_mean = signals[:, scheme.b0_indices].mean(axis=1)
    floor = SIGNAL_CLAMP * b0_mean
    clamped = np.maximum(signals, floor[:, None])
    ok = np.all(clamped > 0, axis=1) & np.all(np.isfinite(clamped), axis=1)

    coeffs = np.zeros((7, n_masked))
    resid_rms = np.zeros(0)
    if ok.any():
        y = np.log(clamped[ok])
        sol, *_ = np.linalg.lstsq(a, y.T, rcond=None)
        coeffs[:, ok] = sol
        resid = a @ sol - y.T
        resid_rms = np.sqrt(np.mean(resid**2, axis=0))

    tensors = np.zeros(dims + (6,))
    s0 = np.zeros(dims)
    tensors[mask] = coeffs[1:7].T
    s0[mask] = np.where(ok, np.exp(coeffs[0]), 0.0)
    out_mask = mask.copy()
    out_mask[mask] = ok

    field = TensorField(tensors=tensors, s0=s0, mask=out_mask, check_psd=False)
    if not with_report:
        return field
    report = FitReport(
        total_masked=int(n_masked),
        fitted_voxels=int(ok.sum()),
        flagged_voxels=int(n_masked - ok.sum()),
        condition_number=cond,
        residual_rms_mean=float(resid_rms.mean()) if resid_rms.size else 0.0,
        residual_rms_max=float(resid_rms.max()) if resid_rms.size else 0.0,
    )
    return field, report


def metrics_from_eigenvalues(evals: np.ndarray) -> tuple:
    """(fa, md, ad) from descending eigenvalue rows.

    MD is the eigenvalue mean, AD the largest eigenvalue, and FA the
    normalized eigenvalue dispersion, zero when all eigenvalues vanish.
    FA is computed from the raw (possibly negative) eigenvalues and then
    clipped into [0, 1].
    """
    evals = np.asarray(evals, dtype=np.float64)
    md = evals.mean(axis=-1)
    ad = evals[..., 0]
    num = ((evals - md[..., None]) ** 2).sum(axis=-1)
    den = (evals**2).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        fa = np.sqrt(1.5 * num / den)
    fa = np.where(den > 0, fa, 0.0)
    return np.clip(fa, 0.0, 1.0), md, ad


def derive_metrics(field: TensorField) -> MetricMaps:
    """FA, MD, and AD maps of a tensor field; zeros outside the mask."""
    dims = field.dims
    fa = np.zeros(dims)
    md = np.zeros(dims)
    ad = np.zeros(dims)
    mask = field.mask
    if mask.any():
        evals, _ = eig3_batch(field.tensors[mask])
        fa_in, md_in, ad_in = metrics_from_eigenvalues(evals)
        fa[mask] = fa_in
        md[mask] = md_in
        ad[mask] = ad_in
    return MetricMaps(fa=fa, md=md, ad=ad, mask=mask)
