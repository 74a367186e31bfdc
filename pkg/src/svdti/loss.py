"""Patch loss: relative data error plus a singular-value penalty.

For a predicted and a ground-truth parameter matrix (each N^3 x 3, columns
FA/MD/AD), the loss is

    total = |gt - pred|_F^2 / |gt|_F^2
            + lam * sum_k (sigma_k(gt) - sigma_k(pred))^2 / sum_k sigma_k(gt)^2.

Singular values come from the eigendecomposition of the 3x3 Gram matrix
A^T A, which the 3-column shape makes exact and cheap. The penalty gradient
uses d sigma_k / d A = u_k v_k^T; when a predicted singular value vanishes
(below ``SIGMA_ZERO_TOL``) the zero subgradient is selected for that term,
a deterministic member of the subdifferential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import eig3_batch
from .core import _readonly

SIGMA_ZERO_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SingularTriple:
    """Singular values with paired singular vectors, as columns.

    ``values`` is descending and non-negative. ``left_vectors`` is (n, 3)
    and ``right_vectors`` is (3, 3); column k of each pairs with
    ``values[k]``. Left columns are zero where the singular value is below
    ``SIGMA_ZERO_TOL`` (left vectors are only defined for positive values).
    """

    values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        left = np.asarray(self.left_vectors, dtype=np.float64)
        right = np.asarray(self.right_vectors, dtype=np.float64)
        if values.shape != (3,) or right.shape != (3, 3) or left.ndim != 2 or left.shape[1] != 3:
            raise ValueError("singular triple shapes must be (3,), (n, 3), (3, 3)")
        if not (values[0] >= values[1] >= values[2] >= 0):
            raise ValueError(f"singular values must be descending and >= 0, got {values}")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "left_vectors", _readonly(left))
        object.__setattr__(self, "right_vectors", _readonly(right))


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components; ``total`` is exactly data_term + lam * reg_term.

    Non-finite components are representable (a diverging run produces them)
    and exempt from the identity check, which is meaningless on nan/inf;
    consumers gate on ``math.isfinite(total)``.
    """

    data_term: float
    reg_term: float
    lam: float
    total: float

    def __post_init__(self):
        parts = (self.data_term, self.reg_term, self.lam, self.total)
        if all(math.isfinite(p) for p in parts):
            if self.total != self.data_term + self.lam * self.reg_term:
                raise ValueError("total must equal data_term + lam * reg_term exactly")

    def to_dict(self) -> dict:
        return {
            "data_term": self.data_term,
            "reg_term": self.reg_term,
            "lambda": self.lam,
            "total": self.total,
        }


def _breakdown(data_term: float, reg_term: float, lam: float) -> LossBreakdown:
    return LossBreakdown(
        data_term=data_term, reg_term=reg_term, lam=lam,
        total=data_term + lam * reg_term,
    )


def _check_matrix(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


def _gram_components(mats: np.ndarray) -> np.ndarray:
    """(B, n, 3) -> (B, 6) Gram components (G00, G11, G22, G01, G02, G12)."""
    g = np.einsum("bnr,bnc->brc", mats, mats)
    return np.stack(
        [g[:, 0, 0], g[:, 1, 1], g[:, 2, 2], g[:, 0, 1], g[:, 0, 2], g[:, 1, 2]],
        axis=-1,
    )


def _batch_svd(mats: np.ndarray) -> tuple:
    """Singular values (desc) plus left/right vectors as columns, batched."""
    evals, evecs = eig3_batch(_gram_components(mats))
    sigma = np.sqrt(np.maximum(evals, 0.0))
    v_cols = evecs.transpose(0, 2, 1)
    av = mats @ v_cols
    safe = np.maximum(sigma, 1e-300)
    u_cols = np.where((sigma >= SIGMA_ZERO_TOL)[:, None, :], av / safe[:, None, :], 0.0)
    return sigma, u_cols, v_cols


def svd_3col(matrix: np.ndarray) -> SingularTriple:
    """Decompose one (n, 3) matrix via its 3x3 Gram matrix."""
    a = _check_matrix(matrix, "matrix")
    sigma, u, v = _batch_svd(a[None])
    return SingularTriple(values=sigma[0], left_vectors=u[0], right_vectors=v[0])


def _batch_core(preds: np.ndarray, gts: np.ndarray, lam: float) -> tuple:
    """Per-patch (data, reg, grad) for stacked (B, n, 3) inputs."""
    gt_norm2 = np.einsum("bnc,bnc->b", gts, gts)
    bad = np.flatnonzero(gt_norm2 == 0)
    if bad.size:
        raise ValueError(
            f"degenerate patch at index {int(bad[0])}: ground-truth matrix is "
            f"identically zero, so both loss denominators vanish"
        )
    diff = gts - preds
    data = np.einsum("bnc,bnc->b", diff, diff) / gt_norm2
    sig_gt, _, _ = _batch_svd(gts)
    sig_pred, u_cols, v_cols = _batch_svd(preds)
    sig_den = (sig_gt**2).sum(axis=1)
    sig_diff = sig_gt - sig_pred
    reg = (sig_diff**2).sum(axis=1) / sig_den
    grad = (-2.0 / gt_norm2)[:, None, None] * diff
    coef = -2.0 * sig_diff / sig_den[:, None]
    grad = grad + float(lam) * np.einsum("bk,bnk,bck->bnc", coef, u_cols, v_cols)
    return data, reg, grad


def loss_and_grad(pred: np.ndarray, gt: np.ndarray, lam: float) -> tuple:
    """Loss breakdown and gradient wrt ``pred`` for one patch pair.

    Raises
    ------
    ValueError
        If the ground-truth matrix is identically zero (both denominators
        would vanish); callers are expected to skip such patches.
    """
    pred = _check_matrix(pred, "pred")
    gt = _check_matrix(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} does not match gt shape {gt.shape}")
    data, reg, grad = _batch_core(pred[None], gt[None], lam)
    return _breakdown(float(data[0]), float(reg[0]), float(lam)), grad[0]


def batch_loss(preds, gts, lam: float) -> tuple:
    """Equal-weight mean loss over a batch, with matching gradients.

    ``preds`` and ``gts`` are equal-length sequences (or stacked arrays) of
    (n, 3) matrices. Returns (LossBreakdown of the means, grads) where
    ``grads[i]`` is the gradient of the mean loss wrt ``preds[i]`` (the
    per-patch gradient divided by the batch size).
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.size == 0:
        raise ValueError("batch is empty")
    if preds.shape != gts.shape or preds.ndim != 3 or preds.shape[2] != 3:
        raise ValueError(
            f"expected matching (B, n, 3) stacks, got {preds.shape} and {gts.shape}"
        )
    data, reg, grad = _batch_core(preds, gts, lam)
    n = preds.shape[0]
    breakdown = _breakdown(float(data.mean()), float(reg.mean()), float(lam))
    return breakdown, grad / n
