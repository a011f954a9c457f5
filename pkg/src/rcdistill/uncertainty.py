"""Relative-error uncertainty maps and softmax rectification of two of them.

The uncertainty of a prediction ``p`` against a reference ``g`` is

    U = 1 - exp(-|p - g| / (beta * |p + g| + EPS))

which lies in [0, 1), is symmetric in (p, g) and invariant to rescaling both.
It is defined only where ``g > 0``; elsewhere it is 0 by convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import require_same_shape

EPS = 1e-12


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")


def uncertainty_map(pred: np.ndarray, gt: np.ndarray, beta: float = 1.0) -> np.ndarray:
    require_same_shape(pred, gt, ("pred", "gt"))
    _check_beta(beta)
    valid = gt > 0
    ratio = np.abs(pred - gt) / (beta * np.abs(pred + gt) + EPS)
    return np.where(valid, -np.expm1(-ratio), 0.0)


def uncertainty_map_grad(pred: np.ndarray, gt: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Elementwise dU/dpred.  Returns the subgradient 0 where pred == gt."""
    require_same_shape(pred, gt, ("pred", "gt"))
    _check_beta(beta)
    diff = pred - gt
    total = pred + gt
    num = np.abs(diff)
    den = beta * np.abs(total) + EPS
    ratio = num / den
    d_ratio = (np.sign(diff) * den - num * beta * np.sign(total)) / den**2
    grad = np.exp(-ratio) * d_ratio
    return np.where(gt > 0, grad, 0.0)


@dataclass(frozen=True)
class RectifiedWeights:
    w_dense: np.ndarray
    w_sparse: np.ndarray
    valid_dense: np.ndarray
    valid_sparse: np.ndarray

    @property
    def both(self) -> np.ndarray:
        return self.valid_dense & self.valid_sparse


def rectify(u_dense, u_sparse, valid_dense, valid_sparse) -> RectifiedWeights:
    """Two-way softmax of the uncertainties on pixels where both sources are valid.

    A pixel valid in only one source gives that source weight 1; a pixel valid
    in neither gets 0 for both.
    """
    require_same_shape(u_dense, u_sparse, ("u_dense", "u_sparse"))
    valid_dense = np.asarray(valid_dense, dtype=bool)
    valid_sparse = np.asarray(valid_sparse, dtype=bool)
    require_same_shape(u_dense, valid_dense, ("u_dense", "valid_dense"))
    require_same_shape(u_dense, valid_sparse, ("u_dense", "valid_sparse"))
    both = valid_dense & valid_sparse
    # sigmoid of the difference is the two-way softmax; U in [0, 1) so no overflow
    soft_d = 1.0 / (1.0 + np.exp(u_sparse - u_dense))
    soft_s = 1.0 / (1.0 + np.exp(u_dense - u_sparse))
    w_d = np.where(both, soft_d, valid_dense.astype(np.float64))
    w_s = np.where(both, soft_s, valid_sparse.astype(np.float64))
    return RectifiedWeights(w_d, w_s, valid_dense, valid_sparse)
