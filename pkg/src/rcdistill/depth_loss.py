"""Uncertainty-rectified depth loss over dense + sparse supervision, and the total objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .losses import LossResult
from .tensor import require_same_shape
from .uncertainty import RectifiedWeights, rectify, uncertainty_map, uncertainty_map_grad

log = logging.getLogger(__name__)

MIN_PRED = 1e-6


class EmptySupervisionError(ValueError):
    """Neither the dense nor the sparse map has a valid pixel."""


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Weights of the camera, radar, decoder and inter-depth distillation terms."""

    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    gamma4: float = 1.0

    def __post_init__(self):
        for name, g in zip(("gamma1", "gamma2", "gamma3", "gamma4"), self.as_tuple()):
            if not (math.isfinite(g) and g >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {g}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.gamma1, self.gamma2, self.gamma3, self.gamma4)

    @classmethod
    def from_flags(cls, kd_i: bool, kd_r: bool, kd_dec: bool, kd_d: bool, base=(1.0, 1.0, 1.0, 1.0)):
        flags = (kd_i, kd_r, kd_dec, kd_d)
        return cls(*(g if on else 0.0 for g, on in zip(base, flags)))


def _prepare(pred, dense, sparse):
    require_same_shape(pred, dense, ("pred", "dense"))
    require_same_shape(pred, sparse, ("pred", "sparse"))
    valid_d = dense > 0
    valid_s = sparse > 0
    if not valid_d.any() and not valid_s.any():
        raise EmptySupervisionError("no valid supervision: dense and sparse maps are both empty")
    supervised = valid_d | valid_s
    low = supervised & (pred < MIN_PRED)
    if low.any():
        log.warning("clamping %d non-positive predictions to %g", int(low.sum()), MIN_PRED)
        pred = np.where(low, MIN_PRED, pred)
    return pred, valid_d, valid_s


def rectified_weights(pred, dense, sparse, beta: float = 1.0) -> RectifiedWeights:
    pred, valid_d, valid_s = _prepare(pred, dense, sparse)
    u_d = uncertainty_map(pred, dense, beta)
    u_s = uncertainty_map(pred, sparse, beta)
    return rectify(u_d, u_s, valid_d, valid_s)


def urdl_fixed(pred, dense, sparse, weights: RectifiedWeights) -> LossResult:
    """The two normalized weighted-L1 terms with the rectified weights held constant."""
    pred, valid_d, valid_s = _prepare(pred, dense, sparse)
    value = 0.0
    grad = np.zeros_like(pred)
    for gt, w, valid in ((dense, weights.w_dense, valid_d), (sparse, weights.w_sparse, valid_s)):
        n = int(valid.sum())
        if n == 0:
            continue
        diff = pred - gt
        value += float(np.sum(np.where(valid, w * np.abs(diff), 0.0))) / n
        grad += np.where(valid, w * np.sign(diff), 0.0) / n
    return LossResult(value, {"pred": grad})


def urdl(pred, dense, sparse, beta: float = 1.0, detach_u: bool = True) -> LossResult:
    """Depth loss against a dense and a sparse reference, weighted by rectified uncertainty.

    Each term is normalized by its own count of valid pixels; an empty source
    contributes 0.  Predictions below 1e-6 on supervised pixels are clamped.
    """
    pred = np.asarray(pred, dtype=np.float64)
    pred, valid_d, valid_s = _prepare(pred, dense, sparse)
    weights = rectified_weights(pred, dense, sparse, beta)
    result = urdl_fixed(pred, dense, sparse, weights)
    if detach_u:
        return result
    both = weights.both
    n_d = int(valid_d.sum())
    n_s = int(valid_s.sum())
    # only both-valid pixels have prediction-dependent weights
    du_d = uncertainty_map_grad(pred, dense, beta)
    du_s = uncertainty_map_grad(pred, sparse, beta)
    dw_d = weights.w_dense * weights.w_sparse * (du_d - du_s)
    err_d = np.abs(pred - dense) / n_d if n_d else 0.0
    err_s = np.abs(pred - sparse) / n_s if n_s else 0.0
    result.grads["pred"] = result.grads["pred"] + np.where(both, dw_d * (err_d - err_s), 0.0)
    return result


COMPONENTS = ("depth", "kd_i", "kd_r", "kd_dec", "kd_d")


def total_loss(
    depth: LossResult,
    kd_i: Optional[LossResult],
    kd_r: Optional[LossResult],
    kd_dec: Optional[LossResult],
    kd_d: Optional[LossResult],
    gamma: LossWeights = LossWeights(),
) -> LossResult:
    """L_depth + sum_k gamma_k * L_k.

    Gradients are returned under ``"<component>.<input>"`` keys, already scaled.
    A component may be ``None`` only if its gamma is 0.
    """
    parts = dict(zip(COMPONENTS, (depth, kd_i, kd_r, kd_dec, kd_d)))
    scales = dict(zip(COMPONENTS, (1.0,) + gamma.as_tuple()))
    value = 0.0
    grads: dict = {}
    for name in COMPONENTS:
        part, scale = parts[name], scales[name]
        if part is None:
            if scale != 0.0:
                raise ValueError(f"component {name} missing but its weight is {scale}")
            continue
        if not math.isfinite(part.value):
            raise NonFiniteLossError(f"component {name} is not finite: {part.value}")
        if scale == 0.0:
            continue
        value += scale * part.value
        for key, g in part.grads.items():
            if isinstance(g, list):
                grads[f"{name}.{key}"] = [scale * x for x in g]
            else:
                grads[f"{name}.{key}"] = scale * g
    return LossResult(value, grads)


def urdl_grad_check(seed: int = 0, size: int = 8, detach_u: bool = True, sparse_density: float = 0.3):
    """Compare the analytic URDL gradient against central differences on random maps."""
    from .gradcheck import check

    return check("urdl" if detach_u else "urdl_full", seed=seed, size=size, sparse_density=sparse_density)
