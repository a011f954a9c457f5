"""Teacher-student distillation losses with closed-form student gradients.

All losses treat the teacher tensors as constants.  Each returns a
:class:`LossResult` whose ``grads`` maps an input name to its gradient; for
pyramid inputs the gradient is a list aligned with the levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .tensor import ShapeError, flatten_spatial, require_rank3
from .uncertainty import uncertainty_map, uncertainty_map_grad

PYRAMID_LEVELS = 5
INTER_DEPTH_SCALES = (8, 4, 2)


@dataclass
class LossResult:
    value: float
    grads: dict[str, Any] = field(default_factory=dict)


def level_weight(i: int) -> float:
    """Weight 1/2^i of the i-th level, counting from 1."""
    return 0.5**i


def _check_pair(student: Sequence[np.ndarray], teacher: Sequence[np.ndarray], n_levels: Optional[int]):
    if n_levels is not None and len(student) != n_levels:
        raise ShapeError(f"expected {n_levels} student levels, got {len(student)}")
    if len(student) != len(teacher):
        raise ShapeError(f"student has {len(student)} levels, teacher {len(teacher)}")
    for i, (s, t) in enumerate(zip(student, teacher), start=1):
        if s.shape != t.shape:
            raise ShapeError(f"level {i}: student {s.shape} vs teacher {t.shape}")


def feature_l1_pyramid(student: Sequence[np.ndarray], teacher: Sequence[np.ndarray]) -> LossResult:
    """sum_i 2^-i * mean|S_i - T_i| over a five-level feature pyramid."""
    _check_pair(student, teacher, PYRAMID_LEVELS)
    value = 0.0
    grads = []
    for i, (s, t) in enumerate(zip(student, teacher), start=1):
        diff = s - t
        w = level_weight(i)
        value += w * float(np.mean(np.abs(diff)))
        grads.append(w * np.sign(diff) / diff.size)
    return LossResult(value, {"student": grads})


def _normalize_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("pc,pc->p", rows, rows))
    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where((norms > 0)[:, None], rows / safe[:, None], 0.0)
    return unit, norms


def pairwise_similarity(f: np.ndarray) -> np.ndarray:
    """Cosine similarity between all pixel feature vectors of an H x W x C map.

    Zero vectors have similarity 0 with everything, themselves included.
    """
    unit, _ = _normalize_rows(flatten_spatial(require_rank3(f)))
    return unit @ unit.T


def _similarity_level(s: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum of squared similarity differences for one level and its gradient w.r.t. ``s``.

    With unit rows u_s, u_t write d = u_s - u_t and a = u_s + u_t.  Then
    u_s u_s^T - u_t u_t^T = (d a^T + a d^T) / 2, so its squared Frobenius norm
    and its product with u_s reduce to C x C Gram matrices.  Nothing of size
    N x N is ever formed, and both terms shrink with |d|^2 instead of
    cancelling between two large matrices.
    """
    h, w, c = s.shape
    us, ns = _normalize_rows(flatten_spatial(s))
    ut, _ = _normalize_rows(flatten_spatial(t))
    d = us - ut
    a = us + ut
    m = a.T @ d
    total = 0.5 * (float(np.sum((d.T @ d) * (a.T @ a))) + float(np.sum(m * m.T)))
    # d/dunit of sum(delta^2) is 4 * delta @ u_s
    d_unit = 2.0 * (d @ (a.T @ us) + a @ (d.T @ us))
    # project out the radial component: d(f/|f|)/df = (I - u u^T) / |f|
    radial = np.einsum("pc,pc->p", d_unit, us)
    safe = np.where(ns > 0, ns, 1.0)
    d_rows = np.where((ns > 0)[:, None], (d_unit - radial[:, None] * us) / safe[:, None], 0.0)
    return max(total, 0.0), d_rows.reshape(h, w, c)


def structure_distill_loss(student: Sequence[np.ndarray], teacher: Sequence[np.ndarray]) -> LossResult:
    """Squared difference of pairwise-similarity matrices, 2^-i weighted over five levels."""
    _check_pair(student, teacher, PYRAMID_LEVELS)
    value = 0.0
    grads = []
    for i, (s, t) in enumerate(zip(student, teacher), start=1):
        require_rank3(s, f"level {i}")
        n = s.shape[0] * s.shape[1]
        scale = level_weight(i) / n**2
        total, d_s = _similarity_level(s, t)
        value += scale * total
        grads.append(scale * d_s)
    return LossResult(value, {"student": grads})


def weighted_l1_levels(
    student: Sequence[np.ndarray], teacher: Sequence[np.ndarray], weights: Sequence[np.ndarray]
) -> LossResult:
    """sum_i 2^-i * mean(W_i * |S_i - T_i|) with the weights held constant."""
    value = 0.0
    grads = []
    for i, (s, t, u) in enumerate(zip(student, teacher, weights), start=1):
        diff = s - t
        lw = level_weight(i)
        value += lw * float(np.mean(u * np.abs(diff)))
        grads.append(lw * u * np.sign(diff) / diff.size)
    return LossResult(value, {"student": grads})


def inter_depth_uncertainty(student, teacher, beta: float = 1.0) -> list[np.ndarray]:
    return [uncertainty_map(s, t, beta) for s, t in zip(student, teacher)]


def inter_depth_distill_loss(
    student: Sequence[np.ndarray],
    teacher: Sequence[np.ndarray],
    beta: float = 1.0,
    detach_u: bool = True,
) -> LossResult:
    """Uncertainty-weighted L1 between student inter-depth maps and teacher LPG maps.

    The student map is the prediction and the teacher map the reference of the
    uncertainty.  With ``detach_u`` the uncertainty is a constant weight;
    otherwise its dependence on the student map is differentiated too.
    """
    _check_pair(student, teacher, len(INTER_DEPTH_SCALES))
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    base = student[0].shape
    for i, s in enumerate(student, start=1):
        if s.shape != base:
            raise ShapeError(f"inter-depth map {i} has shape {s.shape}, expected {base}")
    weights = inter_depth_uncertainty(student, teacher, beta)
    result = weighted_l1_levels(student, teacher, weights)
    if not detach_u:
        for i, (s, t, g) in enumerate(zip(student, teacher, result.grads["student"]), start=1):
            du = uncertainty_map_grad(s, t, beta)
            g += level_weight(i) * du * np.abs(s - t) / s.size
    return result


__all__ = [
    "LossResult",
    "feature_l1_pyramid",
    "pairwise_similarity",
    "structure_distill_loss",
    "inter_depth_distill_loss",
    "weighted_l1_levels",
    "inter_depth_uncertainty",
    "level_weight",
]
