"""Standard depth-evaluation metrics over a distance-capped valid set."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from .tensor import require_same_shape

DEFAULT_CAPS = (50.0, 70.0, 80.0)
DELTA_BASE = 1.25


class EmptyValidSetError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    mae: float
    rmse: float
    absrel: float
    log10: float
    rmselog: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    cap: float

    def as_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        """One ``name=value`` line per field, in declaration order."""
        return "\n".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))


METRIC_NAMES = ("mae", "rmse", "absrel", "log10", "rmselog", "delta1", "delta2", "delta3")


def valid_mask(gt: np.ndarray, cap: float) -> np.ndarray:
    return (gt > 0) & (gt <= cap)


def evaluate(pred: np.ndarray, gt: np.ndarray, cap: float = 80.0) -> EvalReport:
    """Metrics over pixels with 0 < gt <= cap.  Deltas use the strict ``< 1.25^k`` test."""
    require_same_shape(pred, gt, ("pred", "gt"))
    if not cap > 0:
        raise ValueError(f"cap must be > 0, got {cap}")
    mask = valid_mask(gt, cap)
    n = int(mask.sum())
    if n == 0:
        raise EmptyValidSetError(f"empty valid set: no ground truth in (0, {cap}]")
    p = pred[mask]
    g = gt[mask]
    if np.any(p <= 0):
        raise ValueError(f"{int(np.sum(p <= 0))} non-positive predictions inside the valid set")
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return EvalReport(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err**2))),
        absrel=float(np.mean(np.abs(err) / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        rmselog=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < DELTA_BASE)),
        delta2=float(np.mean(ratio < DELTA_BASE**2)),
        delta3=float(np.mean(ratio < DELTA_BASE**3)),
        n_valid=n,
        cap=float(cap),
    )


def aggregate(reports: Iterable[EvalReport]) -> EvalReport:
    """Pixel-weighted pooling of per-frame reports; RMSE terms pool their mean squares."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    caps = {r.cap for r in reports}
    if len(caps) != 1:
        raise ValueError(f"cannot aggregate reports with different caps: {sorted(caps)}")
    reports = [r for r in reports if r.n_valid > 0]
    if not reports:
        raise EmptyValidSetError("all reports have an empty valid set")
    if len(reports) == 1:
        return reports[0]
    total = sum(r.n_valid for r in reports)

    def pooled(name, squared=False):
        vals = [r.n_valid * (getattr(r, name) ** 2 if squared else getattr(r, name)) for r in reports]
        mean = math.fsum(vals) / total
        return math.sqrt(mean) if squared else mean

    return EvalReport(
        mae=pooled("mae"),
        rmse=pooled("rmse", squared=True),
        absrel=pooled("absrel"),
        log10=pooled("log10"),
        rmselog=pooled("rmselog", squared=True),
        delta1=pooled("delta1"),
        delta2=pooled("delta2"),
        delta3=pooled("delta3"),
        n_valid=total,
        cap=caps.pop(),
    )
