"""Central finite-difference verification of every closed-form gradient in the package.

Each registered op draws random inputs away from the kinks of ``|.|`` and ReLU,
evaluates its analytic gradient, and compares it element by element with central
differences.  Relative error uses the denominator ``max(|a|, |n|, 1e-8)``.

A central difference of a function of magnitude ``|f|`` carries about
``4 * u * |f| / eps`` of absolute round-off (``u`` the unit round-off), so an
entry whose analytic derivative is nonzero but below that noise divided by the
tolerance cannot be judged at that tolerance.  Such entries are skipped and not
counted in ``n_points``; exact zeros are always compared.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import losses
from .depth_loss import rectified_weights, urdl, urdl_fixed
from .uncertainty import uncertainty_map, uncertainty_map_grad

EPS = 1e-6
KINK_MARGIN = 1e-3
REL_FLOOR = 1e-8
UNIT_ROUNDOFF = np.finfo(np.float64).eps / 2

TOL_ELEMENTWISE = 1e-6
TOL_COMPOSITE = 1e-5
TOL_END_TO_END = 1e-4


class UnknownOpError(KeyError):
    pass


@dataclass
class GradReport:
    op: str
    max_rel_error: float
    max_abs_error: float
    n_points: int
    eps: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{self.op:<20} {self.max_rel_error:10.3e} {self.max_abs_error:10.3e} "
            f"{self.n_points:8d} {self.tolerance:8.0e}  {status}"
        )


def finite_diff(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = EPS, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``x``.

    With ``indices`` (flat positions) only those entries are filled; the rest stay 0.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for j in idx:
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = fn(x)
        flat[j] = orig - eps
        f_minus = fn(x)
        flat[j] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite function value at element {j}")
        grad[j] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(x.shape)


def compare(analytic, numeric, floor: float = 0.0) -> tuple[float, float, int]:
    """Worst relative and absolute error, and the number of entries compared."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    keep = (a == 0) | (np.abs(a) >= floor)
    a, n = a[keep], n[keep]
    abs_err = np.abs(a - n)
    rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(rel.max(initial=0.0)), float(abs_err.max(initial=0.0)), int(a.size)


def away_from(rng, ref: np.ndarray, low: float, high: float, margin: float = KINK_MARGIN) -> np.ndarray:
    """Uniform draws in [low, high] redrawn wherever they fall within ``margin`` of ``ref``."""
    x = rng.uniform(low, high, size=ref.shape)
    bad = np.abs(x - ref) < margin
    while bad.any():
        x[bad] = rng.uniform(low, high, size=int(bad.sum()))
        bad = np.abs(x - ref) < margin
    return x


def fd_noise(scale: float, eps: float = EPS) -> float:
    """Expected absolute round-off of a central difference of a function of size ``scale``."""
    return 4.0 * UNIT_ROUNDOFF * max(abs(scale), 1e-3) / eps


class Trial(NamedTuple):
    analytic: np.ndarray
    numeric: np.ndarray
    scale: float  # magnitude of the differenced function


# --- trials: each returns a Trial for one random draw -----------------------------


def _pyramid_shapes(rng, base=(8, 8)):
    h, w = base
    return [(max(1, h >> i), max(1, w >> i), int(rng.integers(1, 4))) for i in range(1, 6)]


def _trial_uncertainty(rng):
    gt = rng.uniform(0.5, 50.0, size=(4, 4, 1))
    pred = away_from(rng, gt, 0.5, 50.0)
    beta = rng.uniform(0.5, 2.0)
    analytic = uncertainty_map_grad(pred, gt, beta)
    base = uncertainty_map(pred, gt, beta)
    # the map is elementwise, so subtracting the base point isolates each entry's change
    numeric = finite_diff(lambda p: float(np.sum(uncertainty_map(p, gt, beta) - base)), pred)
    return Trial(analytic, numeric, 1.0)


def _stack(levels):
    return np.concatenate([np.ravel(x) for x in levels])


def _pyramid_fd(loss_fn, student, teacher):
    sizes = [s.size for s in student]
    shapes = [s.shape for s in student]
    flat = _stack(student)

    def f(v):
        levels, off = [], 0
        for n, shp in zip(sizes, shapes):
            levels.append(v[off : off + n].reshape(shp))
            off += n
        return loss_fn(levels, teacher).value

    return finite_diff(f, flat)


def _trial_feat_l1(rng):
    shapes = _pyramid_shapes(rng)
    teacher = [rng.normal(size=s) for s in shapes]
    student = [t + away_from(rng, np.zeros(s), -1.0, 1.0) for t, s in zip(teacher, shapes)]
    res = losses.feature_l1_pyramid(student, teacher)
    return Trial(_stack(res.grads["student"]), _pyramid_fd(losses.feature_l1_pyramid, student, teacher), res.value)


def _trial_structure(rng):
    shapes = _pyramid_shapes(rng, base=(8, 6))
    teacher = [rng.normal(size=s) for s in shapes]
    student = [rng.normal(size=s) for s in shapes]
    res = losses.structure_distill_loss(student, teacher)
    return Trial(_stack(res.grads["student"]), _pyramid_fd(losses.structure_distill_loss, student, teacher), res.value)


def _inter_depth_pair(rng, size=4):
    teacher = [rng.uniform(1.0, 40.0, size=(size, size, 1)) for _ in range(3)]
    student = [away_from(rng, t, 1.0, 40.0) for t in teacher]
    return student, teacher


def _trial_inter_depth(rng):
    student, teacher = _inter_depth_pair(rng)
    beta = rng.uniform(0.5, 2.0)
    res = losses.inter_depth_distill_loss(student, teacher, beta, detach_u=True)
    frozen = losses.inter_depth_uncertainty(student, teacher, beta)
    numeric = _pyramid_fd(lambda s, t: losses.weighted_l1_levels(s, t, frozen), student, teacher)
    return Trial(_stack(res.grads["student"]), numeric, res.value)


def _trial_inter_depth_full(rng):
    student, teacher = _inter_depth_pair(rng)
    beta = rng.uniform(0.5, 2.0)
    res = losses.inter_depth_distill_loss(student, teacher, beta, detach_u=False)
    numeric = _pyramid_fd(lambda s, t: losses.inter_depth_distill_loss(s, t, beta, detach_u=False), student, teacher)
    return Trial(_stack(res.grads["student"]), numeric, res.value)


def random_depth_triplet(rng, size=8, sparse_density=0.3):
    """Random (pred, dense, sparse) maps with the sparse set inside the dense set.

    ``sparse_density=0`` gives an empty sparse map.
    """
    shape = (size, size, 1)
    dense = rng.uniform(1.0, 80.0, size=shape)
    dense[rng.random(shape) < 0.2] = 0.0
    sparse = np.where(rng.random(shape) < sparse_density, rng.uniform(1.0, 80.0, size=shape), 0.0)
    sparse[dense == 0] = 0.0
    pred = away_from(rng, dense, 1.0, 80.0)
    for _ in range(100):
        bad = (sparse > 0) & (np.abs(pred - sparse) < KINK_MARGIN)
        if not bad.any():
            break
        pred[bad] = rng.uniform(1.0, 80.0, size=int(bad.sum()))
        # re-validate against the dense map too
        pred = np.where(np.abs(pred - dense) < KINK_MARGIN, pred + 2 * KINK_MARGIN, pred)
    return pred, dense, sparse


def _trial_urdl(rng, size=8, sparse_density=0.3):
    pred, dense, sparse = random_depth_triplet(rng, size, sparse_density)
    beta = rng.uniform(0.5, 2.0)
    res = urdl(pred, dense, sparse, beta, detach_u=True)
    frozen = rectified_weights(pred, dense, sparse, beta)
    numeric = finite_diff(lambda p: urdl_fixed(p, dense, sparse, frozen).value, pred)
    return Trial(res.grads["pred"], numeric, res.value)


def _trial_urdl_full(rng, size=8, sparse_density=0.3):
    pred, dense, sparse = random_depth_triplet(rng, size, sparse_density)
    beta = rng.uniform(0.5, 2.0)
    res = urdl(pred, dense, sparse, beta, detach_u=False)
    numeric = finite_diff(lambda p: urdl(p, dense, sparse, beta, detach_u=False).value, pred)
    return Trial(res.grads["pred"], numeric, res.value)


@dataclass(frozen=True)
class _Op:
    trial: Callable
    tolerance: float
    n_trials: int = 100


REGISTRY: dict[str, _Op] = {
    "uncertainty": _Op(_trial_uncertainty, TOL_ELEMENTWISE),
    "feat_l1": _Op(_trial_feat_l1, TOL_ELEMENTWISE),
    "structure_distill": _Op(_trial_structure, TOL_COMPOSITE),
    "inter_depth": _Op(_trial_inter_depth, TOL_ELEMENTWISE),
    "inter_depth_full": _Op(_trial_inter_depth_full, TOL_COMPOSITE),
    "urdl": _Op(_trial_urdl, TOL_COMPOSITE),
    "urdl_full": _Op(_trial_urdl_full, TOL_COMPOSITE),
}


def register(name: str, trial: Callable, tolerance: float, n_trials: int = 100) -> None:
    REGISTRY[name] = _Op(trial, tolerance, n_trials)


def op_names() -> list[str]:
    _load_model_ops()
    return list(REGISTRY)


def _load_model_ops() -> None:
    # model checks live next to the model; importing registers them
    from . import toy  # noqa: F401


def check(op: str, seed: int = 0, tolerance: Optional[float] = None, n_trials: Optional[int] = None, **kwargs) -> GradReport:
    """Run ``n_trials`` random draws of ``op`` and report the worst disagreement.

    Passes iff the worst relative error is strictly below ``tolerance``
    (the op's tier by default), so a tolerance of 0 always fails.
    """
    _load_model_ops()
    if op not in REGISTRY:
        raise UnknownOpError(f"unknown op {op!r}; known: {', '.join(REGISTRY)}")
    entry = REGISTRY[op]
    tol = entry.tolerance if tolerance is None else tolerance
    trials = entry.n_trials if n_trials is None else n_trials
    rng = np.random.default_rng(seed)
    worst_rel = worst_abs = 0.0
    points = 0
    start = time.perf_counter()
    for _ in range(trials):
        trial = entry.trial(rng, **kwargs)
        floor = fd_noise(trial.scale) / entry.tolerance
        rel, ab, n = compare(trial.analytic, trial.numeric, floor)
        worst_rel = max(worst_rel, rel)
        worst_abs = max(worst_abs, ab)
        points += n
    return GradReport(
        op=op,
        max_rel_error=worst_rel,
        max_abs_error=worst_abs,
        n_points=points,
        eps=EPS,
        tolerance=tol,
        passed=worst_rel < tol,
        seconds=time.perf_counter() - start,
    )


def check_all(seed: int = 0) -> list[GradReport]:
    return [check(name, seed) for name in op_names()]
