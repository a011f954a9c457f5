"""Desk-scale teacher-student demo.

Synthetic scenes carry a piecewise-constant depth field that is encoded, with
nuisance and noise, into dense "image" channels and sparse "radar" returns.  A
frozen procedural teacher emits feature pyramids, three intermediate depth maps
and a final depth map.  A small student (per-level channel projections, a
top-down decoder, 1x1 inter-depth heads, a final head) is trained by plain
gradient descent on the combined objective using closed-form gradients only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import gradcheck
from .depth_loss import LossWeights, NonFiniteLossError, rectified_weights, total_loss, urdl, urdl_fixed
from .losses import (
    INTER_DEPTH_SCALES,
    PYRAMID_LEVELS,
    feature_l1_pyramid,
    inter_depth_distill_loss,
    inter_depth_uncertainty,
    structure_distill_loss,
    weighted_l1_levels,
)
from .metrics import EvalReport, aggregate, evaluate
from .tensor import ShapeError, avg_pool, nearest_upsample, nearest_upsample_adjoint

MIN_DEPTH = 1.0
MAX_DEPTH = 80.0
LOG_RANGE = math.log(MAX_DEPTH / MIN_DEPTH)

IMAGE_CHANNELS = 6  # channel 0 is a constant 1
RADAR_CHANNELS = 2  # (presence, presence * normalized depth)
FEATURE_CHANNELS = (8, 8, 8, 8, 8)
TEACHER_HIDDEN = 64
DEPTH_SCALE = 10.0  # meters per unit of softplus output
DEPTH_FLOOR = 1e-6  # keeps outputs positive where softplus underflows

RADAR_DENSITY = 0.04
SPARSE_DENSITY = 0.015

# fixed generator constants shared by every scene
_GEN = np.random.default_rng(20240101)
_DIRS = _GEN.normal(size=(4, IMAGE_CHANNELS - 1))
_DIRS /= np.linalg.norm(_DIRS, axis=1, keepdims=True)
# image directions carrying depth and albedo; rows 1-2 are spare draws
_DEPTH_DIR, _NUISANCE = _DIRS[0], _DIRS[3]
IMAGE_NOISE = 0.03
RADAR_NOISE = 0.03


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def depth_from_normalized(u):
    return MIN_DEPTH * np.exp(u * LOG_RANGE)


def normalized_depth(d: np.ndarray) -> np.ndarray:
    """log-depth mapped so that 1 m -> 0 and 80 m -> 1."""
    return np.log(d / MIN_DEPTH) / LOG_RANGE


# --- scenes ------------------------------------------------------------------------


@dataclass(frozen=True)
class Scene:
    image_feat: np.ndarray
    radar_feat: np.ndarray
    gt_dense: np.ndarray
    gt_sparse: np.ndarray
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_dense.shape[:2]


def _cuts(rng, n: int, lo: int = 5, hi: int = 13) -> np.ndarray:
    edges = [0]
    while edges[-1] < n:
        edges.append(edges[-1] + int(rng.integers(lo, hi)))
    edges[-1] = n
    return np.array(edges)


def gen_scene(seed: int, h: int = 32, w: int = 32) -> Scene:
    """Deterministic synthetic scene; ``h`` and ``w`` must be multiples of 32."""
    if h % 32 or w % 32 or h <= 0 or w <= 0:
        raise ValueError(f"scene dims must be positive multiples of 32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    ys, xs = _cuts(rng, h), _cuts(rng, w)
    depth = np.empty((h, w))
    albedo = np.empty((h, w))
    for r in range(len(ys) - 1):
        # farther toward the top of the frame, with per-block jitter
        row_u = 0.85 - 0.6 * (ys[r] + ys[r + 1]) / (2 * h)
        for c in range(len(xs) - 1):
            u = float(np.clip(row_u + rng.uniform(-0.3, 0.3), 0.0, 1.0))
            depth[ys[r] : ys[r + 1], xs[c] : xs[c + 1]] = depth_from_normalized(u)
            albedo[ys[r] : ys[r + 1], xs[c] : xs[c + 1]] = rng.normal()
    depth = np.clip(depth, MIN_DEPTH, MAX_DEPTH)
    u = normalized_depth(depth)

    image = np.empty((h, w, IMAGE_CHANNELS))
    image[..., 0] = 1.0
    image[..., 1:] = u[..., None] * _DEPTH_DIR + albedo[..., None] * _NUISANCE + IMAGE_NOISE * rng.normal(size=(h, w, IMAGE_CHANNELS - 1))

    radar = np.zeros((h, w, RADAR_CHANNELS))
    hits = rng.random((h, w)) < RADAR_DENSITY
    radar[hits, 0] = 1.0
    radar[hits, 1] = np.clip(u[hits] + RADAR_NOISE * rng.normal(size=int(hits.sum())), 0.0, None)

    sparse = np.where(rng.random((h, w)) < SPARSE_DENSITY, depth, 0.0)
    return Scene(image, radar, depth[..., None], sparse[..., None], seed)


def pyramid_shapes(h: int, w: int, channels=FEATURE_CHANNELS) -> list[tuple[int, int, int]]:
    return [(max(1, h >> i), max(1, w >> i), c) for i, c in zip(range(1, PYRAMID_LEVELS + 1), channels)]


# --- building blocks ----------------------------------------------------------------


def channel_project(f: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-pixel linear map C_in -> C_out followed by ReLU."""
    if f.ndim != 3 or weights.ndim != 2 or f.shape[2] != weights.shape[0]:
        raise ShapeError(f"cannot project {f.shape} with weights {weights.shape}")
    return np.maximum(f @ weights, 0.0)


def channel_project_grad(f, weights, grad_out):
    """Gradients of :func:`channel_project` w.r.t. (input, weights)."""
    g_pre = np.where(f @ weights > 0, grad_out, 0.0)
    return g_pre @ weights.T, np.einsum("hwi,hwo->io", f, g_pre)


def inter_depth_head(f: np.ndarray, kernel: np.ndarray, bias: float, factor: int) -> np.ndarray:
    """1x1 convolution to one channel, positive depth mapping, nearest upsampling."""
    return nearest_upsample(DEPTH_SCALE * _softplus(f @ kernel + bias) + DEPTH_FLOOR, factor)


def inter_depth_head_grad(f, kernel, bias, factor, grad_out):
    """Gradients of :func:`inter_depth_head` w.r.t. (input, kernel, bias)."""
    g_small = nearest_upsample_adjoint(grad_out, factor)
    g_z = g_small * DEPTH_SCALE * _sigmoid(f @ kernel + bias)
    return g_z @ kernel.T, np.einsum("hwi,hwo->io", f, g_z), float(g_z.sum())


# --- teacher ------------------------------------------------------------------------


@dataclass
class Outputs:
    camera: list
    radar: list
    decoder: list
    inter: list
    depth: np.ndarray


def _depth_decoder() -> np.ndarray:
    """Image weights that read normalized depth off the image channels.

    Minimum-norm weights that respond to u with gain 1 and ignore the albedo
    direction.
    """
    a = np.vstack([_DEPTH_DIR, _NUISANCE])
    target = np.zeros(len(a))
    target[0] = 1.0
    return np.linalg.pinv(a) @ target


def _ramp_layers(n_in_bias: Optional[int], read: np.ndarray, c_out: int):
    """A hidden layer of ramps relu(u - t_j) and a pooling layer averaging windows of them."""
    thresholds = np.linspace(-0.05, 1.0, TEACHER_HIDDEN)
    first = np.outer(read, np.ones(TEACHER_HIDDEN))
    if n_in_bias is not None:
        first[n_in_bias] -= thresholds
    second = np.zeros((TEACHER_HIDDEN, c_out))
    per = TEACHER_HIDDEN // c_out
    for c in range(c_out):
        second[c * per : (c + 1) * per, c] = 1.0 / per
    return first, second


class Teacher:
    """Frozen procedural teacher.

    Its encoders decode normalized depth from the inputs with generator-aware
    weights and expand it into ramp features through a wide hidden layer.  The
    intermediate and final depth maps are smoothed, lightly perturbed copies of
    the dense ground truth.
    """

    def __init__(self, channels=FEATURE_CHANNELS):
        self.channels = tuple(channels)
        read = np.zeros(IMAGE_CHANNELS)
        read[1:] = _depth_decoder()
        self.camera = [_ramp_layers(0, read, c) for c in self.channels]
        # radar inputs are (rho, rho*u): ramps rho * relu(u - t) are homogeneous in rho
        self.radar = []
        for c in self.channels:
            first, second = _ramp_layers(None, np.array([0.0, 1.0]), c)
            first[0] = -np.linspace(-0.05, 1.0, TEACHER_HIDDEN)
            self.radar.append((first, second))
        self.dec_mix = [np.eye(c) for c in self.channels]
        self.dec_up = [0.5 * np.eye(self.channels[i + 1], self.channels[i]) for i in range(PYRAMID_LEVELS - 1)]

    def parameter_count(self) -> int:
        arrays = [a for pair in self.camera + self.radar for a in pair] + self.dec_mix + self.dec_up
        return int(sum(a.size for a in arrays))

    def forward(self, scene: Scene) -> Outputs:
        h, w = scene.shape
        camera, radar = [], []
        for i in range(1, PYRAMID_LEVELS + 1):
            img = avg_pool(scene.image_feat, 2**i)
            rad = avg_pool(scene.radar_feat, 2**i)
            a1, a2 = self.camera[i - 1]
            camera.append(np.maximum(np.maximum(img @ a1, 0.0) @ a2, 0.0))
            b1, b2 = self.radar[i - 1]
            radar.append(np.maximum(np.maximum(rad @ b1, 0.0) @ b2, 0.0))
        decoder = _decode(camera, radar, self.dec_mix, self.dec_up)[0]

        rng = np.random.default_rng((scene.seed, 7))
        gt = scene.gt_dense
        lpg = []
        for k in INTER_DEPTH_SCALES:
            smooth = nearest_upsample(_masked_mean(gt, k), k)
            lpg.append(smooth * np.exp(0.03 * rng.normal(size=gt.shape)))
        depth = nearest_upsample(_masked_mean(gt, 2), 2) * np.exp(0.02 * rng.normal(size=gt.shape))
        return Outputs(camera, radar, decoder, lpg, depth)


def _masked_mean(gt, k):
    """k x k block means over measured pixels; blocks without any stay 0."""
    count = avg_pool((gt > 0).astype(float), k)
    total = avg_pool(gt, k)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def _decode(camera, radar, mix, up):
    """Top-down decoder: dec_i = relu((cam_i + rad_i) M_i + up2(dec_{i+1}) N_i)."""
    n = len(camera)
    dec = [None] * n
    pre = [None] * n
    for j in reversed(range(n)):
        z = (camera[j] + radar[j]) @ mix[j]
        if j + 1 < n:
            z = z + nearest_upsample(dec[j + 1], 2) @ up[j]
        pre[j] = z
        dec[j] = np.maximum(z, 0.0)
    return dec, pre


# --- student ------------------------------------------------------------------------


PROJ_INIT = 0.5


def _level_for_scale(k: int) -> int:
    return int(round(math.log2(k)))


@dataclass
class ToyModel:
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0, channels=FEATURE_CHANNELS) -> "ToyModel":
        rng = np.random.default_rng((seed, 1))
        p = {}
        for i, c in enumerate(channels, start=1):
            p[f"cam_proj.{i}"] = rng.normal(scale=PROJ_INIT / math.sqrt(IMAGE_CHANNELS), size=(IMAGE_CHANNELS, c))
            p[f"rad_proj.{i}"] = rng.normal(scale=0.5, size=(RADAR_CHANNELS, c))
            # near-identity decoder so early features pass through
            p[f"dec_mix.{i}"] = np.eye(c) + rng.normal(scale=0.3 / math.sqrt(c), size=(c, c))
            if i < len(channels):
                p[f"dec_up.{i}"] = 0.5 * np.eye(channels[i], c) + rng.normal(scale=0.3 / math.sqrt(c), size=(channels[i], c))
        for k in INTER_DEPTH_SCALES:
            c = channels[_level_for_scale(k) - 1]
            p[f"inter_head.{k}"] = rng.normal(scale=0.1, size=(c, 1))
            p[f"inter_bias.{k}"] = np.array([1.0])
        p["final_head"] = rng.normal(scale=0.1, size=(channels[0], 1))
        p["final_bias"] = np.array([1.0])
        return cls(p)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.params[f"cam_proj.{i}"].shape[1] for i in range(1, PYRAMID_LEVELS + 1))

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ToyModel":
        return ToyModel({k: v.copy() for k, v in self.params.items()})


@dataclass
class StudentCache:
    outputs: Outputs
    pooled_img: list
    pooled_rad: list
    dec_pre: list


def student_forward(model: ToyModel, scene: Scene) -> tuple[Outputs, StudentCache]:
    p = model.params
    if p["cam_proj.1"].shape[0] != scene.image_feat.shape[2] or p["rad_proj.1"].shape[0] != scene.radar_feat.shape[2]:
        raise ShapeError("model input channels do not match the scene")
    h, w = scene.shape
    pooled_img, pooled_rad, camera, radar = [], [], [], []
    for i in range(1, PYRAMID_LEVELS + 1):
        img = avg_pool(scene.image_feat, 2**i)
        rad = avg_pool(scene.radar_feat, 2**i)
        pooled_img.append(img)
        pooled_rad.append(rad)
        camera.append(channel_project(img, p[f"cam_proj.{i}"]))
        radar.append(channel_project(rad, p[f"rad_proj.{i}"]))
    mix = [p[f"dec_mix.{i}"] for i in range(1, PYRAMID_LEVELS + 1)]
    up = [p[f"dec_up.{i}"] for i in range(1, PYRAMID_LEVELS)]
    decoder, dec_pre = _decode(camera, radar, mix, up)

    inter = []
    for k in INTER_DEPTH_SCALES:
        f = decoder[_level_for_scale(k) - 1]
        inter.append(inter_depth_head(f, p[f"inter_head.{k}"], p[f"inter_bias.{k}"][0], k))

    # the final head reads the finest decoder level, which has seen every coarser one
    depth = inter_depth_head(decoder[0], p["final_head"], p["final_bias"][0], 2)
    out = Outputs(camera, radar, decoder, inter, depth)
    return out, StudentCache(out, pooled_img, pooled_rad, dec_pre)


def student_backward(model: ToyModel, cache: StudentCache, grads: dict) -> dict:
    """Parameter gradients given output gradients.

    ``grads`` may hold any of ``camera``, ``radar``, ``decoder``, ``inter``
    (level lists) and ``depth`` (array); missing entries count as zero.
    """
    p = model.params
    out = cache.outputs
    n = PYRAMID_LEVELS
    g = {k: np.zeros_like(v) for k, v in p.items()}
    g_dec = [np.zeros_like(d) for d in out.decoder]
    if "decoder" in grads:
        for j in range(n):
            g_dec[j] += grads["decoder"][j]

    if "depth" in grads:
        g_f, g_k, g_b = inter_depth_head_grad(out.decoder[0], p["final_head"], p["final_bias"][0], 2, grads["depth"])
        g["final_head"] += g_k
        g["final_bias"][0] += g_b
        g_dec[0] += g_f

    if "inter" in grads:
        for k, g_map in zip(INTER_DEPTH_SCALES, grads["inter"]):
            j = _level_for_scale(k) - 1
            g_f, g_k, g_b = inter_depth_head_grad(out.decoder[j], p[f"inter_head.{k}"], p[f"inter_bias.{k}"][0], k, g_map)
            g[f"inter_head.{k}"] += g_k
            g[f"inter_bias.{k}"][0] += g_b
            g_dec[j] += g_f

    g_cam = [np.zeros_like(c) for c in out.camera]
    g_rad = [np.zeros_like(r) for r in out.radar]
    for j in range(n):  # finest first: dec_j feeds only coarser-to-finer links already visited
        i = j + 1
        g_pre = np.where(cache.dec_pre[j] > 0, g_dec[j], 0.0)
        fused = out.camera[j] + out.radar[j]
        g["dec_mix.%d" % i] += np.einsum("hwc,hwo->co", fused, g_pre)
        g_fused = g_pre @ p[f"dec_mix.{i}"].T
        g_cam[j] += g_fused
        g_rad[j] += g_fused
        if j + 1 < n:
            coarse = nearest_upsample(out.decoder[j + 1], 2)
            g[f"dec_up.{i}"] += np.einsum("hwc,hwo->co", coarse, g_pre)
            g_dec[j + 1] += nearest_upsample_adjoint(g_pre @ p[f"dec_up.{i}"].T, 2)

    for j in range(n):
        i = j + 1
        if "camera" in grads:
            g_cam[j] += grads["camera"][j]
        if "radar" in grads:
            g_rad[j] += grads["radar"][j]
        g[f"cam_proj.{i}"] += channel_project_grad(cache.pooled_img[j], p[f"cam_proj.{i}"], g_cam[j])[1]
        g[f"rad_proj.{i}"] += channel_project_grad(cache.pooled_rad[j], p[f"rad_proj.{i}"], g_rad[j])[1]
    return g


# --- objective ----------------------------------------------------------------------


@dataclass
class SceneLoss:
    total: float
    components: dict
    param_grads: dict


def scene_objective(
    model: ToyModel,
    scene: Scene,
    teacher_out: Outputs,
    gamma: LossWeights,
    beta: float = 1.0,
    detach_u: bool = True,
    frozen: Optional[dict] = None,
    need_grad: bool = True,
) -> SceneLoss:
    """Total loss of the student on one scene and its gradient w.r.t. every parameter.

    ``frozen`` (from :func:`frozen_weights`) replaces the uncertainty weights by
    constants; it is how the detached gradient is checked numerically.
    """
    out, cache = student_forward(model, scene)
    if frozen is None:
        depth = urdl(out.depth, scene.gt_dense, scene.gt_sparse, beta, detach_u)
        kd_d = inter_depth_distill_loss(out.inter, teacher_out.inter, beta, detach_u) if gamma.gamma4 else None
    else:
        depth = urdl_fixed(out.depth, scene.gt_dense, scene.gt_sparse, frozen["depth"])
        kd_d = weighted_l1_levels(out.inter, teacher_out.inter, frozen["inter"]) if gamma.gamma4 else None
    kd_i = feature_l1_pyramid(out.camera, teacher_out.camera) if gamma.gamma1 else None
    kd_r = feature_l1_pyramid(out.radar, teacher_out.radar) if gamma.gamma2 else None
    kd_dec = structure_distill_loss(out.decoder, teacher_out.decoder) if gamma.gamma3 else None
    tot = total_loss(depth, kd_i, kd_r, kd_dec, kd_d, gamma)
    components = {
        "depth": depth.value,
        "kd_i": kd_i.value if kd_i else 0.0,
        "kd_r": kd_r.value if kd_r else 0.0,
        "kd_dec": kd_dec.value if kd_dec else 0.0,
        "kd_d": kd_d.value if kd_d else 0.0,
    }
    if not need_grad:
        return SceneLoss(tot.value, components, {})
    names = {
        "depth.pred": "depth",
        "kd_i.student": "camera",
        "kd_r.student": "radar",
        "kd_dec.student": "decoder",
        "kd_d.student": "inter",
    }
    out_grads = {names[k]: v for k, v in tot.grads.items()}
    return SceneLoss(tot.value, components, student_backward(model, cache, out_grads))


def frozen_weights(model: ToyModel, scene: Scene, teacher_out: Outputs, beta: float = 1.0) -> dict:
    out, _ = student_forward(model, scene)
    return {
        "depth": rectified_weights(out.depth, scene.gt_dense, scene.gt_sparse, beta),
        "inter": inter_depth_uncertainty(out.inter, teacher_out.inter, beta),
    }


# --- training -----------------------------------------------------------------------

KD_NAMES = ("kd_i", "kd_r", "kd_dec", "kd_d")


@dataclass(frozen=True)
class TrainConfig:
    gamma: LossWeights = LossWeights()
    beta: float = 1.0
    detach_u: bool = True
    steps: int = 2000
    lr: float = 0.003
    seed: int = 0
    n_train: int = 4
    n_eval: int = 4
    height: int = 32
    width: int = 32
    kd_enabled: tuple = (True, True, True, True)
    eval_every: int = 250
    cap: float = MAX_DEPTH
    lr_decay: bool = True
    # the depth loss is in meters while feature losses are per-channel means;
    # this factor brings distillation gradients to a comparable size
    kd_scale: float = 10.0

    def step_size(self, step: int) -> float:
        """Cosine-annealed step size for 1-based ``step``; constant if ``lr_decay`` is off."""
        if not self.lr_decay:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * (step - 1) / self.steps))

    def effective_gamma(self) -> LossWeights:
        base = tuple(self.kd_scale * g for g in self.gamma.as_tuple())
        return LossWeights.from_flags(*self.kd_enabled, base=base)

    def train_seeds(self) -> list[int]:
        return [1000 * self.seed + j for j in range(self.n_train)]

    def eval_seeds(self) -> list[int]:
        return [1000 * self.seed + 500 + j for j in range(self.n_eval)]


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


HISTORY_FIELDS = ("step", "total", "depth", "kd_i", "kd_r", "kd_dec", "kd_d")


@dataclass
class TrainingHistory:
    """One record per step; evaluation metrics are attached on evaluation steps."""

    records: list = field(default_factory=list)
    final: Optional[EvalReport] = None
    model: Optional[ToyModel] = None

    def losses(self) -> np.ndarray:
        return np.array([r["total"] for r in self.records])

    def to_text(self) -> str:
        return "".join(format_record(r) + "\n" for r in self.records)


def format_record(record: dict) -> str:
    """Tab-separated ``key=value`` pairs; floats use ``repr`` so they round-trip."""
    parts = []
    for key, value in record.items():
        parts.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return "\t".join(parts)


def parse_record(line: str) -> dict:
    record = {}
    for part in line.rstrip("\n").split("\t"):
        key, _, value = part.partition("=")
        record[key] = int(value) if key in ("step", "n_valid") else float(value)
    return record


def evaluate_model(model: ToyModel, scenes, cap: float = MAX_DEPTH) -> EvalReport:
    reports = [evaluate(student_forward(model, s)[0].depth, s.gt_dense, cap) for s in scenes]
    return aggregate(reports)


def train(config: TrainConfig = TrainConfig()) -> TrainingHistory:
    """Full-batch gradient descent on the mean scene objective over the training scenes."""
    if config.steps < 1:
        raise ValueError("steps must be >= 1")
    if not config.lr > 0:
        raise ValueError("lr must be > 0")
    gamma = config.effective_gamma()
    teacher = Teacher(FEATURE_CHANNELS)
    train_scenes = [gen_scene(s, config.height, config.width) for s in config.train_seeds()]
    eval_scenes = [gen_scene(s, config.height, config.width) for s in config.eval_seeds()]
    teacher_outs = [teacher.forward(s) for s in train_scenes]
    model = ToyModel.init(config.seed)
    history = TrainingHistory()
    n = len(train_scenes)
    for step in range(1, config.steps + 1):
        try:
            results = [
                scene_objective(model, s, t, gamma, config.beta, config.detach_u)
                for s, t in zip(train_scenes, teacher_outs)
            ]
        except NonFiniteLossError as err:
            raise DivergenceError(step, math.nan) from err
        total = math.fsum(r.total for r in results) / n
        if not math.isfinite(total):
            raise DivergenceError(step, total)
        record = {"step": step, "total": float(total)}
        for name in ("depth",) + KD_NAMES:
            record[name] = float(math.fsum(float(r.components[name]) for r in results) / n)
        for key in model.params:
            grad = sum(r.param_grads[key] for r in results) / n
            model.params[key] = model.params[key] - config.step_size(step) * grad
        if step % config.eval_every == 0 or step == config.steps:
            report = evaluate_model(model, eval_scenes, config.cap)
            record.update({k: float(getattr(report, k)) for k in ("mae", "rmse", "absrel", "delta1")})
            history.final = report
        history.records.append(record)
    history.model = model
    return history


def ablation_grid(base: TrainConfig = TrainConfig()) -> list[tuple[tuple[bool, ...], EvalReport]]:
    """Every on/off combination of the four distillation terms, in binary order."""
    from dataclasses import replace
    from itertools import product

    rows = []
    for flags in product((False, True), repeat=4):
        hist = train(replace(base, kd_enabled=flags))
        rows.append((flags, hist.final))
    return rows


# --- gradient checks for the model pieces ------------------------------------------


def _trial_channel_project(rng):
    f = rng.normal(size=(3, 3, 4))
    wts = rng.normal(size=(4, 5))
    # redraw until every pre-activation is clear of the ReLU kink
    while np.min(np.abs(f @ wts)) < gradcheck.KINK_MARGIN:
        wts = rng.normal(size=(4, 5))
    up = rng.normal(size=(3, 3, 5))
    g_f, g_w = channel_project_grad(f, wts, up)
    num_f = gradcheck.finite_diff(lambda x: float(np.sum(channel_project(x, wts) * up)), f)
    num_w = gradcheck.finite_diff(lambda x: float(np.sum(channel_project(f, x) * up)), wts)
    scale = float(np.sum(np.abs(channel_project(f, wts) * up)))
    return gradcheck.Trial(np.concatenate([g_f.ravel(), g_w.ravel()]), np.concatenate([num_f.ravel(), num_w.ravel()]), scale)


def _trial_inter_depth_head(rng):
    f = rng.normal(size=(2, 2, 3))
    kernel = rng.normal(size=(3, 1))
    bias = float(rng.normal())
    factor = int(rng.choice(INTER_DEPTH_SCALES))
    up = rng.normal(size=(2 * factor, 2 * factor, 1))
    g_f, g_k, g_b = inter_depth_head_grad(f, kernel, bias, factor, up)
    num_f = gradcheck.finite_diff(lambda x: float(np.sum(inter_depth_head(x, kernel, bias, factor) * up)), f)
    num_k = gradcheck.finite_diff(lambda x: float(np.sum(inter_depth_head(f, x, bias, factor) * up)), kernel)
    num_b = gradcheck.finite_diff(lambda x: float(np.sum(inter_depth_head(f, kernel, x[0], factor) * up)), np.array([bias]))
    scale = float(np.sum(np.abs(inter_depth_head(f, kernel, bias, factor) * up)))
    analytic = np.concatenate([g_f.ravel(), g_k.ravel(), [g_b]])
    return gradcheck.Trial(analytic, np.concatenate([num_f.ravel(), num_k.ravel(), num_b]), scale)


E2E_KINK_MARGIN = 1e-5


def _relu_margin(model: ToyModel, scene: Scene, teacher_out: Outputs) -> float:
    """Smallest nonzero |pre-activation| or |residual| the perturbation could cross."""
    out, cache = student_forward(model, scene)
    vals = list(cache.dec_pre)
    p = model.params
    for j in range(PYRAMID_LEVELS):
        vals.append(cache.pooled_img[j] @ p[f"cam_proj.{j + 1}"])
        vals.append(cache.pooled_rad[j] @ p[f"rad_proj.{j + 1}"])
    for ref in (scene.gt_dense, scene.gt_sparse):
        vals.append(np.where(ref > 0, out.depth - ref, np.inf))
    for s, t in zip(out.inter, teacher_out.inter):
        vals.append(s - t)
    flat = np.abs(np.concatenate([np.ravel(v) for v in vals]))
    flat = flat[flat > 0]
    return float(flat.min()) if flat.size else math.inf


def _trial_model(rng, detach_u=True, size=32, n_coords=30):
    scene = gen_scene(int(rng.integers(0, 2**31)), size, size)
    teacher_out = Teacher().forward(scene)
    gamma = LossWeights(*rng.uniform(0.5, 2.0, size=4))
    beta = float(rng.uniform(0.5, 2.0))
    model = ToyModel.init(int(rng.integers(0, 2**31)))
    while _relu_margin(model, scene, teacher_out) < E2E_KINK_MARGIN:
        model = ToyModel.init(int(rng.integers(0, 2**31)))
    frozen = frozen_weights(model, scene, teacher_out, beta) if detach_u else None
    res = scene_objective(model, scene, teacher_out, gamma, beta, detach_u, frozen)
    keys = sorted(model.params)
    sizes = [model.params[k].size for k in keys]
    flat = np.concatenate([model.params[k].ravel() for k in keys])
    analytic = np.concatenate([res.param_grads[k].ravel() for k in keys])

    def f(v):
        m = ToyModel({})
        off = 0
        for k, n in zip(keys, sizes):
            m.params[k] = v[off : off + n].reshape(model.params[k].shape)
            off += n
        return scene_objective(m, scene, teacher_out, gamma, beta, detach_u, frozen, need_grad=False).total

    idx = rng.choice(flat.size, size=n_coords, replace=False)
    numeric = gradcheck.finite_diff(f, flat, indices=idx)
    return gradcheck.Trial(analytic[idx], numeric[idx], res.total)


gradcheck.register("channel_project", _trial_channel_project, gradcheck.TOL_ELEMENTWISE)
gradcheck.register("inter_depth_head", _trial_inter_depth_head, gradcheck.TOL_ELEMENTWISE)
gradcheck.register("toy_model", _trial_model, gradcheck.TOL_END_TO_END, n_trials=4)
gradcheck.register(
    "toy_model_full", lambda rng: _trial_model(rng, detach_u=False), gradcheck.TOL_END_TO_END, n_trials=4
)
