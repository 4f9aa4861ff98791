#!/usr/bin/env python3
#
# Dual-model training with curriculum-guided student views
#
# Two clouds with independent parameters see the same supervised views.
# While the curriculum is active, a student view of the visited teacher is
# rendered by both: the first model is pulled towards the pseudo depth and
# both are pulled towards each other. Student renders of the first model
# are scored and the best ones get promoted to supervised views.
#
# October 2026

import json
import os
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Protocol

import click
import numpy as np
import pandas as pd
from progressbar import progressbar
from scipy.spatial import cKDTree

from . import GaussianCloud as GC
from .CameraPose import generate_student_pools
from .curriculum import (
    CurriculumState,
    EventLog,
    ScheduleParams,
    finished_level,
    is_active,
    sample_student,
    save_promoted,
    unlocked_level,
)
from .evaluate import score_views, write_render
from .metrics import (
    BuiltinMetrics,
    DegenerateDepth,
    EmptyBackground,
    MetricWeights,
    ShapeMismatch,
    composite_score,
    pearson_depth_loss_with_grad,
    propagate_background_mask,
    ssim_with_grad,
)
from .pytools import ConfigError, load_params, version_string
from .rasterizer import render, render_backward, zero_gradients
from .StudentPool import TrainView
from .synthetic import GroundTruthDepthOracle, load_dataset

progress = partial(progressbar, redirect_stdout=True)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 0.2
    lambda_d: float = 0.05
    lambda_p: float = 1.0
    lambda_1: float = 1.0
    lambda_2: float = 1.0
    lambda_3: float = 0.5
    lambda_t: float = 0.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("Loss weights must be nonnegative.")
        if self.lambda_s > 1:
            raise ValueError("lambda_s must lie in [0, 1].")


class DepthOracle(Protocol):
    def predict(self, image, pose) -> np.ndarray: ...


class NullDepthOracle:
    """Constant depth, which disables the depth term."""

    def __repr__(self):
        return "NullDepthOracle<>"

    def predict(self, image, pose):
        return np.zeros(np.shape(image)[:2])


def make_depth_oracle(params, scene):
    mode = params["mode"]
    if mode == "null":
        return NullDepthOracle()
    return GroundTruthDepthOracle(scene, params.get("gamma"), mode)


# Losses


def loss_recon(render, reference, lambda_s, mask=None, both=False):
    """(1 - lambda_s) L1 + lambda_s (1 - SSIM) and its gradient.

    With a mask, L1 is averaged over the masked pixels and SSIM compares the
    masked images. With `both`, the gradient with respect to `reference` is
    returned as well."""
    render = np.asarray(render, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if render.shape != reference.shape:
        raise ShapeMismatch(f"Shapes differ: {render.shape} vs {reference.shape}")

    if mask is None:
        weight = np.ones(render.shape)
    else:
        weight = np.broadcast_to(np.asarray(mask, dtype=float)[..., None], render.shape)
    n = weight.sum()
    if n == 0:
        zeros = np.zeros(render.shape)
        return (0.0, zeros, zeros) if both else (0.0, zeros)

    diff = render - reference
    l1 = np.sum(np.abs(diff) * weight) / n
    g1 = np.sign(diff) * weight / n
    value = (1 - lambda_s) * l1
    grad_a = (1 - lambda_s) * g1
    grad_b = -(1 - lambda_s) * g1

    if lambda_s > 0:
        a, b = render * weight, reference * weight
        s, gs = ssim_with_grad(a, b)
        value += lambda_s * (1 - s)
        grad_a = grad_a - lambda_s * gs * weight
        if both:
            grad_b = grad_b - lambda_s * ssim_with_grad(b, a)[1] * weight
    return (float(value), grad_a, grad_b) if both else (float(value), grad_a)


def photometric(a, b, lambda_s):
    """Hybrid photometric loss between two renders, with both gradients."""
    return loss_recon(a, b, lambda_s, both=True)


@dataclass(eq=False)
class StudentLoss:
    value: float
    depth: float
    photo: float
    grad_color_a: np.ndarray
    grad_depth_a: np.ndarray
    grad_color_b: np.ndarray
    depth_skipped: bool = False


def loss_student(render_a, render_b, oracle, weights, pose=None):
    """Depth correlation of model a with the oracle plus the photometric
    agreement of both models, on one student view.

    When the depth term is degenerate it is dropped for this call and
    `depth_skipped` is set."""
    shape = render_a.depth.shape
    grad_depth = np.zeros(shape)
    depth, skipped = 0.0, False
    if weights.lambda_d > 0:
        pseudo = oracle.predict(render_a.color, pose)
        try:
            depth, g = pearson_depth_loss_with_grad(render_a.depth, pseudo, pseudo > 0)
            grad_depth = weights.lambda_d * g
        except DegenerateDepth:
            depth, skipped = 0.0, True

    photo, ga, gb = photometric(render_a.color, render_b.color, weights.lambda_s)
    value = weights.lambda_d * depth + weights.lambda_p * photo
    return StudentLoss(
        float(value),
        float(depth),
        float(photo),
        weights.lambda_p * ga,
        grad_depth,
        weights.lambda_p * gb,
        skipped,
    )


def loss_view_depth(render, view, oracle):
    """Depth correlation of a render with the oracle depth of a real view.

    Raises DegenerateDepth like pearson_depth_loss."""
    pseudo = oracle.predict(view.reference, view.pose)
    return pearson_depth_loss_with_grad(render.depth, pseudo, pseudo > 0)


@dataclass(eq=False)
class Sample:
    train_view: TrainView
    gt_view: TrainView
    student: object = None


@dataclass(eq=False)
class TotalLoss:
    value: float
    terms: dict
    grads_a: object
    grads_b: object = None
    student_render: object = None
    depth_skipped: bool = False


class _Upstream:
    """Renders of one model and the loss gradients flowing into them."""

    def __init__(self, cloud):
        self.cloud = cloud
        self.items = dict()

    def render(self, key, pose):
        if key not in self.items:
            out = render(self.cloud, pose)
            self.items[key] = [pose, out, np.zeros(out.color.shape), np.zeros(out.depth.shape)]
        return self.items[key][1]

    def add(self, key, color=None, depth=None):
        item = self.items[key]
        if color is not None:
            item[2] += color
        if depth is not None:
            item[3] += depth

    def backward(self):
        grads = zero_gradients(len(self.cloud))
        for pose, out, gc, gd in self.items.values():
            grads.accumulate(render_backward(self.cloud, pose, gc, gd, out))
        return grads


def _supervised_terms(up, sample, weights, prefix):
    terms = dict()
    for name, view, lam in (
        ("train", sample.train_view, weights.lambda_1),
        ("gt", sample.gt_view, weights.lambda_2),
    ):
        key = ("view", view.id)
        out = up.render(key, view.pose)
        value, grad = loss_recon(out.color, view.reference, weights.lambda_s, view.mask)
        up.add(key, color=lam * grad)
        terms[f"{name}_{prefix}"] = value
    return terms


def total_loss(model_a, model_b, sample, weights, oracle):
    """lambda_1 L_train + lambda_2 L_gt (+ lambda_t depth on the real view)
    for each model plus lambda_3 L_stu.

    `model_b` may be None for a single model run, in which case the student
    term is dropped. Returns the loss value, its terms and the gradients of
    both models."""
    up_a = _Upstream(model_a)
    up_b = None if model_b is None else _Upstream(model_b)

    terms = _supervised_terms(up_a, sample, weights, "a")
    if up_b is not None:
        terms.update(_supervised_terms(up_b, sample, weights, "b"))
    value = sum(
        (weights.lambda_1 if k.startswith("train") else weights.lambda_2) * v
        for k, v in terms.items()
    )

    skipped = False
    if weights.lambda_t > 0:
        view = sample.gt_view
        key = ("view", view.id)
        for prefix, up in (("a", up_a), ("b", up_b)):
            if up is None:
                continue
            try:
                depth, grad = loss_view_depth(up.render(key, view.pose), view, oracle)
            except DegenerateDepth:
                skipped = True
                continue
            up.add(key, depth=weights.lambda_t * grad)
            terms[f"depth_{prefix}"] = depth
            value += weights.lambda_t * depth

    student_render = None
    if sample.student is not None:
        key = ("student", sample.student.id)
        student_render = up_a.render(key, sample.student.pose)
        if up_b is not None and weights.lambda_3 > 0:
            rb = up_b.render(key, sample.student.pose)
            stu = loss_student(student_render, rb, oracle, weights, sample.student.pose)
            lam = weights.lambda_3
            up_a.add(key, color=lam * stu.grad_color_a, depth=lam * stu.grad_depth_a)
            up_b.add(key, color=lam * stu.grad_color_b)
            terms.update(student=stu.value, student_depth=stu.depth, student_photo=stu.photo)
            value += lam * stu.value
            skipped = skipped or stu.depth_skipped

    grads_a = up_a.backward()
    grads_b = None if up_b is None else up_b.backward()
    return TotalLoss(float(value), terms, grads_a, grads_b, student_render, skipped)


# Optimization


def expon_lr(step, lr_init, lr_final, max_steps):
    """Log-linear interpolation from lr_init to lr_final over max_steps."""
    if lr_init == 0 or lr_final == 0:
        return lr_init if step < max_steps else lr_final
    t = np.clip(step / max(max_steps, 1), 0, 1)
    return float(np.exp((1 - t) * np.log(lr_init) + t * np.log(lr_final)))


@dataclass(eq=False)
class AdamMoments:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params, grads, moments, lrs, beta1=0.9, beta2=0.999, eps=1e-15):
    """Bias corrected Adam update, in place on `params` and `moments`.

    `lrs` maps each parameter name to its learning rate."""
    moments.step += 1
    c1 = 1 - beta1**moments.step
    c2 = 1 - beta2**moments.step
    for name, p in params.items():
        g = grads[name]
        m, v = moments.m[name], moments.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, moments


class GaussianOptimizer:
    def __init__(self, cloud, params, max_steps):
        self.cloud = cloud
        self.params = params
        self.max_steps = max_steps
        self.moments = AdamMoments.zeros_like(cloud.params())

    def __repr__(self):
        return f"GaussianOptimizer<{len(self.cloud)}, step {self.moments.step}>"

    def learning_rates(self, iteration):
        p = self.params
        return dict(
            mu=expon_lr(iteration, p["position_lr_init"], p["position_lr_final"], self.max_steps),
            log_scale=p["scaling_lr"],
            rot_quat=p["rotation_lr"],
            opacity_logit=p["opacity_lr"],
            color=p["color_lr"],
        )

    def step(self, grads, iteration):
        adam_step(
            self.cloud.params(),
            grads.params(),
            self.moments,
            self.learning_rates(iteration),
            self.params["beta1"],
            self.params["beta2"],
            self.params["eps"],
        )
        self.cloud.normalize_quaternions()

    def replace(self, cloud, source):
        """Switches to a densified cloud; row i comes from row source[i]
        (-1 for fresh rows, whose moments start at 0)."""
        fresh = source < 0
        for moments in (self.moments.m, self.moments.v):
            for name, arr in moments.items():
                new = arr[np.where(fresh, 0, source)]
                new[fresh] = 0
                moments[name] = new
        self.cloud = cloud


class DensifyStats:
    """Accumulated screen-space positional gradient norms."""

    def __init__(self, n):
        self.reset(n)

    def reset(self, n):
        self.accum = np.zeros(n)
        self.count = np.zeros(n)

    def update(self, grads):
        norm = np.linalg.norm(grads.mean2d, axis=1)
        seen = norm > 0
        self.accum[seen] += norm[seen]
        self.count[seen] += 1

    def mean(self):
        return self.accum / np.maximum(self.count, 1)


def densify_and_prune(cloud, stats, params, rng):
    """Prunes transparent primitives and clones those with large positional
    gradients.

    Returns the new cloud and, for each of its rows, the source row of the
    input cloud (-1 for clones)."""
    alpha = cloud.opacities()
    keep = alpha >= params["min_opacity"]
    if not keep.any():
        keep[np.argmax(alpha)] = True
    kept = np.flatnonzero(keep)

    grad = stats.mean()
    candidates = kept[grad[kept] > params["grad_threshold"]]
    candidates = candidates[np.argsort(-grad[candidates], kind="stable")]
    room = max(params["max_primitives"] - len(kept), 0)
    clones = candidates[:room]

    new = cloud.subset(kept)
    if len(clones):
        extra = cloud.subset(clones)
        extra.mu += rng.normal(size=extra.mu.shape) * np.exp(extra.log_scale)
        new = new.concat(extra)
    source = np.concatenate([kept, np.full(len(clones), -1)])
    return new, source


def init_cloud(scene, params, rng):
    """Initial cloud from the scene points (with noise) or uniform in their
    bounding box. Scales follow the distance to the nearest neighbours."""
    points = scene.points
    mode = params["mode"]
    if mode == "points" and points is None:
        print("WARNING: Dataset has no points, initializing at random.")
        mode = "random"

    n = int(params["n_points"])
    if mode == "points":
        idx = rng.choice(len(points), size=min(n, len(points)), replace=False)
        idx.sort()
        mu = points[idx, :3] + rng.normal(0, params["noise"], (len(idx), 3))
        if points.shape[1] >= 6:
            color = points[idx, 3:6].copy()
        else:
            color = np.full((len(idx), 3), 0.5)
    else:
        if points is not None:
            lo, hi = points[:, :3].min(axis=0), points[:, :3].max(axis=0)
        else:
            lo, hi = np.full(3, -1.0), np.full(3, 1.0)
        mu = rng.uniform(lo, hi, (n, 3))
        color = rng.uniform(0.2, 0.8, (n, 3))

    k = min(4, len(mu))
    if k > 1:
        dist, _ = cKDTree(mu).query(mu, k=k)
        scale = np.sqrt(np.mean(dist[:, 1:] ** 2, axis=1))
    else:
        scale = np.full(len(mu), 0.1)
    log_scale = np.repeat(np.log(np.maximum(scale, 1e-3))[:, None], 3, axis=1)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (len(mu), 1))
    opacity = np.full(len(mu), GC.logit(0.1))
    return GC.GaussianCloud(mu, log_scale, rot, opacity, color)


# Configuration


def validate_params(params):
    """Raises ConfigError on any invalid training parameter."""

    def check(cond, msg):
        if not cond:
            raise ConfigError(msg)

    try:
        check(int(params["iterations"]) >= 1, "iterations must be >= 1.")
        check(isinstance(params["dual_model"], bool), "dual_model must be true or false.")
        check(params["init"]["mode"] in ("points", "random"), "init.mode is points|random.")
        check(int(params["init"]["n_points"]) >= 1, "init.n_points must be >= 1.")
        check(float(params["init"]["noise"]) >= 0, "init.noise must be >= 0.")
        LossWeights(**params["loss"])
        MetricWeights(**params["metric_weights"])

        opt = params["optimizer"]
        for key in ("position_lr_init", "position_lr_final", "color_lr", "opacity_lr",
                    "scaling_lr", "rotation_lr"):
            check(float(opt[key]) >= 0, f"optimizer.{key} must be >= 0.")
        check(0 <= opt["beta1"] < 1 and 0 <= opt["beta2"] < 1, "Adam betas lie in [0, 1).")
        check(opt["eps"] > 0, "optimizer.eps must be positive.")

        dens = params["densify"]
        check(int(dens["interval"]) >= 1, "densify.interval must be >= 1.")
        check(0 <= dens["min_opacity"] < 1, "densify.min_opacity lies in [0, 1).")
        check(dens["grad_threshold"] >= 0, "densify.grad_threshold must be >= 0.")
        check(int(dens["max_primitives"]) >= 1, "densify.max_primitives must be >= 1.")

        oracle = params["depth_oracle"]
        check(oracle["mode"] in ("render", "nearest", "null"), "Unknown depth oracle mode.")
        if oracle.get("gamma") is not None:
            check(0.7 <= oracle["gamma"] <= 1.3, "depth_oracle.gamma lies in [0.7, 1.3].")

        check(int(params["eval_interval"]) >= 1, "eval_interval must be >= 1.")
        check(int(params["checkpoint_interval"]) >= 0, "checkpoint_interval must be >= 0.")

        cur = params["curriculum"]
        if cur["enabled"]:
            schedule(params)
            check(int(cur["per_level_count"]) >= 1, "curriculum.per_level_count must be >= 1.")
            check(0 <= cur["sigma_r"] <= 0.5, "curriculum.sigma_r lies in [0, 0.5].")
            check(0 <= cur["promotion_threshold"] <= 1, "promotion_threshold lies in [0, 1].")
            check(cur["mask_tau"] >= 0, "curriculum.mask_tau must be >= 0.")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"Invalid parameters: {err}") from err
    return params


def schedule(params):
    cur = params["curriculum"]
    return ScheduleParams.from_levels(
        cur["levels"], cur["start_iter"], cur["end_iter"], cur.get("stage_length")
    )


# Training loop


@dataclass(eq=False)
class TrainerState:
    model_a: object
    model_b: object
    opt_a: GaussianOptimizer
    opt_b: GaussianOptimizer
    train_views: list
    teacher_views: list
    curriculum: CurriculumState = None
    iteration: int = 0
    rngs: dict = field(default_factory=dict)

    def __repr__(self):
        return (
            f"Trainer<iter {self.iteration}, {len(self.train_views)} views, "
            f"{len(self.model_a)} splats>"
        )


@dataclass(eq=False)
class TrainResult:
    state: TrainerState
    metrics: pd.DataFrame
    losses: pd.DataFrame
    students: pd.DataFrame
    events: EventLog
    timing: dict
    params: dict = None


class _RoundRobin:
    """Shuffled cycles over a list: every item once per cycle."""

    def __init__(self, items, rng):
        self.items = list(items)
        self.rng = rng
        self._queue = []

    def next(self):
        if not self._queue:
            self._queue = [self.items[i] for i in self.rng.permutation(len(self.items))]
        return self._queue.pop(0)


def teacher_views(scene, use_masks):
    views = []
    for tid in scene.split["train"]:
        mask = scene.masks.get(tid) if use_masks else None
        views.append(TrainView(tid, scene.camera(tid), scene.images[tid], "teacher", mask))
    return views


def _student_masker(teachers, tau):
    by_id = {v.id: v for v in teachers}

    def masker(student):
        teacher = by_id[student.teacher_id]
        if teacher.mask is None:
            return None
        try:
            background = propagate_background_mask(
                teacher.reference, ~teacher.mask, student.best_render, tau
            )
        except EmptyBackground:
            print(f"WARNING: Teacher {teacher.id} has no background, student left unmasked.")
            return None
        return ~background

    return masker


def _nan_dump(out, state, sample, loss, iteration):
    if out is None:
        return
    state.model_a.save(os.path.join(out, "nan_dump.hdf5"))
    if state.model_b is not None:
        state.model_b.save(os.path.join(out, "nan_dump_partner.hdf5"))
    info = dict(
        iteration=iteration,
        train_view=sample.train_view.id,
        gt_view=sample.gt_view.id,
        student=None if sample.student is None else sample.student.id,
        loss=loss.value,
        terms=loss.terms,
    )
    with open(os.path.join(out, "nan_dump.json"), "w") as f:
        json.dump(info, f, indent=1, default=str)


def _all_finite(loss):
    if not np.isfinite(loss.value):
        return False
    if not loss.grads_a.all_finite():
        return False
    return loss.grads_b is None or loss.grads_b.all_finite()


def train(params, scene, out=None, verbose=True, plugin=None, info=None):
    """Trains model_a (and its partner model_b) on the training split.

    Writes manifest.json before the first iteration and, at the end,
    checkpoints, CSV logs, the event log and the promoted references when
    `out` is given."""
    validate_params(params)
    t_start = time.perf_counter()

    weights = LossWeights(**params["loss"])
    metric_weights = MetricWeights(**params["metric_weights"])
    plugin = plugin or BuiltinMetrics()
    iterations = int(params["iterations"])
    dual = bool(params["dual_model"])
    use_masks = bool(params["use_masks"]) and bool(scene.masks)
    cur = params["curriculum"]

    seeds = np.random.SeedSequence(int(params["seed"])).spawn(7)
    rngs = dict(
        zip(
            ("views", "students", "pool", "init_a", "init_b", "densify_a", "densify_b"),
            (np.random.default_rng(s) for s in seeds),
        )
    )

    teachers = teacher_views(scene, use_masks)
    if not teachers:
        raise ConfigError("Dataset has no training view.")
    test_cams = scene.test_cameras()
    model_a = init_cloud(scene, params["init"], rngs["init_a"])
    model_b = init_cloud(scene, params["init"], rngs["init_b"]) if dual else None
    opt = params["optimizer"]
    state = TrainerState(
        model_a,
        model_b,
        GaussianOptimizer(model_a, opt, iterations),
        GaussianOptimizer(model_b, opt, iterations) if dual else None,
        list(teachers),
        list(teachers),
        rngs=rngs,
    )
    if cur["enabled"]:
        pool = generate_student_pools(
            [v.pose for v in teachers],
            cur["levels"],
            int(cur["per_level_count"]),
            float(cur["sigma_r"]),
            rngs["pool"],
        )
        state.curriculum = CurriculumState(schedule(params), pool, cur["promotion_threshold"])
    masker = _student_masker(teachers, cur["mask_tau"]) if use_masks else None
    oracle = make_depth_oracle(params["depth_oracle"], scene)

    if out is not None:
        os.makedirs(out, exist_ok=True)
        write_manifest(out, params, **(info or dict()))
    events = EventLog(None if out is None else os.path.join(out, "events.jsonl"))

    gt_cycle = _RoundRobin(teachers, rngs["views"])
    stats_a = DensifyStats(len(model_a))
    stats_b = DensifyStats(len(model_b)) if dual else None
    dens = params["densify"]
    metrics_rows, loss_rows, student_rows = [], [], []
    warned_depth = False
    loop = progress(range(iterations + 1)) if verbose else range(iterations + 1)

    try:
        for t in loop:
            state.iteration = t
            curriculum = state.curriculum
            if curriculum is not None:
                level = finished_level(t, curriculum.params)
                if level is not None:
                    for view in curriculum.on_level_transition(level, masker):
                        state.train_views.append(view)
                        events.write(
                            "promoted", t, teacher_id=view.teacher_id, level=view.level,
                            student_id=view.id, nr_quality=view.nr_score,
                        )
                level = unlocked_level(t, curriculum.params)
                if level is not None:
                    events.write("unlocked", t, level=level)
            if t == iterations:
                break

            gt_view = gt_cycle.next()
            train_view = state.train_views[int(rngs["views"].integers(len(state.train_views)))]
            student = None
            if curriculum is not None and is_active(t, curriculum.params):
                student = sample_student(curriculum, gt_view.teacher_id, t, rngs["students"])
            sample = Sample(train_view, gt_view, student)

            loss = total_loss(state.model_a, state.model_b, sample, weights, oracle)
            if not _all_finite(loss):
                _nan_dump(out, state, sample, loss, t)
                raise TrainingDiverged(f"Non-finite loss or gradient at iteration {t}.")
            if loss.depth_skipped and not warned_depth:
                print(f"WARNING: Degenerate depth at iteration {t}, depth term skipped.")
                warned_depth = True
            loss_rows.append(
                dict(iteration=t, total=loss.value, depth_skipped=loss.depth_skipped, **loss.terms)
            )

            if student is not None:
                report = composite_score(
                    loss.student_render.color, gt_view.reference, plugin, metric_weights
                )
                improved = curriculum.record_evaluation(
                    student.id, report, loss.student_render.color
                )
                row = dict(iteration=t, view_id=student.id, **report.as_dict())
                student_rows.append(row)
                events.write(
                    "evaluated", t, teacher_id=student.teacher_id, level=student.level,
                    student_id=student.id, improved=improved, **report.as_dict(),
                )

            stats_a.update(loss.grads_a)
            state.opt_a.step(loss.grads_a, t)
            if dual:
                stats_b.update(loss.grads_b)
                state.opt_b.step(loss.grads_b, t)

            if dens["start_iter"] <= t < dens["end_iter"] and (t + 1) % dens["interval"] == 0:
                state.model_a = _densify(state.opt_a, stats_a, dens, rngs["densify_a"])
                if dual:
                    state.model_b = _densify(state.opt_b, stats_b, dens, rngs["densify_b"])

            if (t + 1) % params["eval_interval"] == 0 or t + 1 == iterations:
                if test_cams:
                    table = score_views(
                        state.model_a, test_cams, scene.images,
                        scene.masks if use_masks else None,
                    )
                    table.insert(0, "iteration", t + 1)
                    metrics_rows.append(table)

            ckpt = params["checkpoint_interval"]
            if out is not None and ckpt and (t + 1) % ckpt == 0:
                state.model_a.save(os.path.join(out, f"ckpt_{t + 1}.hdf5"))
    finally:
        events.close()

    timing = dict(
        seconds=time.perf_counter() - t_start,
        iterations=iterations,
        primitives=len(state.model_a),
    )
    metrics = pd.concat(metrics_rows, ignore_index=True) if metrics_rows else pd.DataFrame()
    losses = pd.DataFrame(loss_rows)
    students = pd.DataFrame(
        student_rows,
        columns=["iteration", "view_id", "ssim", "perceptual", "nr_quality", "composite"],
    )
    result = TrainResult(state, metrics, losses, students, events, timing, params)
    if out is not None:
        write_outputs(out, result, test_cams)
    return result


def _densify(optimizer, stats, params, rng):
    cloud, source = densify_and_prune(optimizer.cloud, stats, params, rng)
    optimizer.replace(cloud, source)
    stats.reset(len(cloud))
    return cloud


def write_manifest(out, params, **extra):
    manifest = dict(
        command="train",
        version=version_string(),
        seed=params["seed"],
        config=params,
        outputs=dict(
            checkpoint="ckpt_final.hdf5",
            partner="ckpt_partner.hdf5",
            metrics="metrics.csv",
            losses="loss.csv",
            students="students.csv",
            events="events.jsonl",
            renders="renders/",
        ),
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    )
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def write_outputs(out, result, test_cams):
    state = result.state
    state.model_a.save(os.path.join(out, "ckpt_final.hdf5"))
    if state.model_b is not None:
        state.model_b.save(os.path.join(out, "ckpt_partner.hdf5"))
    result.metrics.to_csv(os.path.join(out, "metrics.csv"), index=False)
    result.losses.to_csv(os.path.join(out, "loss.csv"), index=False)
    result.students.to_csv(os.path.join(out, "students.csv"), index=False)
    if state.curriculum is not None:
        save_promoted(state.curriculum.promoted, os.path.join(out, "promoted"))
    renders = os.path.join(out, "renders")
    os.makedirs(renders, exist_ok=True)
    for cam in test_cams:
        write_render(render(state.model_a, cam), renders, cam.id)
    with open(os.path.join(out, "timing.json"), "w") as f:
        json.dump(result.timing, f, indent=1)


@click.command(name="train")
@click.option("--data", "-d", type=click.Path(), required=True, help="Dataset folder.")
@click.option(
    "--config", "-c", type=click.Path(), help="Training parameters (see train_params.in)."
)
@click.option("--views", type=click.IntRange(min=1), help="Number of teacher views kept.")
@click.option("--no-curriculum", is_flag=True, help="Disables the student curriculum.")
@click.option("--seed", type=int, help="Random seed (overrides the configuration).")
@click.option("--out", "-o", type=click.Path(), default="run", show_default=True)
def CLI_train(data, config, views, no_curriculum, seed, out):
    """Trains a model on a dataset folder.

    Outputs manifest.json, ckpt_final.hdf5, metrics.csv, loss.csv,
    students.csv, events.jsonl and renders/ in OUT.
    """
    try:
        run(data, out, config, views=views, curriculum=not no_curriculum, seed=seed)
    except (ConfigError, TrainingDiverged, OSError, ValueError, KeyError) as err:
        print(f"ERROR: {err}")
        raise SystemExit(1)


def run(data, out, config=None, views=None, curriculum=True, seed=None, verbose=True):
    """Loads parameters and dataset, then trains."""
    overrides = dict()
    if seed is not None:
        overrides["seed"] = seed
    if not curriculum:
        overrides["curriculum"] = dict(enabled=False)
    params = load_params(config, overrides)
    validate_params(params)

    if not os.path.isdir(data):
        raise FileNotFoundError(f"Dataset '{data}' not found.")
    scene = load_dataset(data, views=views)
    print(f"Training on {len(scene.split['train'])} views of '{data}'.")
    info = dict(data=os.path.abspath(data), views=views, train_views=scene.split["train"])
    return train(params, scene, out, verbose=verbose, info=info)
