import copy
import json
import os

import numpy as np
import pandas as pd
import pytest

from curigs import GaussianCloud as GC
from curigs import training as TR
from curigs.CameraPose import look_at
from curigs.metrics import ShapeMismatch, ssim
from curigs.pytools import ConfigError, load_params
from curigs.rasterizer import RenderGradients, RenderOutput, render
from curigs.StudentPool import StudentView, TrainView

from conftest import front_camera, kink_free_cloud, numeric_grad, smooth_cloud


def small_params(**changes):
    params = load_params()
    params.update(iterations=40, eval_interval=10, seed=0)
    params["init"].update(n_points=60)
    params["curriculum"].update(
        levels=[1, 2], per_level_count=2, start_iter=7, end_iter=35, promotion_threshold=0.0
    )
    params["densify"].update(start_iter=10, end_iter=30, interval=5)
    for key, value in changes.items():
        if isinstance(value, dict):
            params[key].update(value)
        else:
            params[key] = value
    return params


class RampOracle:
    def predict(self, image, pose):
        h, w = np.shape(image)[:2]
        return np.tile(np.linspace(1, 2, w), (h, 1))


# Losses


def test_loss_recon_examples(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    value, grad = TR.loss_recon(a, a, 0.2)
    assert value == pytest.approx(0, abs=1e-12)
    value, _ = TR.loss_recon(a + 0.1, a, 0.0)
    assert value == pytest.approx(0.1)
    value, _ = TR.loss_recon(a + 0.1, a, 1.0)
    assert value == pytest.approx(1 - ssim(a + 0.1, a))
    with pytest.raises(ShapeMismatch):
        TR.loss_recon(a, a[:8], 0.2)


def test_loss_recon_ignores_unmasked_pixels(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    b = a.copy()
    b[8:] = 0
    mask = np.zeros((16, 16), dtype=bool)
    mask[:8] = True
    value, grad = TR.loss_recon(b, a, 0.2, mask)
    assert value == pytest.approx(0, abs=1e-12)
    assert not grad[8:].any()
    value, grad = TR.loss_recon(b, a, 0.2, np.zeros((16, 16), dtype=bool))
    assert value == 0 and not grad.any()


@pytest.mark.parametrize("use_mask", [False, True])
def test_loss_recon_gradient(rng, use_mask):
    ref = rng.uniform(0.2, 0.8, (14, 15, 3))
    img = ref + rng.uniform(0.05, 0.1, ref.shape) * rng.choice([-1, 1], ref.shape)
    mask = rng.random((14, 15)) < 0.6 if use_mask else None
    _, grad_a, grad_b = TR.loss_recon(img, ref, 0.3, mask, both=True)
    numeric = numeric_grad(lambda: TR.loss_recon(img, ref, 0.3, mask)[0], img, h=1e-5)
    np.testing.assert_allclose(grad_a, numeric, rtol=1e-4, atol=1e-9)
    numeric = numeric_grad(lambda: TR.loss_recon(img, ref, 0.3, mask)[0], ref, h=1e-5)
    np.testing.assert_allclose(grad_b, numeric, rtol=1e-4, atol=1e-9)


def fake_render(color, depth):
    return RenderOutput(color, depth, np.zeros(depth.shape))


def test_loss_student_examples(rng):
    color = rng.uniform(0, 1, (16, 16, 3))
    depth = np.tile(np.linspace(1, 2, 16), (16, 1))
    weights = TR.LossWeights()
    same = TR.loss_student(fake_render(color, depth), fake_render(color, depth), RampOracle(),
                           weights)
    assert same.value == pytest.approx(0, abs=1e-9)
    assert not same.depth_skipped

    other = TR.loss_student(fake_render(color, depth), fake_render(color * 0.5, depth),
                            TR.NullDepthOracle(), weights)
    assert other.depth_skipped
    assert other.depth == 0
    assert other.value == pytest.approx(weights.lambda_p * other.photo)
    assert not other.grad_depth_a.any()


def test_loss_student_without_depth_term(rng):
    color = rng.uniform(0, 1, (16, 16, 3))
    depth = np.zeros((16, 16))
    weights = TR.LossWeights(lambda_d=0.0)
    out = TR.loss_student(fake_render(color, depth), fake_render(color, depth),
                          TR.NullDepthOracle(), weights)
    assert not out.depth_skipped


def student_camera():
    return look_at((0.3, -4, 0.2), (0, 0, 0), width=24, height=24, id="s")


def views(cloud, rng, sign=None):
    cam = front_camera()
    base = render(cloud, cam).color
    if sign is None:
        sign = rng.choice([-1, 1], base.shape)
    offset = rng.uniform(0.05, 0.1, base.shape) * sign
    gt = TrainView("c", cam, base + offset)
    student = StudentView("c@1#0", "c", 1.0, student_camera())
    return gt, student


def test_single_and_dual_models_agree_without_student_term():
    rng = np.random.default_rng(0)
    a = smooth_cloud(rng)
    b = smooth_cloud(rng)
    gt, student = views(a, rng)
    weights = TR.LossWeights(lambda_3=0.0)
    sample = TR.Sample(gt, gt, student)
    single = TR.total_loss(a, None, sample, weights, RampOracle())
    dual = TR.total_loss(a, b, sample, weights, RampOracle())
    for name in GC.PARAM_NAMES:
        assert getattr(single.grads_a, name).tobytes() == getattr(dual.grads_a, name).tobytes()
    assert single.grads_b is None
    assert "student" not in dual.terms
    assert single.student_render is not None


def test_total_loss_without_curriculum_is_supervised_only():
    rng = np.random.default_rng(1)
    a = smooth_cloud(rng)
    gt, _ = views(a, rng)
    weights = TR.LossWeights(lambda_1=0.7, lambda_2=0.3)
    loss = TR.total_loss(a, None, TR.Sample(gt, gt), weights, RampOracle())
    single, _ = TR.loss_recon(render(a, gt.pose).color, gt.reference, weights.lambda_s)
    assert loss.value == pytest.approx(single)
    assert set(loss.terms) == {"train_a", "gt_a"}
    assert loss.student_render is None


@pytest.mark.parametrize("seed", range(20))
def test_total_loss_gradients(seed):
    a = kink_free_cloud(seed, [front_camera(), student_camera()])
    b = a.copy()
    b.color += 0.3
    rng = np.random.default_rng(seed)
    # references below both renders keep every L1 term away from its kink
    gt, student = views(a, rng, sign=-1)
    weights = TR.LossWeights(lambda_d=0.3, lambda_t=0.2)
    sample = TR.Sample(gt, gt, student)
    loss = TR.total_loss(a, b, sample, weights, RampOracle())
    assert not loss.depth_skipped
    assert set(loss.terms) >= {"train_a", "gt_a", "train_b", "gt_b", "depth_a", "depth_b",
                               "student"}

    def value():
        return TR.total_loss(a, b, sample, weights, RampOracle()).value

    for model, grads in ((a, loss.grads_a), (b, loss.grads_b)):
        for name in GC.PARAM_NAMES:
            numeric = numeric_grad(value, getattr(model, name), h=1e-6)
            np.testing.assert_allclose(getattr(grads, name), numeric, rtol=1e-3, atol=1e-6,
                                       err_msg=name)


def test_teacher_view_depth_term():
    rng = np.random.default_rng(4)
    a = smooth_cloud(rng)
    b = smooth_cloud(rng)
    gt, _ = views(a, rng)
    sample = TR.Sample(gt, gt)
    plain = TR.total_loss(a, b, sample, TR.LossWeights(), RampOracle())
    loss = TR.total_loss(a, b, sample, TR.LossWeights(lambda_t=0.5), RampOracle())
    for prefix, model in (("a", a), ("b", b)):
        expected, _ = TR.loss_view_depth(render(model, gt.pose), gt, RampOracle())
        assert loss.terms[f"depth_{prefix}"] == pytest.approx(expected)
    assert loss.value == pytest.approx(
        plain.value + 0.5 * (loss.terms["depth_a"] + loss.terms["depth_b"])
    )
    assert "depth_a" not in plain.terms

    flat = TR.total_loss(a, b, sample, TR.LossWeights(lambda_t=0.5), TR.NullDepthOracle())
    assert flat.depth_skipped
    assert flat.value == pytest.approx(plain.value)


# Optimization


def test_first_adam_step_moves_by_the_learning_rate(rng):
    p = dict(x=rng.normal(size=5))
    g = dict(x=rng.normal(size=5))
    start = p["x"].copy()
    moments = TR.AdamMoments.zeros_like(p)
    TR.adam_step(p, g, moments, dict(x=0.01))
    np.testing.assert_allclose(p["x"], start - 0.01 * np.sign(g["x"]), rtol=1e-9)
    assert moments.step == 1


def test_adam_matches_closed_form(rng):
    p = dict(x=np.zeros(3))
    moments = TR.AdamMoments.zeros_like(p)
    g = np.array([1.0, -2.0, 0.5])
    for _ in range(5):
        TR.adam_step(p, dict(x=g), moments, dict(x=0.1), eps=0.0)
    # a constant gradient keeps the corrected step at lr * sign(g)
    np.testing.assert_allclose(p["x"], -0.5 * np.sign(g), rtol=1e-9)


def test_expon_lr():
    assert TR.expon_lr(0, 1e-3, 1e-5, 100) == pytest.approx(1e-3)
    assert TR.expon_lr(100, 1e-3, 1e-5, 100) == pytest.approx(1e-5)
    assert TR.expon_lr(50, 1e-3, 1e-5, 100) == pytest.approx(1e-4)
    assert TR.expon_lr(500, 1e-3, 1e-5, 100) == pytest.approx(1e-5)


def opaque_cloud(rng, n=6):
    cloud = smooth_cloud(rng, n)
    cloud.opacity_logit[:] = GC.logit(0.5)
    return cloud


def stats_with(values):
    stats = TR.DensifyStats(len(values))
    stats.accum[:] = values
    stats.count[:] = 1
    return stats


DENSIFY = dict(min_opacity=0.01, grad_threshold=1.0, max_primitives=100)


def test_densify_is_a_noop_without_candidates(rng):
    cloud = opaque_cloud(rng)
    new, source = TR.densify_and_prune(cloud, stats_with(np.zeros(6)), DENSIFY, rng)
    assert new.fingerprint() == cloud.fingerprint()
    assert source.tolist() == list(range(6))


def test_densify_prunes_and_clones(rng):
    cloud = opaque_cloud(rng)
    cloud.opacity_logit[1] = GC.logit(0.001)
    grads = np.array([0, 5, 0, 3, 0, 4.0])
    new, source = TR.densify_and_prune(cloud, stats_with(grads), DENSIFY, rng)
    assert source.tolist() == [0, 2, 3, 4, 5, -1, -1]
    np.testing.assert_array_equal(new.color[5], cloud.color[5])
    np.testing.assert_array_equal(new.color[6], cloud.color[3])
    assert not np.array_equal(new.mu[5], cloud.mu[5])


def test_densify_respects_the_cap(rng):
    cloud = opaque_cloud(rng)
    params = dict(DENSIFY, max_primitives=7)
    new, source = TR.densify_and_prune(cloud, stats_with(np.full(6, 2.0)), params, rng)
    assert len(new) == 7
    params = dict(DENSIFY, max_primitives=3)
    new, _ = TR.densify_and_prune(cloud, stats_with(np.full(6, 2.0)), params, rng)
    assert len(new) == 6


def test_densify_keeps_one_primitive(rng):
    cloud = opaque_cloud(rng)
    cloud.opacity_logit[:] = GC.logit(1e-4)
    cloud.opacity_logit[2] = GC.logit(2e-4)
    new, source = TR.densify_and_prune(cloud, stats_with(np.zeros(6)), DENSIFY, rng)
    assert source.tolist() == [2]


def test_optimizer_carries_moments_through_densification(rng):
    cloud = opaque_cloud(rng, 3)
    opt = TR.GaussianOptimizer(cloud, load_params()["optimizer"], 100)
    grads = RenderGradients(*(np.ones_like(p) for p in cloud.params().values()))
    opt.step(grads, 0)
    np.testing.assert_allclose(np.linalg.norm(opt.cloud.rot_quat, axis=1), 1)
    new, source = TR.densify_and_prune(
        cloud, stats_with(np.array([0, 2.0, 0])), DENSIFY, rng
    )
    opt.replace(new, source)
    assert opt.cloud is new
    assert opt.moments.m["mu"].shape == (4, 3)
    assert not opt.moments.m["mu"][3].any()
    assert opt.moments.m["mu"][1].all()


def test_init_cloud_from_points(tiny_scene, rng):
    params = dict(mode="points", n_points=25, noise=0.0)
    cloud = TR.init_cloud(tiny_scene, params, rng)
    assert len(cloud) == 25
    assert np.all(cloud.opacities() == pytest.approx(0.1))
    assert np.all(np.isin(cloud.mu[:, 0], tiny_scene.points[:, 0]))
    many = TR.init_cloud(tiny_scene, dict(params, n_points=1000), rng)
    assert len(many) == len(tiny_scene.points)


def test_init_cloud_at_random(tiny_scene, rng):
    cloud = TR.init_cloud(tiny_scene, dict(mode="random", n_points=40, noise=0.0), rng)
    lo, hi = tiny_scene.points[:, :3].min(axis=0), tiny_scene.points[:, :3].max(axis=0)
    assert len(cloud) == 40
    assert np.all((cloud.mu >= lo) & (cloud.mu <= hi))
    np.testing.assert_array_equal(cloud.rot_quat[:, 0], 1)


# Configuration


@pytest.mark.parametrize(
    "section, key, value",
    [
        (None, "iterations", 0),
        (None, "dual_model", "yes"),
        ("loss", "lambda_s", 1.5),
        ("loss", "lambda_3", -1),
        ("metric_weights", "ssim", 0.9),
        ("curriculum", "levels", [1, 2, 4]),
        ("curriculum", "sigma_r", 0.7),
        ("curriculum", "end_iter", 100),
        ("depth_oracle", "gamma", 2.0),
        ("loss", "lambda_t", -0.1),
        ("densify", "interval", 0),
        ("depth_oracle", "mode", "midas"),
        ("init", "mode", "sfm"),
    ],
)
def test_invalid_parameters(section, key, value):
    params = load_params()
    (params if section is None else params[section])[key] = value
    with pytest.raises(ConfigError):
        TR.validate_params(params)


def test_default_parameters_are_valid():
    TR.validate_params(load_params())
    for name in ("llff", "mipnerf360", "mipnerf360-long", "dtu", "dtu-strict"):
        TR.validate_params(load_params(overrides=dict(preset=name)))


# Training runs


def test_training_is_deterministic(tiny_scene):
    a = TR.train(small_params(), tiny_scene, verbose=False)
    b = TR.train(small_params(), tiny_scene, verbose=False)
    assert a.state.model_a.fingerprint() == b.state.model_a.fingerprint()
    assert a.state.model_b.fingerprint() == b.state.model_b.fingerprint()
    pd.testing.assert_frame_equal(a.students, b.students)


def test_partner_does_not_steer_without_student_term(tiny_scene):
    loss = dict(lambda_3=0.0)
    dual = TR.train(small_params(loss=loss), tiny_scene, verbose=False)
    single = TR.train(small_params(loss=loss, dual_model=False), tiny_scene, verbose=False)
    assert single.state.model_b is None
    assert dual.state.model_a.fingerprint() == single.state.model_a.fingerprint()


def test_curriculum_promotes_every_teacher_once(tiny_scene):
    result = TR.train(small_params(), tiny_scene, verbose=False)
    state = result.state
    n_teachers = len(tiny_scene.split["train"])
    assert len(state.curriculum.promoted) == 2 * n_teachers
    assert len(state.train_views) == 3 * n_teachers
    assert result.events.count("unlocked") == 2
    assert result.events.count("promoted") == 2 * n_teachers
    assert result.events.count("evaluated") == 35 - 7
    assert len(result.students) == 35 - 7
    for view in state.curriculum.promoted:
        student = state.curriculum.pool.get(view.id)
        assert view.reference.tobytes() == student.best_render.tobytes()


def test_training_without_curriculum(tiny_scene):
    params = small_params(curriculum=dict(enabled=False))
    result = TR.train(params, tiny_scene, verbose=False)
    assert result.state.curriculum is None
    assert result.events.count("unlocked") == 0
    assert result.events.count("promoted") == 0
    assert result.students.empty
    assert list(result.metrics.iteration.unique()) == [10, 20, 30, 40]


def test_training_outputs(tiny_scene, tmp_path):
    out = str(tmp_path / "run")
    result = TR.train(small_params(), tiny_scene, out, verbose=False, info=dict(views=None))
    for name in ("manifest.json", "ckpt_final.hdf5", "ckpt_partner.hdf5", "metrics.csv",
                 "loss.csv", "students.csv", "events.jsonl", "timing.json",
                 "promoted/promoted.json"):
        assert os.path.isfile(os.path.join(out, name)), name
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert manifest["seed"] == 0 and manifest["config"]["iterations"] == 40
    assert "views" in manifest
    test_id = tiny_scene.split["test"][0]
    assert os.path.isfile(os.path.join(out, "renders", f"{test_id}.png"))
    assert GC.Open(os.path.join(out, "ckpt_final.hdf5")).fingerprint() == (
        result.state.model_a.fingerprint()
    )
    events = [json.loads(line) for line in open(os.path.join(out, "events.jsonl"))]
    assert len(events) == len(result.events.records)


def test_divergence_is_reported(tiny_scene, tmp_path, monkeypatch):
    init = TR.init_cloud

    def broken(scene, params, rng):
        cloud = init(scene, params, rng)
        cloud.color[:] = np.nan
        return cloud

    monkeypatch.setattr(TR, "init_cloud", broken)
    out = str(tmp_path / "run")
    with pytest.raises(TR.TrainingDiverged):
        TR.train(small_params(), tiny_scene, out, verbose=False)
    dump = json.load(open(os.path.join(out, "nan_dump.json")))
    assert dump["iteration"] == 0
    assert os.path.isfile(os.path.join(out, "nan_dump.hdf5"))


def test_teacher_views_with_masks(tiny_scene):
    masked = TR.teacher_views(tiny_scene, True)
    assert all(v.mask is not None for v in masked)
    assert [v.id for v in masked] == tiny_scene.split["train"]
    assert all(v.mask is None for v in TR.teacher_views(tiny_scene, False))


def test_masked_training_runs(tiny_scene):
    params = small_params(use_masks=True, iterations=20)
    params["curriculum"].update(start_iter=5, end_iter=15)
    result = TR.train(copy.deepcopy(params), tiny_scene, verbose=False)
    assert np.isfinite(result.losses.total).all()
