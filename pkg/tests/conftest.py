import hypothesis
import numpy as np
import pytest

from curigs import GaussianCloud as GC
from curigs import rasterizer as R
from curigs.CameraPose import look_at
from curigs.synthetic import SceneSpec, make_scene

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("default", max_examples=20, deadline=None)
hypothesis.settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", help="Run the acceptance runs.")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def numeric_grad(f, arr, h=1e-4):
    """Central finite differences of the scalar f() with respect to every
    entry of `arr`, which is perturbed in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        up = f()
        arr[idx] = orig - h
        down = f()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def front_camera(width=24, height=24, distance=4.0, fov=45.0):
    """Camera on -y looking at the origin, z up."""
    return look_at((0, -distance, 0), (0, 0, 0), fov_deg=fov, width=width, height=height, id="c")


def random_cloud(rng, n, spread=0.6, scale=(0.05, 0.15), alpha=(0.3, 0.9)):
    rot = rng.normal(size=(n, 4))
    return GC.GaussianCloud(
        rng.normal(0, spread, (n, 3)),
        np.log(rng.uniform(*scale, (n, 3))),
        rot / np.linalg.norm(rot, axis=1, keepdims=True),
        GC.logit(rng.uniform(*alpha, n)),
        rng.uniform(0.05, 0.95, (n, 3)),
    )


def smooth_cloud(rng, n=5):
    """Splats much larger than the image, so that no footprint cut-off,
    opacity clamp or early termination falls inside it."""
    rot = rng.normal(size=(n, 4))
    mu = rng.normal(0, 0.15, (n, 3))
    # well separated depths along the viewing axis of front_camera
    mu[:, 1] = np.linspace(-0.6, 0.6, n) + rng.uniform(-0.05, 0.05, n)
    return GC.GaussianCloud(
        mu,
        np.log(rng.uniform(1.5, 2.5, (n, 3))),
        rot / np.linalg.norm(rot, axis=1, keepdims=True),
        GC.logit(rng.uniform(0.2, 0.6, n)),
        rng.uniform(0.1, 0.5, (n, 3)),
    )


def sharp_cloud(rng, n=5):
    """Splats of a few pixels on a front_camera image: footprint cut-offs,
    overlaps and early termination all fall inside it. The first splat sits
    on the central pixel with an opacity above the clamp, the second one
    right behind it."""
    rot = rng.normal(size=(n, 4))
    mu = rng.normal(0, 0.25, (n, 3))
    mu[:, 1] = np.linspace(-0.8, 0.8, n) + rng.uniform(-0.05, 0.05, n)
    mu[0, [0, 2]] = 0.0
    mu[1, [0, 2]] = rng.normal(0, 0.05, 2)
    alpha = rng.uniform(0.5, 0.95, n)
    alpha[0] = 0.999
    return GC.GaussianCloud(
        mu,
        np.log(rng.uniform(0.12, 0.35, (n, 3))),
        rot / np.linalg.norm(rot, axis=1, keepdims=True),
        GC.logit(alpha),
        rng.uniform(0.05, 0.6, (n, 3)),
    )


def render_margins(cloud, cam, t_min=R.T_MIN):
    """Distances of a render to the discontinuities of the compositing:
    squared Mahalanobis distance to the footprint cut-off, opacity to the
    clamp, and relative transmittance to the termination threshold."""
    splats = [g.project(cam, index=i) for i, g in enumerate(cloud)]
    splats = sorted((p for p in splats if p is not None), key=lambda p: (p.depth, p.index))
    alpha = cloud.opacities()
    yy, xx = np.mgrid[0 : cam.height, 0 : cam.width]
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
    T = np.ones(len(pix))
    cut = clamp = stop = np.inf
    for p in splats:
        if t_min > 0:
            stop = min(stop, np.abs(T / t_min - 1).min())
        live = T >= t_min
        d = pix - p.mean2d
        m = np.einsum("ni,ij,nj->n", d, np.linalg.inv(p.cov2d), d)
        cut = min(cut, np.abs(m - R.M_CUTOFF)[live].min(initial=np.inf))
        inside = m <= R.M_CUTOFF
        raw = alpha[p.index] * np.where(inside, np.exp(-0.5 * m), 0.0)
        clamp = min(clamp, np.abs(raw - R.ALPHA_MAX)[live & inside].min(initial=np.inf))
        T = T * (1 - np.where(live, np.minimum(raw, R.ALPHA_MAX), 0.0))
    return cut, clamp, stop


def kink_free_cloud(seed, cams, t_min=R.T_MIN, tries=500):
    """First sharp_cloud of a seeded sequence that sits away from every
    discontinuity of its renders, so central differences are valid."""
    for k in range(tries):
        cloud = sharp_cloud(np.random.default_rng([seed, k]))
        margins = [render_margins(cloud, cam, t_min) for cam in cams]
        if all(cut > 1e-3 and clamp > 1e-3 and stop > 1e-2 for cut, clamp, stop in margins):
            return cloud
    raise RuntimeError(f"No kink free cloud for seed {seed}.")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return front_camera()


@pytest.fixture(scope="session")
def tiny_scene():
    return make_scene(SceneSpec(n_gaussians=60, layout="object", n_cameras=8, seed=3,
                                width=24, height=24))
