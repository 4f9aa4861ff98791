#!/usr/bin/env python3
#
# Synthetic scenes with known geometry
#
# A generating Gaussian cloud is rendered by the package's own rasterizer
# from a rig of cameras, which gives references, depths and masks whose
# global optimum is known. The dataset directory written here is also the
# ingestion format for converted real data.
#
# October 2026

import json
import os
from dataclasses import asdict, dataclass, field
from functools import partial

import click
import numpy as np
import yaml
from progressbar import progressbar
from scipy import ndimage

from . import GaussianCloud as GC
from .CameraPose import angular_distance, load_cameras, look_at, save_cameras
from .pytools import load_mask, load_pfm, load_png, save_mask, save_pfm, save_png
from .rasterizer import render

progress = partial(progressbar, redirect_stdout=True)

LAYOUTS = ("cluster", "object", "room")
RIGS = ("ring", "arc")
TEST_EVERY = 8
RING_RADIUS = 3.0
RING_ELEVATION = 25.0
ARC_SPAN = 30.0
ARC_ELEVATION = 10.0
FOV_DEG = 45.0
MASK_TRANSMITTANCE = 0.5


@dataclass(frozen=True)
class SceneSpec:
    n_gaussians: int
    layout: str = "object"
    n_cameras: int = 28
    rig: str = None
    seed: int = 0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise ValueError("n_gaussians must be >= 1.")
        if self.n_cameras < 2:
            raise ValueError("n_cameras must be >= 2.")
        if self.layout not in LAYOUTS:
            raise ValueError(f"Unknown layout '{self.layout}'.")
        if self.rig is None:
            object.__setattr__(self, "rig", "arc" if self.layout == "room" else "ring")
        if self.rig not in RIGS:
            raise ValueError(f"Unknown camera rig '{self.rig}'.")
        if self.width < 1 or self.height < 1:
            raise ValueError("Image size must be positive.")


@dataclass(eq=False)
class SyntheticScene:
    cameras: list
    images: dict
    depths: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    split: dict = field(default_factory=lambda: dict(train=[], test=[]))
    points: np.ndarray = None
    cloud_gt: object = None
    spec: SceneSpec = None

    def __repr__(self):
        return (
            f"Scene<{len(self.cameras)} cameras, "
            f"{len(self.split['train'])} train / {len(self.split['test'])} test>"
        )

    def camera(self, id):
        return self._by_id()[id]

    def _by_id(self):
        return {cam.id: cam for cam in self.cameras}

    def test_cameras(self):
        by_id = self._by_id()
        return [by_id[i] for i in self.split["test"]]

    def train_cameras(self):
        by_id = self._by_id()
        return [by_id[i] for i in self.split["train"]]


def _layout_cloud(spec, rng):
    n = spec.n_gaussians
    if spec.layout == "cluster":
        mu = rng.normal(0, 0.45, (n, 3))
        log_scale = np.log(rng.uniform(0.04, 0.12, (n, 3)))
    elif spec.layout == "object":
        # surface of a squashed sphere resting on the ground plane
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        mu = d * [0.8, 0.8, 0.6] * rng.uniform(0.92, 1.0, (n, 1))
        log_scale = np.log(rng.uniform(0.05, 0.12, (n, 3)))
        log_scale[:, 2] -= 0.5
    else:
        # back wall and floor of a room seen from the front
        wall = rng.random(n) < 0.6
        mu = np.empty((n, 3))
        mu[:, 0] = rng.uniform(-2.0, 2.0, n)
        mu[:, 1] = np.where(wall, 1.5, rng.uniform(-1.5, 1.5, n))
        mu[:, 2] = np.where(wall, rng.uniform(-1.0, 1.5, n), -1.0)
        log_scale = np.log(rng.uniform(0.08, 0.2, (n, 3)))

    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    # smooth color field plus per-splat variation
    base = 0.5 + 0.35 * np.sin(2.5 * mu @ rng.normal(size=(3, 3)))
    color = np.clip(base + rng.normal(0, 0.08, (n, 3)), 0.05, 0.95)
    opacity = GC.logit(rng.uniform(0.6, 0.95, n))
    return GC.GaussianCloud(mu, log_scale, rot, opacity, color)


def _rig(spec, rng):
    n = spec.n_cameras
    if spec.rig == "ring":
        az = 2 * np.pi * np.arange(n) / n
        el = np.full(n, np.radians(RING_ELEVATION))
    else:
        az = np.radians(-90 + np.linspace(-ARC_SPAN, ARC_SPAN, n))
        el = np.radians(ARC_ELEVATION + 5 * np.sin(np.linspace(0, 2 * np.pi, n)))
    centers = RING_RADIUS * np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1
    )
    return [
        look_at(
            c, (0, 0, 0), fov_deg=FOV_DEG, width=spec.width, height=spec.height, id=f"{i:03d}"
        )
        for i, c in enumerate(centers)
    ]


def make_scene(spec, verbose=False):
    rng = np.random.default_rng(spec.seed)
    cloud = _layout_cloud(spec, rng)
    cameras = _rig(spec, rng)

    images, depths, masks = dict(), dict(), dict()
    loop = progress(cameras) if verbose else cameras
    for cam in loop:
        out = render(cloud, cam)
        images[cam.id] = out.color
        depths[cam.id] = out.depth
        masks[cam.id] = out.final_transmittance < MASK_TRANSMITTANCE

    ids = [cam.id for cam in cameras]
    split = dict(
        train=[i for k, i in enumerate(ids) if k % TEST_EVERY != 0],
        test=[i for k, i in enumerate(ids) if k % TEST_EVERY == 0],
    )
    points = np.concatenate(
        [
            cloud.mu + rng.normal(0, 0.02, cloud.mu.shape),
            np.clip(cloud.color + rng.normal(0, 0.05, cloud.color.shape), 0, 1),
        ],
        axis=1,
    )
    return SyntheticScene(cameras, images, depths, masks, split, points, cloud, spec)


GAMMA_RANGE = (0.7, 1.3)


class GroundTruthDepthOracle:
    """Depth oracle backed by scene ground truth.

    mode "nearest" returns the stored depth of the scene camera whose
    optical center is closest to the query pose, "render" renders the
    generating cloud at the query pose. With `gamma`, the depth goes
    through a power law on disparity, d -> (1/d)**-gamma, empty pixels
    staying 0."""

    def __init__(self, scene, gamma=None, mode="nearest"):
        if mode not in ("nearest", "render"):
            raise ValueError(f"Unknown depth oracle mode '{mode}'.")
        if mode == "render" and scene.cloud_gt is None:
            raise ValueError("Scene has no generating cloud to render.")
        if mode == "nearest" and not scene.depths:
            raise ValueError("Scene has no depth maps.")
        if gamma is not None and not GAMMA_RANGE[0] <= gamma <= GAMMA_RANGE[1]:
            raise ValueError(f"Oracle gamma {gamma} lies outside [0.7, 1.3].")
        self.scene = scene
        self.gamma = gamma
        self.mode = mode
        self._cameras = [cam for cam in scene.cameras if cam.id in scene.depths]
        self._centers = np.array([cam.optical_center() for cam in self._cameras])

    def __repr__(self):
        return f"GroundTruthDepthOracle<{self.mode}, gamma={self.gamma}>"

    def nearest(self, pose):
        dist = np.linalg.norm(self._centers - pose.optical_center(), axis=1)
        best = np.flatnonzero(dist == dist.min())
        # ties go to the best aligned camera, then to the first one
        k = min(best, key=lambda i: angular_distance(self._cameras[i], pose))
        return self._cameras[k]

    def predict(self, image, pose):
        if self.mode == "render":
            depth = render(self.scene.cloud_gt, pose).depth
        else:
            depth = np.array(self.scene.depths[self.nearest(pose).id], dtype=float)
        shape = np.shape(image)[:2]
        if depth.shape != shape:
            depth = ndimage.zoom(depth, np.divide(shape, depth.shape), order=1)
        if self.gamma is not None:
            depth = np.where(depth > 0, np.abs(depth) ** self.gamma, 0.0)
        return depth


def gt_depth_oracle(scene, gamma=None, mode="nearest"):
    return GroundTruthDepthOracle(scene, gamma, mode)


def save_dataset(scene, path, verbose=False):
    for sub in ("images", "depths", "masks"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)

    save_cameras(os.path.join(path, "cameras.json"), scene.cameras)
    loop = progress(scene.cameras) if verbose else scene.cameras
    for cam in loop:
        save_png(os.path.join(path, "images", f"{cam.id}.png"), scene.images[cam.id])
        if cam.id in scene.depths:
            save_pfm(os.path.join(path, "depths", f"{cam.id}.pfm"), scene.depths[cam.id])
        if cam.id in scene.masks:
            save_mask(os.path.join(path, "masks", f"{cam.id}.png"), scene.masks[cam.id])

    with open(os.path.join(path, "split.json"), "w") as f:
        json.dump(scene.split, f, indent=1)
    if scene.points is not None:
        np.savetxt(os.path.join(path, "points.txt"), scene.points, fmt="%.9g")
    if scene.cloud_gt is not None:
        scene.cloud_gt.save(os.path.join(path, "scene_gt.hdf5"))
    if scene.spec is not None:
        with open(os.path.join(path, "scene.json"), "w") as f:
            json.dump(asdict(scene.spec), f, indent=1)
    return path


def subsample_views(ids, views):
    """`views` ids taken uniformly along `ids`."""
    if views is None:
        return list(ids)
    if not 1 <= views <= len(ids):
        raise ValueError(f"Can't select {views} views out of {len(ids)}.")
    idx = np.round(np.linspace(0, len(ids) - 1, views)).astype(int)
    return [ids[i] for i in idx]


def load_dataset(path, views=None):
    """Reads a dataset directory.

    `views` keeps that many training views, uniformly spread over the
    training split. Depths, masks, points and the generating cloud are
    optional."""
    cameras = load_cameras(os.path.join(path, "cameras.json"))
    with open(os.path.join(path, "split.json")) as f:
        split = json.load(f)
    split = dict(train=list(split["train"]), test=list(split.get("test", [])))
    split["train"] = subsample_views(split["train"], views)

    images, depths, masks = dict(), dict(), dict()
    for cam in cameras:
        images[cam.id] = load_png(os.path.join(path, "images", f"{cam.id}.png"))
        fname = os.path.join(path, "depths", f"{cam.id}.pfm")
        if os.path.isfile(fname):
            depths[cam.id] = load_pfm(fname).astype(float)
        fname = os.path.join(path, "masks", f"{cam.id}.png")
        if os.path.isfile(fname):
            masks[cam.id] = load_mask(fname)

    points = None
    fname = os.path.join(path, "points.txt")
    if os.path.isfile(fname):
        points = np.atleast_2d(np.loadtxt(fname))
    cloud = None
    fname = os.path.join(path, "scene_gt.hdf5")
    if os.path.isfile(fname):
        cloud = GC.Open(fname)
    spec = None
    fname = os.path.join(path, "scene.json")
    if os.path.isfile(fname):
        with open(fname) as f:
            spec = SceneSpec(**json.load(f))
    return SyntheticScene(cameras, images, depths, masks, split, points, cloud, spec)


@click.command(name="synth")
@click.option("--out", "-o", type=click.Path(), required=True, help="Dataset folder.")
@click.option(
    "--params",
    type=click.Path(exists=True, dir_okay=False),
    help="YAML file with default values (see synth_params.in).",
)
@click.option("--layout", type=click.Choice(LAYOUTS), help="Scene layout.")
@click.option("--n-gaussians", type=click.IntRange(min=1), help="Generating splats.")
@click.option("--n-cameras", type=click.IntRange(min=2), help="Cameras of the rig.")
@click.option("--rig", type=click.Choice(RIGS), help="Camera rig (default per layout).")
@click.option("--seed", type=int, help="Random seed.")
@click.option("--width", type=click.IntRange(min=1), help="Image width.")
@click.option("--height", type=click.IntRange(min=1), help="Image height.")
def CLI_synth(out, params, **kwargs):
    """Generates a synthetic dataset.

    Writes cameras.json, images/, depths/, masks/, split.json, points.txt
    and scene_gt.hdf5 in OUT. Every 8th camera is held out for testing.
    """
    values = dict()
    if params is not None:
        with open(params) as f:
            values = yaml.safe_load(f) or dict()
    values.update({k: v for k, v in kwargs.items() if v is not None})
    values.setdefault("n_gaussians", 2000)
    try:
        spec = SceneSpec(**values)
    except (TypeError, ValueError) as err:
        raise click.UsageError(str(err))
    synth(spec, out)


def synth(spec, out):
    print(f"Generating {spec.layout} scene ({spec.n_gaussians} splats, {spec.n_cameras} cameras).")
    scene = make_scene(spec, verbose=True)
    save_dataset(scene, out, verbose=True)
    empty = [i for i, m in scene.masks.items() if m.all()]
    if spec.layout == "object" and empty:
        print(f"WARNING: {len(empty)} views have no background pixel.")
    print(f"Dataset written to '{out}'.")
    return scene
