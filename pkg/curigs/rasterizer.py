#!/usr/bin/env python3
#
# Tile based splatting renderer and its analytic backward pass
#
# Splats are bounded at 3 sigma of their screen covariance and binned into
# 16x16 pixel tiles. Inside a tile, splats are composited front to back in
# (depth, index) order. The per-pixel footprint is the plain Gaussian cut at
# the 3 sigma ellipse, which lies inside the tile bounds, so the tiled and
# the brute-force renders are identical.
#
# October 2026

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .GaussianCloud import PARAM_NAMES, project_cloud, sigmoid

TILE_SIZE = 16
ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF_SIGMA = 3.0
M_CUTOFF = CUTOFF_SIGMA**2


class StaleForward(RuntimeError):
    pass


def render_threads():
    """Number of worker threads allowed by CURIGS_THREADS (at least 1)."""
    try:
        n = int(os.environ.get("CURIGS_THREADS", "1"))
    except ValueError:
        print("WARNING: CURIGS_THREADS is not an integer, using 1 thread.")
        n = 1
    return max(n, 1)


def footprint(m):
    """Splat weight for a squared Mahalanobis distance `m`."""
    m = np.asarray(m, dtype=float)
    return np.where(m <= M_CUTOFF, np.exp(-0.5 * m), 0.0)


def camera_key(cam):
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(cam.rotation).tobytes())
    h.update(np.ascontiguousarray(cam.translation).tobytes())
    h.update(np.array(cam.intrinsics(), dtype=float).tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    final_transmittance: np.ndarray
    cache: object = field(default=None, repr=False)

    def __repr__(self):
        h, w = self.depth.shape
        return f"Render<{w}x{h}>"

    def accumulated_alpha(self):
        return 1 - self.final_transmittance


@dataclass(eq=False)
class RenderGradients:
    mu: np.ndarray
    log_scale: np.ndarray
    rot_quat: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    mean2d: np.ndarray = None

    def __post_init__(self):
        if self.mean2d is None:
            self.mean2d = np.zeros((len(self.mu), 2))

    def __repr__(self):
        return f"RenderGradients<{len(self.mu)}>"

    def accumulate(self, other, scale=1.0):
        for name in PARAM_NAMES + ("mean2d",):
            getattr(self, name).__iadd__(scale * getattr(other, name))
        return self

    def all_finite(self):
        return all(np.isfinite(getattr(self, name)).all() for name in PARAM_NAMES)

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}


def zero_gradients(n):
    return RenderGradients(
        np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3))
    )


@dataclass(eq=False)
class _Context:
    width: int
    height: int
    projection: object
    alpha: np.ndarray
    color: np.ndarray
    conic: np.ndarray
    tiles: list
    t_min: float


@dataclass(eq=False)
class _Cache:
    context: _Context
    raw_color: np.ndarray
    fingerprint: str
    camera: str


def _bin_splats(proj, width, height):
    """Per-tile lists of splat indices, each sorted by (depth, index)."""
    cov = proj.cov2d
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    lmax = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b**2)
    radius = CUTOFF_SIGMA * np.sqrt(lmax)

    x, y = proj.mean2d.T
    px0, px1 = np.ceil(x - radius), np.floor(x + radius)
    py0, py1 = np.ceil(y - radius), np.floor(y + radius)
    visible = proj.valid & (px1 >= 0) & (px0 <= width - 1) & (py1 >= 0) & (py0 <= height - 1)
    visible &= (px0 <= px1) & (py0 <= py1)

    ntx = (width + TILE_SIZE - 1) // TILE_SIZE
    nty = (height + TILE_SIZE - 1) // TILE_SIZE
    tx0 = np.clip(px0, 0, width - 1) // TILE_SIZE
    tx1 = np.clip(px1, 0, width - 1) // TILE_SIZE
    ty0 = np.clip(py0, 0, height - 1) // TILE_SIZE
    ty1 = np.clip(py1, 0, height - 1) // TILE_SIZE

    order = np.lexsort((np.arange(len(proj.depth)), proj.depth))
    order = order[visible[order]]

    tiles = []
    for ty in range(nty):
        rows = (ty0[order] <= ty) & (ty <= ty1[order])
        for tx in range(ntx):
            ids = order[rows & (tx0[order] <= tx) & (tx <= tx1[order])]
            tiles.append((ty, tx, ids))
    return tiles


def _tile_pixels(ctx, ty, tx):
    y0, x0 = ty * TILE_SIZE, tx * TILE_SIZE
    y1, x1 = min(y0 + TILE_SIZE, ctx.height), min(x0 + TILE_SIZE, ctx.width)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
    return (slice(y0, y1), slice(x0, x1)), pix


@dataclass(eq=False)
class _TileTerms:
    d: np.ndarray
    G: np.ndarray
    inside: np.ndarray
    g: np.ndarray
    raw: np.ndarray
    a: np.ndarray
    T: np.ndarray
    include: np.ndarray


def _tile_terms(ctx, pix, ids):
    d = pix[:, None, :] - ctx.projection.mean2d[ids][None]
    m = np.einsum("npi,pij,npj->np", d, ctx.conic[ids], d)
    G = np.exp(-0.5 * m)
    inside = m <= M_CUTOFF
    g = footprint(m)
    raw = ctx.alpha[ids] * g
    a = np.minimum(raw, ALPHA_MAX)

    T = np.cumprod(1 - a, axis=1)
    T = np.concatenate([np.ones((len(pix), 1)), T[:, :-1]], axis=1)
    # T is non increasing, so the excluded splats form a suffix
    include = T >= ctx.t_min
    a = np.where(include, a, 0.0)
    return _TileTerms(d, G, inside, g, raw, a, T, include)


def _forward_tile(ctx, tile):
    ty, tx, ids = tile
    window, pix = _tile_pixels(ctx, ty, tx)
    n = len(pix)
    if len(ids) == 0:
        return window, np.zeros((n, 3)), np.zeros(n), np.ones(n)

    terms = _tile_terms(ctx, pix, ids)
    w = terms.T * terms.a
    color = w @ ctx.color[ids]
    depth = w @ ctx.projection.depth[ids]
    final = np.prod(1 - terms.a, axis=1)
    return window, color, depth, final


def _map_tiles(fn, ctx, threads):
    if threads > 1 and len(ctx.tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda tile: fn(ctx, tile), ctx.tiles))
    return [fn(ctx, tile) for tile in ctx.tiles]


def render(cloud, cam, *, t_min=T_MIN, threads=None):
    """Renders color, expected depth and final transmittance of a cloud.

    Empty pixels get a black background, zero depth and transmittance 1.
    `t_min` is the transmittance below which compositing stops (0 disables
    early termination)."""
    width, height = cam.width, cam.height
    proj = project_cloud(cloud, cam)

    conic = np.zeros_like(proj.cov2d)
    cov = proj.cov2d
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic[:, 0, 0] = cov[:, 1, 1] / det
    conic[:, 1, 1] = cov[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov[:, 0, 1] / det

    ctx = _Context(
        width,
        height,
        proj,
        sigmoid(cloud.opacity_logit),
        cloud.color,
        conic,
        _bin_splats(proj, width, height),
        t_min,
    )

    raw = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    final = np.ones((height, width))
    for window, c, z, t in _map_tiles(_forward_tile, ctx, threads or render_threads()):
        h = window[0].stop - window[0].start
        w = window[1].stop - window[1].start
        raw[window] = c.reshape(h, w, 3)
        depth[window] = z.reshape(h, w)
        final[window] = t.reshape(h, w)

    cache = _Cache(ctx, raw, cloud.fingerprint(), camera_key(cam))
    return RenderOutput(np.clip(raw, 0, 1), depth, final, cache)


def _backward_tile(ctx, tile, grad_color, grad_depth):
    ty, tx, ids = tile
    if len(ids) == 0:
        return None
    window, pix = _tile_pixels(ctx, ty, tx)
    gc = grad_color[window].reshape(-1, 3)
    gd = grad_depth[window].reshape(-1)

    terms = _tile_terms(ctx, pix, ids)
    c = ctx.color[ids]
    z = ctx.projection.depth[ids]
    alpha = ctx.alpha[ids]

    w = terms.T * terms.a
    dcolor = w.T @ gc
    ddepth = w.T @ gd

    q = gc @ c.T + gd[:, None] * z[None]
    wq = w * q
    behind = np.cumsum(wq[:, ::-1], axis=1)[:, ::-1] - wq
    da = terms.T * q - behind / (1 - terms.a)
    da = np.where(terms.include & (terms.raw < ALPHA_MAX), da, 0.0)

    dalpha = (da * terms.g).sum(axis=0)
    dG = np.where(terms.inside, da * alpha, 0.0)
    dm = -0.5 * terms.G * dG

    A = ctx.conic[ids]
    dmean2d = -2 * np.einsum("pij,pj->pi", A, np.einsum("np,npj->pj", dm, terms.d))
    dconic = np.einsum("np,npi,npj->pij", dm, terms.d, terms.d)
    return ids, dcolor, ddepth, dalpha, dmean2d, dconic


def _quat_backward(q, dR):
    n = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / n).T
    G = dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0]
              - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    qn = q / n
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / n


def render_backward(cloud, cam, upstream_color, upstream_depth, forward, *, threads=None):
    """Gradients of a scalar loss with respect to every cloud parameter.

    `upstream_color` (H, W, 3) and `upstream_depth` (H, W) are the loss
    gradients with respect to `forward.color` and `forward.depth`; either
    may be None for zero."""
    cache = forward.cache
    if cache is None or cache.fingerprint != cloud.fingerprint():
        raise StaleForward("Cloud changed since the forward pass.")
    if cache.camera != camera_key(cam):
        raise StaleForward("Camera differs from the forward pass.")

    ctx = cache.context
    n = len(cloud)
    grads = zero_gradients(n)
    shape = (ctx.height, ctx.width)
    gc = np.zeros(shape + (3,)) if upstream_color is None else np.asarray(upstream_color, float)
    gd = np.zeros(shape) if upstream_depth is None else np.asarray(upstream_depth, float)
    if not (gc.any() or gd.any()):
        return grads
    # clipped channels pass no gradient
    gc = np.where((cache.raw_color >= 0) & (cache.raw_color <= 1), gc, 0.0)

    ddepth = np.zeros(n)
    dalpha = np.zeros(n)
    dconic = np.zeros((n, 2, 2))

    def fn(ctx, tile):
        return _backward_tile(ctx, tile, gc, gd)

    for res in _map_tiles(fn, ctx, threads or render_threads()):
        if res is None:
            continue
        ids, dc, dz, da, dm2, dA = res
        grads.color[ids] += dc
        ddepth[ids] += dz
        dalpha[ids] += da
        grads.mean2d[ids] += dm2
        dconic[ids] += dA

    proj = ctx.projection
    A = ctx.conic
    dcov2d = -A @ dconic @ A
    dM = 2 * dcov2d @ proj.M @ proj.cov3d
    dcov3d = proj.M.transpose(0, 2, 1) @ dcov2d @ proj.M
    dJ = dM @ cam.rotation.T

    x, y, z = np.where(proj.valid[:, None], proj.t, [0.0, 0.0, 1.0]).T
    dt = np.einsum("nij,ni->nj", proj.J, grads.mean2d)
    dt[:, 2] += ddepth
    dt[:, 0] += dJ[:, 0, 2] * (-cam.fx / z**2)
    dt[:, 1] += dJ[:, 1, 2] * (-cam.fy / z**2)
    dt[:, 2] += (
        dJ[:, 0, 0] * (-cam.fx / z**2)
        + dJ[:, 0, 2] * (2 * cam.fx * x / z**3)
        + dJ[:, 1, 1] * (-cam.fy / z**2)
        + dJ[:, 1, 2] * (2 * cam.fy * y / z**3)
    )
    grads.mu[:] = dt @ cam.rotation

    S3 = proj.rotmats * proj.scales[:, None, :]
    dS3 = 2 * dcov3d @ S3
    dscale = np.sum(dS3 * proj.rotmats, axis=1)
    grads.log_scale[:] = dscale * proj.scales
    grads.rot_quat[:] = _quat_backward(cloud.rot_quat, dS3 * proj.scales[:, None, :])
    grads.opacity_logit[:] = dalpha * ctx.alpha * (1 - ctx.alpha)

    culled = ~proj.valid
    for name in PARAM_NAMES + ("mean2d",):
        getattr(grads, name)[culled] = 0
    return grads
