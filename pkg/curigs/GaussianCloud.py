#!/usr/bin/env python3
#
# Anisotropic 3D Gaussian primitives and their screen-space projection
#
# Parameters are stored unconstrained: log of the per-axis standard
# deviation, a (w, x, y, z) quaternion, the logit of the opacity and a
# constant linear RGB color.
#
# October 2026

import hashlib
from dataclasses import dataclass

import numpy as np
from h5py import File as HDFile
from scipy.special import expit

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3
MAX_CONDITION = 1e12
FORMAT = "curigs-cloud"
VERSION = 1

PARAM_NAMES = ("mu", "log_scale", "rot_quat", "opacity_logit", "color")
_WIDTHS = dict(mu=3, log_scale=3, rot_quat=4, opacity_logit=None, color=3)


class SingularCovariance(ValueError):
    pass


def sigmoid(x):
    return expit(x)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q):
    """Rotation matrices of (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized first."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


@dataclass(eq=False)
class GaussianPrimitive:
    mu: np.ndarray
    log_scale: np.ndarray
    rot_quat: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __repr__(self):
        return f"Gaussian<{np.round(self.mu, 3).tolist()} a={self.opacity():.3f}>"

    def covariance(self):
        return covariance(self)

    def density_at(self, *args, **kwargs):
        return density_at(self, *args, **kwargs)

    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    def project(self, *args, **kwargs):
        return project(self, *args, **kwargs)


@dataclass(eq=False)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    index: int = 0


@dataclass(eq=False)
class GaussianCloud:
    mu: np.ndarray
    log_scale: np.ndarray
    rot_quat: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        n = len(np.atleast_1d(self.opacity_logit))
        for name in PARAM_NAMES:
            width = _WIDTHS[name]
            shape = (n,) if width is None else (n, width)
            arr = np.array(getattr(self, name), dtype=float).reshape(shape)
            setattr(self, name, arr)

    def __len__(self):
        return len(self.opacity_logit)

    def __getitem__(self, idx):
        return GaussianPrimitive(
            self.mu[idx].copy(),
            self.log_scale[idx].copy(),
            self.rot_quat[idx].copy(),
            float(self.opacity_logit[idx]),
            self.color[idx].copy(),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __repr__(self):
        return f"GaussianCloud<{len(self)}>"

    def concat(self, other):
        return GaussianCloud(
            **{
                name: np.concatenate([getattr(self, name), getattr(other, name)])
                for name in PARAM_NAMES
            }
        )

    def copy(self):
        return GaussianCloud(**{name: getattr(self, name).copy() for name in PARAM_NAMES})

    def covariances(self):
        return covariances(self)

    def fingerprint(self):
        """Content hash of every parameter array."""
        h = hashlib.blake2b(digest_size=16)
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()

    def normalize_quaternions(self):
        self.rot_quat /= np.linalg.norm(self.rot_quat, axis=1, keepdims=True)

    def opacities(self):
        return sigmoid(self.opacity_logit)

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def save(self, *args, **kwargs):
        return save(self, *args, **kwargs)

    def subset(self, idx):
        return GaussianCloud(**{name: getattr(self, name)[idx] for name in PARAM_NAMES})


def from_primitives(primitives):
    primitives = list(primitives)
    return GaussianCloud(
        **{name: np.array([getattr(g, name) for g in primitives]) for name in PARAM_NAMES}
    )


def covariance(g, /):
    R = quat_to_rotmat(g.rot_quat)
    return R @ np.diag(np.exp(2 * np.asarray(g.log_scale))) @ R.T


def covariances(cloud, /):
    R = quat_to_rotmat(cloud.rot_quat)
    M = R * np.exp(cloud.log_scale)[:, None, :]
    return M @ M.transpose(0, 2, 1)


def density_at(g, x, /):
    sigma = covariance(g)
    if np.linalg.cond(sigma) > MAX_CONDITION:
        raise SingularCovariance(f"Covariance of {g} is numerically singular.")
    d = np.asarray(x, dtype=float) - g.mu
    return float(np.exp(-0.5 * d @ np.linalg.solve(sigma, d)))


def pinhole_jacobian(t, fx, fy):
    """(N, 2, 3) Jacobians of the pinhole projection at camera points t."""
    x, y, z = t.T
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    return J


@dataclass(eq=False)
class Projection:
    """Intermediates of the projection of a whole cloud.

    Entries of culled primitives (valid False) are finite placeholders."""

    t: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    J: np.ndarray
    M: np.ndarray
    rotmats: np.ndarray
    scales: np.ndarray
    cov3d: np.ndarray


def project_cloud(cloud, cam):
    t = cloud.mu @ cam.rotation.T + cam.translation
    valid = t[:, 2] > NEAR_PLANE
    ts = np.where(valid[:, None], t, [0.0, 0.0, 1.0])

    mean2d = np.stack(
        [cam.fx * ts[:, 0] / ts[:, 2] + cam.cx, cam.fy * ts[:, 1] / ts[:, 2] + cam.cy],
        axis=1,
    )
    J = pinhole_jacobian(ts, cam.fx, cam.fy)
    M = J @ cam.rotation
    rotmats = quat_to_rotmat(cloud.rot_quat)
    scales = np.exp(cloud.log_scale)
    S3 = rotmats * scales[:, None, :]
    cov3d = S3 @ S3.transpose(0, 2, 1)
    cov2d = M @ cov3d @ M.transpose(0, 2, 1) + COV2D_FLOOR * np.eye(2)
    return Projection(t, mean2d, cov2d, t[:, 2].copy(), valid, J, M, rotmats, scales, cov3d)


def project(g, cam, /, index=0):
    """Screen-space footprint of one primitive, None when culled."""
    t = cam.rotation @ g.mu + cam.translation
    if t[2] <= NEAR_PLANE:
        return None
    mean2d = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
    M = pinhole_jacobian(t[None], cam.fx, cam.fy)[0] @ cam.rotation
    cov2d = M @ covariance(g) @ M.T + COV2D_FLOOR * np.eye(2)
    return ProjectedGaussian(mean2d, cov2d, float(t[2]), index)


def save(cloud, filename, /):
    if not filename.endswith(".hdf5"):
        filename += ".hdf5"
    with HDFile(filename, "w") as f:
        f.attrs["format"] = FORMAT
        f.attrs["version"] = VERSION
        for name in PARAM_NAMES:
            f.create_dataset(name, data=getattr(cloud, name), dtype="f8", track_times=False)
    return filename


def Open(filename):
    with HDFile(filename, "r") as f:
        fmt = f.attrs.get("format")
        if isinstance(fmt, bytes):
            fmt = fmt.decode()
        if fmt != FORMAT:
            raise ValueError(f"{filename} is not a Gaussian cloud checkpoint.")
        if int(f.attrs["version"]) > VERSION:
            raise ValueError(f"Unsupported checkpoint version {f.attrs['version']}.")
        return GaussianCloud(**{name: f[name][()] for name in PARAM_NAMES})
