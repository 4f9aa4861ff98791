#!/usr/bin/env python3
#
# Pinhole camera model and the teacher to student pose perturbation
#
# Cameras follow the computer vision convention: the rotation maps world
# to camera coordinates, x points right, y down and z forward.
#
# October 2026

import json
from dataclasses import dataclass

import numpy as np

from .StudentPool import StudentPool, StudentView


class EmptyTeachers(ValueError):
    pass


class NonMonotoneLevels(ValueError):
    pass


EPS_R_CLIP = 0.5


@dataclass(eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    id: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)

    def __repr__(self):
        return f"Camera<{self.id}:{self.width}x{self.height}>"

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.intrinsics() == other.intrinsics()
        )

    def angular_distance(self, *args, **kwargs):
        return angular_distance(self, *args, **kwargs)

    def forward(self):
        return self.rotation[2].copy()

    def intrinsics(self):
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def optical_center(self):
        return optical_center(self)

    def to_dict(self):
        return to_dict(self)

    def validate(self, *args, **kwargs):
        return validate(self, *args, **kwargs)

    def with_id(self, id):
        return CameraPose(
            self.rotation.copy(), self.translation.copy(), *self.intrinsics(), id=id
        )


@dataclass(frozen=True)
class PerturbationSpec:
    sigma_deg: float
    sigma_r: float

    def __post_init__(self):
        if not self.sigma_deg >= 0:
            raise ValueError(f"sigma_deg must be >= 0, got {self.sigma_deg}.")
        if not 0 <= self.sigma_r <= 0.5:
            raise ValueError(f"sigma_r must lie in [0, 0.5], got {self.sigma_r}.")


def optical_center(pose, /):
    return -pose.rotation.T @ pose.translation


def validate(pose, /, tol=1e-9):
    R = pose.rotation
    if not np.allclose(R.T @ R, np.eye(3), rtol=0, atol=tol):
        raise ValueError(f"Rotation of camera {pose.id} is not orthonormal.")
    if abs(np.linalg.det(R) - 1) > tol:
        raise ValueError(f"Rotation of camera {pose.id} is not proper.")
    if pose.width < 1 or pose.height < 1:
        raise ValueError(f"Camera {pose.id} has an empty image.")
    if not (pose.fx > 0 and pose.fy > 0):
        raise ValueError(f"Camera {pose.id} has non-positive focal lengths.")
    return pose


def look_at(center, target, up=(0, 0, 1), *, fov_deg=45.0, width=64, height=64, id=""):
    """Camera at `center` looking at `target`.

    The horizontal field of view sets fx = fy and the principal point is
    the image centre."""
    center = np.asarray(center, dtype=float)
    f = np.asarray(target, dtype=float) - center
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise ValueError("Viewing direction is parallel to the up vector.")
    right /= norm
    down = np.cross(f, right)
    R = np.stack([right, down, f])
    focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraPose(R, -R @ center, focal, focal, width / 2, height / 2, width, height, id)


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def local_rotation(yaw_deg, pitch_deg):
    """Camera-frame rotation: yaw about the up axis, then pitch about the
    right axis."""
    return rot_x(np.radians(pitch_deg)) @ rot_y(np.radians(yaw_deg))


def delta_rotation(pose, yaw_deg, pitch_deg):
    """Right factor R_d of the perturbed rotation R @ R_d."""
    R = pose.rotation
    return R.T @ local_rotation(yaw_deg, pitch_deg) @ R


def sample_perturbation(spec, rng):
    """Draws (yaw, pitch, eps_r), angles in degrees."""
    yaw = rng.normal(0.0, spec.sigma_deg)
    pitch = rng.normal(0.0, spec.sigma_deg)
    eps = rng.normal(0.0, spec.sigma_r)
    return yaw, pitch, float(np.clip(eps, -EPS_R_CLIP, EPS_R_CLIP))


def apply_perturbation(pose, yaw_deg, pitch_deg, eps_r, id=None):
    # R' = R_l R = R (R^T R_l R), C' = (1+eps) C and T' = -R'C' = (1+eps) R_l T
    R_l = local_rotation(yaw_deg, pitch_deg)
    return CameraPose(
        R_l @ pose.rotation,
        (1 + eps_r) * (R_l @ pose.translation),
        *pose.intrinsics(),
        id=pose.id if id is None else id,
    )


def perturb_pose(pose, spec, rng, id=None):
    return apply_perturbation(pose, *sample_perturbation(spec, rng), id=id)


def angular_distance(a, b, /):
    """Angle in degrees between the viewing directions of two cameras."""
    cos = np.clip(np.dot(a.rotation[2], b.rotation[2]), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def generate_student_pools(teachers, levels, per_level_count, sigma_r, rng):
    """Builds the student candidates of every (teacher, level) group.

    Students are drawn teacher by teacher, level by level, so the pool is a
    pure function of the inputs and of the generator state."""
    if len(teachers) == 0:
        raise EmptyTeachers("At least one teacher view is required.")
    levels = [float(lvl) for lvl in levels]
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise NonMonotoneLevels(f"Levels must be nonempty and strictly increasing: {levels}")
    if per_level_count < 1:
        raise ValueError("per_level_count must be >= 1.")

    ids = [t.id or str(i) for i, t in enumerate(teachers)]
    if len(set(ids)) != len(ids):
        raise ValueError("Teacher ids must be unique.")

    pool = StudentPool()
    for tid, teacher in zip(ids, teachers):
        for level in levels:
            spec = PerturbationSpec(level, sigma_r)
            for j in range(per_level_count):
                sid = f"{tid}@{level:g}#{j}"
                pose = perturb_pose(teacher, spec, rng, id=sid)
                pool.add(StudentView(sid, tid, level, pose))
    return pool


def to_dict(pose, /):
    return dict(
        id=pose.id,
        rotation=pose.rotation.reshape(9).tolist(),
        translation=pose.translation.tolist(),
        fx=float(pose.fx),
        fy=float(pose.fy),
        cx=float(pose.cx),
        cy=float(pose.cy),
        width=pose.width,
        height=pose.height,
    )


def from_dict(entry, /):
    return CameraPose(
        np.reshape(entry["rotation"], (3, 3)),
        entry["translation"],
        entry["fx"],
        entry["fy"],
        entry["cx"],
        entry["cy"],
        entry["width"],
        entry["height"],
        str(entry["id"]),
    )


def save_cameras(filename, cameras):
    with open(filename, "w") as f:
        json.dump([to_dict(cam) for cam in cameras], f, indent=1)


def load_cameras(filename):
    with open(filename) as f:
        return [validate(from_dict(entry)) for entry in json.load(f)]
