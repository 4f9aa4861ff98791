#!/usr/bin/env python3
#
# Views handled by the curriculum: student candidates grouped per
# (teacher, perturbation level) and the supervised training views.
#
# October 2026

import hashlib
from dataclasses import dataclass, field

import numpy as np


def _frozen(arr):
    if arr is None:
        return None
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def level_key(level):
    """Canonical dictionary key of a perturbation level (degrees)."""
    return round(float(level), 9)


@dataclass(eq=False)
class StudentView:
    id: str
    teacher_id: str
    level: float
    pose: object
    best_composite: float | None = None
    best_render: np.ndarray | None = field(default=None, repr=False)
    best_nr: float | None = None

    def __repr__(self):
        best = "unset" if self.best_composite is None else f"{self.best_composite:.4g}"
        return f"Student<{self.id} best={best}>"

    def evaluated(self):
        return self.best_composite is not None


@dataclass(eq=False)
class StudentPool:
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {s.id: s for group in self.entries.values() for s in group}

    def __len__(self):
        return sum(len(group) for group in self.entries.values())

    def __iter__(self):
        for group in self.entries.values():
            yield from group

    def __contains__(self, student_id):
        return student_id in self._index

    def __repr__(self):
        return (
            f"StudentPool<{len(self.teacher_ids())} teachers, "
            f"{len(self.levels())} levels, {len(self)} students>"
        )

    def add(self, student):
        key = (student.teacher_id, level_key(student.level))
        self.entries.setdefault(key, []).append(student)
        self._index[student.id] = student

    def get(self, student_id):
        return self._index[student_id]

    def group(self, teacher_id, level):
        """Students of a (teacher, level) group. Raises KeyError if absent."""
        return self.entries[teacher_id, level_key(level)]

    def levels(self):
        return sorted({level for _, level in self.entries})

    def teacher_ids(self):
        return list(dict.fromkeys(tid for tid, _ in self.entries))


@dataclass(eq=False)
class TrainView:
    """A supervised view.

    `kind` is "teacher" (real reference image) or "promoted_student"
    (frozen pseudo-reference). `mask` marks the foreground pixels that are
    supervised; None supervises every pixel."""

    id: str
    pose: object
    reference: np.ndarray = field(repr=False)
    kind: str = "teacher"
    mask: np.ndarray | None = field(default=None, repr=False)
    teacher_id: str | None = None
    level: float | None = None
    nr_score: float | None = None

    def __post_init__(self):
        if self.kind not in ("teacher", "promoted_student"):
            raise ValueError(f"Unknown view kind '{self.kind}'.")
        self.reference = _frozen(self.reference)
        self.mask = _frozen(self.mask)
        h, w = self.reference.shape[:2]
        if (h, w) != (self.pose.height, self.pose.width):
            raise ValueError(
                f"Reference of view {self.id} is {w}x{h}, "
                f"camera is {self.pose.width}x{self.pose.height}."
            )
        if self.mask is not None and self.mask.shape != (h, w):
            raise ValueError(f"Mask of view {self.id} does not match its reference.")
        if self.teacher_id is None and self.kind == "teacher":
            self.teacher_id = self.id

    def __repr__(self):
        return f"TrainView<{self.kind}:{self.id}>"

    def digest(self):
        """Content hash of the reference image."""
        return hashlib.sha256(np.ascontiguousarray(self.reference).tobytes()).hexdigest()
