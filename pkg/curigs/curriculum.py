#!/usr/bin/env python3
#
# Curriculum over student views: level schedule, student sampling,
# best-student tracking and promotion to the training set
#
# October 2026

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .pytools import save_png
from .StudentPool import TrainView, level_key


class InactiveCurriculum(RuntimeError):
    pass


class MissingLevel(KeyError):
    pass


class UnknownStudent(KeyError):
    pass


# Curricula of the reference benchmarks. Each entry is a parameter fragment
# overlaid on the defaults by `pytools.load_params`.
PRESETS = {
    "llff": dict(
        iterations=30000,
        loss=dict(lambda_t=0.05),
        curriculum=dict(
            levels=[1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
            per_level_count=5,
            start_iter=3000,
            end_iter=24000,
            promotion_threshold=0.4,
        ),
    ),
    "mipnerf360": dict(
        iterations=30000,
        loss=dict(lambda_t=0.05),
        curriculum=dict(
            levels=[2, 4, 6, 8, 10],
            per_level_count=3,
            start_iter=7000,
            end_iter=27000,
            promotion_threshold=0.45,
        ),
    ),
    "mipnerf360-long": dict(
        iterations=33000,
        loss=dict(lambda_t=0.05),
        curriculum=dict(
            levels=[2, 4, 6, 8, 10],
            per_level_count=3,
            start_iter=10000,
            end_iter=30000,
            promotion_threshold=0.45,
        ),
    ),
    "dtu": dict(
        iterations=13000,
        use_masks=True,
        loss=dict(lambda_t=0.05),
        curriculum=dict(
            levels=[1, 2, 3, 4, 5],
            per_level_count=10,
            start_iter=2000,
            end_iter=12000,
            promotion_threshold=0.45,
        ),
    ),
    "dtu-strict": dict(
        iterations=13000,
        use_masks=True,
        loss=dict(lambda_t=0.05),
        curriculum=dict(
            levels=[1, 2, 3, 4, 5],
            per_level_count=10,
            start_iter=2000,
            end_iter=12000,
            promotion_threshold=0.55,
        ),
    ),
}


def preset(name):
    """Parameter fragment of a named curriculum. Raises KeyError."""
    return json.loads(json.dumps(PRESETS[name]))


@dataclass(frozen=True)
class ScheduleParams:
    sigma_min: float
    sigma_max: float
    k: float
    T_s: int
    start_iter: int
    end_iter: int

    def __post_init__(self):
        if not self.sigma_min <= self.sigma_max:
            raise ValueError("sigma_min must not exceed sigma_max.")
        if not self.k > 0:
            raise ValueError("Level step k must be positive.")
        if self.T_s < 1:
            raise ValueError("Stage length must be at least one iteration.")
        if not self.start_iter < self.end_iter:
            raise ValueError("Curriculum window is empty.")

    @classmethod
    def from_levels(cls, levels, start_iter, end_iter, stage_length=None):
        """Schedule walking through equally spaced `levels`.

        The stage length defaults to the window length divided by the
        number of levels, so that every level gets one stage."""
        levels = [float(lvl) for lvl in levels]
        if not levels:
            raise ValueError("No perturbation level given.")
        steps = np.diff(levels)
        if len(steps) and (steps.min() <= 0 or np.ptp(steps) > 1e-9):
            raise ValueError(f"Levels must be equally spaced and increasing: {levels}")
        k = float(steps[0]) if len(steps) else 1.0
        if stage_length is None:
            stage_length = max((end_iter - start_iter) // len(levels), 1)
        return cls(levels[0], levels[-1], k, int(stage_length), int(start_iter), int(end_iter))


def is_active(t, params):
    return params.start_iter <= t < params.end_iter


def active_sigma(t, params):
    """Perturbation level unlocked at iteration t.

    None before the window, sigma_max from the end of the window on."""
    if t < params.start_iter:
        return None
    if t >= params.end_iter:
        return params.sigma_max
    stage = (t - params.start_iter) // params.T_s
    return min(params.sigma_max, params.sigma_min + params.k * stage)


def unlocked_level(t, params):
    """Level unlocked at exactly iteration t, or None."""
    if not is_active(t, params):
        return None
    sigma = active_sigma(t, params)
    if t == params.start_iter or active_sigma(t - 1, params) != sigma:
        return sigma
    return None


def finished_level(t, params):
    """Level whose stage ended right before iteration t, or None."""
    if t < 1 or not is_active(t - 1, params):
        return None
    prev = active_sigma(t - 1, params)
    if not is_active(t, params) or active_sigma(t, params) != prev:
        return prev
    return None


@dataclass(eq=False)
class CurriculumState:
    params: ScheduleParams
    pool: object
    promotion_threshold: float
    promoted: list = field(default_factory=list)
    best: dict = field(default_factory=dict)
    promoted_keys: set = field(default_factory=set)

    def __post_init__(self):
        if not 0 <= self.promotion_threshold <= 1:
            raise ValueError("Promotion threshold must lie in [0, 1].")

    def __repr__(self):
        return f"Curriculum<{self.pool!r}, {len(self.promoted)} promoted>"

    def active_sigma(self, t):
        return active_sigma(t, self.params)

    def on_level_transition(self, *args, **kwargs):
        return on_level_transition(self, *args, **kwargs)

    def record_evaluation(self, *args, **kwargs):
        return record_evaluation(self, *args, **kwargs)

    def sample_student(self, *args, **kwargs):
        return sample_student(self, *args, **kwargs)

    def snapshot(self):
        """JSON-ready summary of the best students and promotions."""
        return dict(
            best={f"{tid}@{lvl:g}": sid for (tid, lvl), sid in self.best.items()},
            promoted=[v.id for v in self.promoted],
        )


def sample_student(state, teacher_id, t, rng):
    if not is_active(t, state.params):
        raise InactiveCurriculum(f"No curriculum at iteration {t}.")
    sigma = active_sigma(t, state.params)
    group = state.pool.entries.get((teacher_id, level_key(sigma)))
    if not group:
        raise MissingLevel(f"No student of teacher {teacher_id} at level {sigma:g}.")
    return group[int(rng.integers(len(group)))]


def record_evaluation(state, student_id, report, render):
    """Keeps the render of a student if it beats its best composite.

    Returns True when the record improved."""
    if student_id not in state.pool:
        raise UnknownStudent(student_id)
    student = state.pool.get(student_id)
    if student.best_composite is not None and not report.composite < student.best_composite:
        return False

    cached = np.array(render, dtype=float, copy=True)
    cached.setflags(write=False)
    student.best_composite = float(report.composite)
    student.best_nr = float(report.nr_quality)
    student.best_render = cached

    key = (student.teacher_id, level_key(student.level))
    current = state.best.get(key)
    if current is None or current == student_id:
        state.best[key] = student_id
    elif student.best_composite < state.pool.get(current).best_composite:
        state.best[key] = student_id
    return True


def on_level_transition(state, finished_level, masker=None):
    """Promotes the best student of every teacher at `finished_level`.

    A student passes when its best no-reference score reaches the promotion
    threshold. `masker(student)` may return the foreground mask of the
    promoted view. Returns the newly promoted TrainViews."""
    new = []
    lvl = level_key(finished_level)
    for tid in state.pool.teacher_ids():
        key = (tid, lvl)
        if key in state.promoted_keys or key not in state.best:
            continue
        student = state.pool.get(state.best[key])
        if student.best_nr is None or student.best_nr < state.promotion_threshold:
            continue
        view = TrainView(
            id=student.id,
            pose=student.pose,
            reference=student.best_render,
            kind="promoted_student",
            mask=None if masker is None else masker(student),
            teacher_id=tid,
            level=student.level,
            nr_score=student.best_nr,
        )
        state.promoted.append(view)
        state.promoted_keys.add(key)
        new.append(view)
    return new


class EventLog:
    """JSON-lines log of curriculum events (unlocked, evaluated, promoted)."""

    def __init__(self, filename=None):
        self.records = []
        self._file = None if filename is None else open(filename, "w")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"EventLog<{len(self.records)} events>"

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def count(self, event):
        return sum(rec["event"] == event for rec in self.records)

    def write(self, event, iter, **fields):
        rec = dict(iter=int(iter), event=event, **fields)
        self.records.append(rec)
        if self._file is not None:
            self._file.write(json.dumps(rec, sort_keys=True) + "\n")
            self._file.flush()
        return rec


def save_promoted(views, folder):
    """Writes the frozen references of promoted views and their manifest."""
    os.makedirs(folder, exist_ok=True)
    manifest = []
    for view in views:
        name = view.id.replace("/", "_")
        save_png(os.path.join(folder, f"{name}.png"), view.reference)
        manifest.append(
            dict(
                id=view.id,
                teacher_id=view.teacher_id,
                level=view.level,
                nr_score=view.nr_score,
                image=f"{name}.png",
                sha256=view.digest(),
                pose=view.pose.to_dict(),
            )
        )
    with open(os.path.join(folder, "promoted.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest
