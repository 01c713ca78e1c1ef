"""Exam/eye/image records, grade semantics, manifests, patient-level splits.

Severity uses the international 0-4 scale: 0 none, 1 mild NPDR, 2 moderate
NPDR, 3 severe NPDR, 4 proliferative DR. An eye is referable at moderate
NPDR or worse, or at mild NPDR with macular edema; vision-threatening
means severe NPDR or worse regardless of edema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

GRADES = (0, 1, 2, 3, 4)
SIDES = ("left", "right")


class DataError(Exception):
    """Malformed or unusable input data (manifests, images, predictions)."""


@dataclass(frozen=True)
class EyeGrade:
    grade: int | None
    me: bool | None
    gradable: bool = True
    grader_count: int = 1

    def __post_init__(self):
        if self.grader_count < 0:
            raise DataError(f"grader_count must be >= 0, got {self.grader_count}")
        if self.gradable:
            if self.grade not in GRADES:
                raise DataError(f"grade must be in {GRADES}, got {self.grade!r}")
            if self.me is None:
                raise DataError("gradable eye requires an me flag")


@dataclass(frozen=True)
class ImageRef:
    path: str
    laterality: str | None = None

    def __post_init__(self):
        if self.laterality is not None and self.laterality not in SIDES:
            raise DataError(f"laterality must be one of {SIDES}, got {self.laterality!r}")


@dataclass(frozen=True)
class ExamRecord:
    patient_id: str
    exam_id: str
    images: tuple
    left_eye: EyeGrade | None = None
    right_eye: EyeGrade | None = None

    def __post_init__(self):
        if len(self.images) < 1:
            raise DataError(f"exam {self.exam_id} has no images")
        paths = [img.path for img in self.images]
        if len(set(paths)) != len(paths):
            raise DataError(f"exam {self.exam_id} has duplicate image paths")

    def eye(self, side):
        return self.left_eye if side == "left" else self.right_eye


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset
    validation: frozenset
    test: frozenset

    def __post_init__(self):
        sets = [self.train, self.validation, self.test]
        total = sum(len(s) for s in sets)
        if len(self.train | self.validation | self.test) != total:
            raise DataError("split sets must be pairwise disjoint")

    def split_of(self, patient_id):
        for name, ids in (("train", self.train), ("validation", self.validation),
                          ("test", self.test)):
            if patient_id in ids:
                return name
        return None


def referable_label(g: EyeGrade) -> bool:
    """Moderate NPDR or worse, or mild NPDR with macular edema."""
    if not g.gradable:
        raise DataError("referable_label requires a gradable eye; exclude ungradable eyes")
    return g.grade >= 2 or (g.grade == 1 and bool(g.me))


def vision_threatening_label(g: EyeGrade) -> bool:
    """Severe NPDR or worse, with or without macular edema."""
    if not g.gradable:
        raise DataError("vision_threatening_label requires a gradable eye")
    return g.grade >= 3


def grade_at_least(grade: int, threshold: int) -> bool:
    if threshold not in (1, 2, 3, 4):
        raise ValueError(f"threshold must be in 1..4, got {threshold}")
    if grade not in GRADES:
        raise ValueError(f"grade must be in {GRADES}, got {grade}")
    return grade >= threshold


def split_by_patient(exams, fractions, seed) -> SplitSpec:
    """Assign patients (all their exams together) to splits by seeded shuffle.

    ``fractions`` has 2 entries (train, validation) or 3 (train,
    validation, test); they must be positive and sum to 1.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) not in (2, 3):
        raise ValueError("fractions must have 2 or 3 entries")
    if any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got sum {sum(fractions)}")
    patients = sorted({e.patient_id for e in exams})
    if len(patients) < len(fractions):
        raise DataError(
            f"need at least {len(fractions)} patients, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    n = len(patients)
    cuts = [int(round(sum(fractions[:i + 1]) * n)) for i in range(len(fractions) - 1)]
    groups = [shuffled[:cuts[0]]]
    groups.append(shuffled[cuts[0]:] if len(fractions) == 2 else shuffled[cuts[0]:cuts[1]])
    groups.append([] if len(fractions) == 2 else shuffled[cuts[1]:])
    return SplitSpec(frozenset(groups[0]), frozenset(groups[1]), frozenset(groups[2]))


def _parse_eye(d):
    if d is None:
        return None
    grade = d.get("grade")
    if isinstance(grade, list):  # multi-grader manifests: first label is adjudicated
        grade = grade[0] if grade else None
    me = d.get("me")
    if isinstance(me, list):
        me = me[0] if me else None
    gradable = bool(d.get("gradable", True))
    return EyeGrade(grade=grade if gradable else None,
                    me=(None if not gradable else bool(me)),
                    gradable=gradable,
                    grader_count=int(d.get("grader_count", 1)))


def read_manifest(path):
    """Read a JSON-lines manifest; unknown fields are ignored."""
    exams = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                images = tuple(ImageRef(img["path"], img.get("laterality"))
                               for img in d["images"])
                eyes = d.get("eyes", {})
                exams.append(ExamRecord(
                    patient_id=str(d["patient_id"]),
                    exam_id=str(d["exam_id"]),
                    images=images,
                    left_eye=_parse_eye(eyes.get("left")),
                    right_eye=_parse_eye(eyes.get("right")),
                ))
            except (KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: missing field: {exc}") from exc
    if not exams:
        raise DataError(f"{path}: empty manifest")
    return exams


def _eye_dict(g):
    if g is None:
        return None
    if not g.gradable:
        return {"gradable": False, "grader_count": g.grader_count}
    return {"grade": int(g.grade), "me": bool(g.me), "gradable": True,
            "grader_count": g.grader_count}


def exam_to_dict(exam):
    eyes = {}
    if exam.left_eye is not None:
        eyes["left"] = _eye_dict(exam.left_eye)
    if exam.right_eye is not None:
        eyes["right"] = _eye_dict(exam.right_eye)
    return {
        "patient_id": exam.patient_id,
        "exam_id": exam.exam_id,
        "images": [
            {"path": img.path} if img.laterality is None
            else {"path": img.path, "laterality": img.laterality}
            for img in exam.images],
        "eyes": eyes,
    }


def write_manifest(exams, path):
    with open(path, "w", encoding="utf-8") as fh:
        for exam in exams:
            fh.write(json.dumps(exam_to_dict(exam), sort_keys=True) + "\n")
