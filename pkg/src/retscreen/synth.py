"""Deterministic generator of fundus-like labeled images.

Each image is a dark circular field with a bright disc blob whose side
encodes laterality (a convention of this generator, not a clinical claim),
red dot lesions whose count grows with severity grade, an optional yellow
exudate cluster near the field center for macular edema, and a
multiplicative illumination ramp plus gain jitter as camera nuisance.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .preprocess import RawImage, save_png
from .records import (DataError, ExamRecord, EyeGrade, ImageRef, write_manifest)

# Prevalence of grades 1-4 mirrors a large screening program's annual DR
# rates; grade 0 takes the remainder.
DEFAULT_GRADE_DISTRIBUTION = (0.762, 0.143, 0.066, 0.023, 0.006)

DEFAULT_LESION_COUNTS = {0: (0, 0), 1: (1, 4), 2: (5, 12), 3: (13, 30), 4: (31, 60)}


@dataclass(frozen=True)
class SynthParams:
    image_size: int = 96
    lesion_counts_by_grade: dict = field(
        default_factory=lambda: dict(DEFAULT_LESION_COUNTS))
    me_exudate_radius: int = 12
    illumination_gradient_amplitude: float = 0.25
    me_probability: float = 0.25
    seed: int = 0

    def __post_init__(self):
        counts = self.lesion_counts_by_grade
        if sorted(counts) != [0, 1, 2, 3, 4]:
            raise ValueError("lesion_counts_by_grade must map grades 0..4")
        if counts[0] != (0, 0):
            raise ValueError(f"grade 0 range must be (0, 0), got {counts[0]}")
        for g in (2, 3, 4):
            lo0, hi0 = counts[g - 1]
            lo1, hi1 = counts[g]
            if not (lo1 > lo0 and hi1 > hi0):
                raise ValueError(
                    f"lesion count ranges must strictly increase with grade: "
                    f"grade {g - 1} {counts[g - 1]} vs grade {g} {counts[g]}")
        if self.image_size < 32:
            raise ValueError(f"image_size too small: {self.image_size}")


@dataclass(frozen=True)
class SynthImage:
    raw: RawImage
    laterality: str
    lesion_mask: np.ndarray      # uint8 (H, W), 255 on lesion/exudate pixels
    eye_grade: EyeGrade


def _paint_disk(img, mask, cx, cy, radius, color, mark_mask):
    """Anti-aliased disk blended into img; optionally added to the mask."""
    s = img.shape[0]
    x0 = max(int(cx - radius) - 2, 0)
    x1 = min(int(cx + radius) + 3, s)
    y0 = max(int(cy - radius) - 2, 0)
    y1 = min(int(cy + radius) + 3, s)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dist = np.hypot(xx - cx, yy - cy)
    cover = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    region = img[y0:y1, x0:x1]
    region += cover[:, :, None] * (np.asarray(color, dtype=np.float64) - region)
    if mark_mask:
        mask[y0:y1, x0:x1] |= (cover > 0.5).astype(np.uint8)


def generate_image(grade, me, laterality, params: SynthParams, seed) -> SynthImage:
    """Render one labeled synthetic fundus image; all randomness from seed."""
    if grade not in (0, 1, 2, 3, 4):
        raise ValueError(f"grade must be 0..4, got {grade}")
    if laterality not in ("left", "right"):
        raise ValueError(f"laterality must be left/right, got {laterality!r}")
    rng = np.random.default_rng(seed)
    s = params.image_size
    cx = cy = s / 2.0
    field_radius = 0.47 * s

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    dist = np.hypot(xx - cx, yy - cy)
    field = np.clip(field_radius + 0.5 - dist, 0.0, 1.0)

    base = np.array([196.0, 98.0, 42.0]) * rng.uniform(0.9, 1.1, size=3)
    vignette = 1.0 - 0.25 * np.clip(dist / field_radius, 0.0, 1.2) ** 2
    img = field[:, :, None] * vignette[:, :, None] * base[None, None, :]

    # disc blob: x-position encodes laterality (left third vs right third)
    if laterality == "left":
        disc_x = rng.uniform(0.18, 0.28) * s
    else:
        disc_x = rng.uniform(0.72, 0.82) * s
    disc_y = rng.uniform(0.42, 0.58) * s
    disc_r = rng.uniform(0.07, 0.10) * s
    mask = np.zeros((s, s), dtype=np.uint8)
    _paint_disk(img, mask, disc_x, disc_y, disc_r, (247.0, 221.0, 166.0), False)

    lo, hi = params.lesion_counts_by_grade[grade]
    n_lesions = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    placed = 0
    while placed < n_lesions:
        r = field_radius * 0.85 * np.sqrt(rng.uniform())
        theta = rng.uniform(0.0, 2.0 * np.pi)
        lx = cx + r * np.cos(theta)
        ly = cy + r * np.sin(theta)
        if np.hypot(lx - disc_x, ly - disc_y) < disc_r + 4.0:
            continue
        radius = rng.uniform(1.5, 3.0)
        shade = rng.uniform(0.8, 1.2)
        _paint_disk(img, mask, lx, ly, radius,
                    (92.0 * shade, 18.0 * shade, 16.0 * shade), True)
        placed += 1

    if me:
        n_ex = int(rng.integers(3, 7))
        for _ in range(n_ex):
            r = params.me_exudate_radius * np.sqrt(rng.uniform())
            theta = rng.uniform(0.0, 2.0 * np.pi)
            ex = cx + r * np.cos(theta)
            ey = cy + r * np.sin(theta)
            _paint_disk(img, mask, ex, ey, rng.uniform(2.0, 3.8),
                        (250.0, 238.0, 140.0), True)

    # multiplicative illumination ramp + per-channel gain jitter
    theta = rng.uniform(0.0, 2.0 * np.pi)
    amp = params.illumination_gradient_amplitude
    ramp = 1.0 + amp * ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)) / s
    gain = rng.uniform(0.85, 1.15, size=3)
    img *= ramp[:, :, None] * gain[None, None, :]
    img += rng.normal(0.0, 2.5, size=img.shape)

    raw = RawImage(np.clip(img, 0.0, 255.0).astype(np.uint8))
    eye_grade = EyeGrade(grade=grade, me=bool(me), gradable=True, grader_count=2)
    return SynthImage(raw=raw, laterality=laterality,
                      lesion_mask=mask * np.uint8(255), eye_grade=eye_grade)


def image_seed(base_seed, patient_index, eye_index, image_index):
    """Stable per-image seed fan-out."""
    ss = np.random.SeedSequence((base_seed, patient_index, eye_index, image_index))
    return int(ss.generate_state(1)[0])


def sample_eye_grade(rng, grade_distribution, me_probability):
    grade = int(rng.choice(5, p=grade_distribution))
    me = bool(grade >= 1 and rng.uniform() < me_probability)
    return grade, me


def generate_dataset(n_patients, grade_distribution, params: SynthParams, seed,
                     out_dir, images_per_eye=2):
    """Write a labeled synthetic dataset: PNG images + masks + JSONL manifest.

    One exam per patient, two eyes, ``images_per_eye`` images per eye.
    Returns the manifest path.
    """
    if n_patients < 1:
        raise DataError(f"n_patients must be >= 1, got {n_patients}")
    dist = np.asarray(grade_distribution, dtype=np.float64)
    if dist.shape != (5,) or (dist < 0).any() or abs(dist.sum() - 1.0) > 1e-9:
        raise DataError(f"grade distribution must be 5 nonnegative values summing "
                        f"to 1, got {grade_distribution}")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    rng = np.random.default_rng(seed)
    exams = []
    for p in range(n_patients):
        patient_id = f"p{p:05d}"
        exam_id = f"{patient_id}_e0"
        images = []
        eyes = {}
        for eye_index, side in enumerate(("left", "right")):
            grade, me = sample_eye_grade(rng, dist, params.me_probability)
            eye = None
            for image_index in range(images_per_eye):
                synth = generate_image(
                    grade, me, side, params,
                    image_seed(seed, p, eye_index, image_index))
                eye = synth.eye_grade
                name = f"{exam_id}_{side[0].upper()}{image_index}"
                rel = os.path.join("images", name + ".png")
                save_png(synth.raw, os.path.join(out_dir, rel))
                save_png(synth.lesion_mask,
                         os.path.join(out_dir, "images", name + ".mask.png"))
                images.append(ImageRef(path=rel, laterality=side))
            eyes[side] = eye
        exams.append(ExamRecord(patient_id=patient_id, exam_id=exam_id,
                                images=tuple(images),
                                left_eye=eyes["left"], right_eye=eyes["right"]))
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(exams, manifest_path)
    return manifest_path
