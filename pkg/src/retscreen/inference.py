"""Full examination pipeline: per-image laterality, scoring and heatmaps,
grouping into eyes by predicted laterality, max aggregation per eye, and a
referable decision at an operating threshold. Wall-clock latency is
recorded per image from a monotonic clock.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import micro_cnn
from .ensemble import Ensemble, predict_from_pre
from .heatmap import input_gradient_map, overlay_green
from .preprocess import load_raw, normalize, save_png
from .records import DataError
from .training import LATERALITY_CLASSES, cumulative_grade_scores


def classify_laterality(model, raw):
    """(side, winning probability) for one raw image."""
    pre = normalize(raw, model.config.input_size)
    probs = micro_cnn.forward(model, pre.tensor)
    side = LATERALITY_CLASSES[int(np.argmax(probs))]
    return side, float(probs.max())


def score_eye(scores):
    """Maximum of per-image scores; None (not assessed) for an empty eye."""
    scores = list(scores)
    if not scores:
        return None
    return float(max(scores))


def _required_sizes(laterality_model, referable_ensemble, severity_ensemble):
    sizes = {laterality_model.config.input_size}
    sizes.update(referable_ensemble.input_sizes)
    if severity_ensemble is not None:
        sizes.update(severity_ensemble.input_sizes)
    return sorted(sizes)


def diagnose_exam(exam, laterality_model, referable_ensemble: Ensemble,
                  severity_ensemble, threshold, image_root=".",
                  heatmap_dir=None, heatmap_tau=0.5):
    """Diagnose one exam record; returns a JSON-serializable report.

    Images are grouped by *predicted* laterality; annotated laterality, when
    present, is carried through for audit only. Unreadable images are
    skipped and flagged; an exam with no readable image yields an error
    report.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    sizes = _required_sizes(laterality_model, referable_ensemble, severity_ensemble)
    lat_size = laterality_model.config.input_size

    t_exam = time.perf_counter()
    image_rows = []
    skipped = []
    for ref in exam.images:
        t0 = time.perf_counter()
        try:
            raw = load_raw(os.path.join(image_root, ref.path))
        except DataError as exc:
            skipped.append({"path": ref.path, "error": str(exc)})
            continue
        pre_by_size = {s: normalize(raw, s, source_id=ref.path) for s in sizes}
        t1 = time.perf_counter()

        lat_probs = micro_cnn.forward(laterality_model, pre_by_size[lat_size].tensor)
        side = LATERALITY_CLASSES[int(np.argmax(lat_probs))]
        t2 = time.perf_counter()

        ref_probs = predict_from_pre(referable_ensemble, pre_by_size)
        t3 = time.perf_counter()

        severity_probs = None
        grade_ge = None
        if severity_ensemble is not None:
            severity_probs = predict_from_pre(severity_ensemble, pre_by_size)
            grade_ge = cumulative_grade_scores(severity_probs[None])[0]
            assert (np.diff(grade_ge) <= 1e-12).all()
        t4 = time.perf_counter()

        heatmap_path = None
        emap = input_gradient_map(referable_ensemble, pre_by_size, source_id=ref.path)
        if heatmap_dir is not None:
            os.makedirs(heatmap_dir, exist_ok=True)
            stem = os.path.splitext(os.path.basename(ref.path))[0]
            heatmap_path = os.path.join(heatmap_dir, f"{stem}.heatmap.png")
            crop_box = pre_by_size[lat_size].fov_bbox
            save_png(overlay_green(raw, emap, tau=heatmap_tau, bbox=crop_box),
                     heatmap_path)
        t5 = time.perf_counter()

        image_rows.append({
            "path": ref.path,
            "laterality": side,
            "laterality_prob": float(lat_probs.max()),
            "laterality_true": ref.laterality,
            "referable_prob": float(ref_probs[1]),
            "severity_probs": None if severity_probs is None
            else [float(v) for v in severity_probs],
            "grade_ge_scores": None if grade_ge is None
            else [float(v) for v in grade_ge],
            "heatmap": heatmap_path,
            "latency_ms": {
                "preprocess": (t1 - t0) * 1000.0,
                "laterality": (t2 - t1) * 1000.0,
                "referable": (t3 - t2) * 1000.0,
                "severity": (t4 - t3) * 1000.0,
                "heatmap": (t5 - t4) * 1000.0,
                "total": (t5 - t0) * 1000.0,
            },
        })

    report = {
        "exam_id": exam.exam_id,
        "patient_id": exam.patient_id,
        "threshold": float(threshold),
        "images": image_rows,
        "skipped_images": skipped,
        "flags": [],
    }
    if not image_rows:
        report["error"] = "no readable images in exam"
        report["timing"] = {"total_ms": (time.perf_counter() - t_exam) * 1000.0,
                            "per_image_ms": []}
        return report

    eyes = {}
    for side in LATERALITY_CLASSES:
        rows = [r for r in image_rows if r["laterality"] == side]
        referable_score = score_eye(r["referable_prob"] for r in rows)
        if referable_score is None:
            eyes[side] = {"status": "not_assessed", "image_count": 0}
            report["flags"].append(f"{side}_eye_not_assessed")
            continue
        entry = {
            "status": "assessed",
            "image_count": len(rows),
            "referable_score": referable_score,
            "decision": bool(referable_score >= threshold),
        }
        if severity_ensemble is not None:
            ge = np.stack([r["grade_ge_scores"] for r in rows]).max(axis=0)
            assert (np.diff(ge) <= 1e-12).all()
            entry["grade_ge_scores"] = [float(v) for v in ge]
        eyes[side] = entry
    report["eyes"] = eyes
    report["timing"] = {
        "total_ms": (time.perf_counter() - t_exam) * 1000.0,
        "per_image_ms": [r["latency_ms"]["total"] for r in image_rows],
    }
    return report


def diagnose_batch(exams, laterality_model, referable_ensemble, severity_ensemble,
                   threshold, image_root=".", heatmap_dir=None):
    """Reports for many exams; returns (reports, summary rows).

    Summary rows are (exam_id, eye, score, decision, latency_ms) suitable
    for the batch CSV.
    """
    reports = []
    rows = []
    for exam in exams:
        report = diagnose_exam(exam, laterality_model, referable_ensemble,
                               severity_ensemble, threshold,
                               image_root=image_root, heatmap_dir=heatmap_dir)
        reports.append(report)
        if "error" in report:
            continue
        mean_latency = float(np.mean(report["timing"]["per_image_ms"]))
        for side, entry in report["eyes"].items():
            if entry["status"] != "assessed":
                continue
            rows.append({
                "exam_id": exam.exam_id,
                "eye": side,
                "score": entry["referable_score"],
                "decision": int(entry["decision"]),
                "latency_ms": round(mean_latency, 3),
            })
    return reports, rows


def write_reports_jsonl(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps(report, sort_keys=True) + "\n")


def prediction_features(exams, ensemble: Ensemble, image_root=".",
                        mode="predictions"):
    """Per-patient feature vectors for the cohort embedding.

    Each patient is represented by their most pathological image (highest
    ensemble referable score); the features are the member probability
    vectors concatenated ("predictions") or the member penultimate
    activations concatenated ("activations"). The label is 1 when any
    gradable eye of the patient is referable.

    Returns (patient ids, feature matrix, labels).
    """
    if mode not in ("predictions", "activations"):
        raise ValueError(f"mode must be predictions or activations, got {mode!r}")
    from .records import referable_label

    by_patient = {}
    for exam in exams:
        by_patient.setdefault(exam.patient_id, []).append(exam)
    ids, rows, labels = [], [], []
    for patient_id in sorted(by_patient):
        best_score = -np.inf
        best_row = None
        label = 0
        for exam in by_patient[patient_id]:
            for side in LATERALITY_CLASSES:
                eye = exam.eye(side)
                if eye is not None and eye.gradable and referable_label(eye):
                    label = 1
            for ref in exam.images:
                try:
                    raw = load_raw(os.path.join(image_root, ref.path))
                except DataError:
                    continue
                pre = {s: normalize(raw, s) for s in ensemble.input_sizes}
                member_probs = []
                member_feats = []
                for m in ensemble.members:
                    probs, feats = micro_cnn.forward_batch(
                        m, pre[m.config.input_size].tensor[None],
                        return_features=True)
                    member_probs.append(probs[0])
                    member_feats.append(feats[0])
                score = float(np.mean([p[1] for p in member_probs]))
                if score > best_score:
                    best_score = score
                    parts = member_probs if mode == "predictions" else member_feats
                    best_row = np.concatenate(parts)
        if best_row is not None:
            ids.append(patient_id)
            rows.append(best_row)
            labels.append(label)
    if not rows:
        raise DataError("no readable images to build features from")
    return ids, np.stack(rows), np.array(labels, dtype=int)
