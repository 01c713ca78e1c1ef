"""Greedy forward ensemble construction on validation eye-level AUC.

Members may use different input sizes; each preprocesses at its own size
and the ensemble output is the unweighted mean of member probability
vectors.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import micro_cnn
from .checkpoint import load_checkpoint
from .preprocess import RawImage, normalize
from .records import DataError
from .stats import ScoredSet, auc
from .training import cumulative_grade_scores

CONVERGENCE_EPS = 1e-4


@dataclass
class Ensemble:
    members: list
    combination: str = "mean"

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        heads = {(m.config.head, m.config.n_classes) for m in self.members}
        if len(heads) > 1:
            raise ValueError(f"members disagree on head arity: {sorted(heads)}")
        if self.combination != "mean":
            raise ValueError(f"unsupported combination {self.combination!r}")

    @property
    def n_classes(self):
        return self.members[0].config.n_classes

    @property
    def input_sizes(self):
        return sorted({m.config.input_size for m in self.members})


def predict_from_pre(e: Ensemble, pre_by_size) -> np.ndarray:
    """Mean member probabilities from per-size preprocessed tensors."""
    rows = []
    for m in e.members:
        size = m.config.input_size
        if size not in pre_by_size:
            raise ValueError(f"missing preprocessed input at size {size}")
        pre = pre_by_size[size]
        tensor = pre.tensor if hasattr(pre, "tensor") else np.asarray(pre)
        rows.append(micro_cnn.forward_batch(m, tensor[None])[0])
    return np.mean(rows, axis=0)


def ensemble_predict(e: Ensemble, raw: RawImage) -> np.ndarray:
    """Mean of member outputs, each member preprocessing at its own size."""
    pre_by_size = {size: normalize(raw, size) for size in e.input_sizes}
    return predict_from_pre(e, pre_by_size)


def _eye_metric(mean_probs, bags, task):
    """Eye-level AUC (max aggregation) from per-image mean probabilities."""
    labels = np.array([bag.label for bag in bags])
    offsets = np.cumsum([0] + [len(bag.images) for bag in bags])
    if task == "referable":
        per_image = mean_probs[:, 1]
        eye = np.array([per_image[offsets[i]:offsets[i + 1]].max()
                        for i in range(len(bags))])
        return auc(ScoredSet(eye, labels.astype(bool)))
    cum = cumulative_grade_scores(mean_probs)
    eye = np.stack([cum[offsets[i]:offsets[i + 1]].max(axis=0)
                    for i in range(len(bags))])
    aucs = []
    for t in (1, 2, 3, 4):
        binarized = labels >= t
        if binarized.any() and not binarized.all():
            aucs.append(auc(ScoredSet(eye[:, t - 1], binarized)))
    if not aucs:
        raise DataError("no severity binarization has both classes")
    return float(np.mean(aucs))


def _candidate_probs(candidate, bags):
    tensors = [img.tensor for bag in bags for img in bag.images]
    probs = np.empty((len(tensors), candidate.config.n_classes))
    chunk = 256
    for start in range(0, len(tensors), chunk):
        batch = np.stack(tensors[start:start + chunk])
        probs[start:start + len(batch)] = micro_cnn.forward_batch(candidate, batch)
    return probs


def greedy_select(candidates, val_bags_by_size, task="referable",
                  eps=CONVERGENCE_EPS):
    """Grow an ensemble by repeatedly adding the candidate that most improves
    validation AUC; stop when the best addition improves by <= eps.

    ``val_bags_by_size`` maps input size -> eye-bag list; the lists must
    hold the same eyes in the same order. Candidates are never reused;
    ties go to the lower candidate index. Returns (Ensemble, selection log).
    """
    if not candidates:
        raise ValueError("greedy_select needs at least one candidate")
    sizes_needed = {c.config.input_size for c in candidates}
    missing = sizes_needed - set(val_bags_by_size)
    if missing:
        raise ValueError(f"no validation bags at sizes {sorted(missing)}")
    ref_bags = val_bags_by_size[next(iter(sizes_needed))]
    ref_labels = [bag.label for bag in ref_bags]
    for size in sizes_needed:
        bags = val_bags_by_size[size]
        if [bag.label for bag in bags] != ref_labels:
            raise ValueError("validation bags differ across sizes")

    probs = [_candidate_probs(c, val_bags_by_size[c.config.input_size])
             for c in candidates]
    chosen = []
    prob_sum = None
    best_auc = -np.inf
    log = []
    while len(chosen) < len(candidates):
        round_best = None
        for i, p in enumerate(probs):
            if i in chosen:
                continue
            trial = p if prob_sum is None else prob_sum + p
            metric = _eye_metric(trial / (len(chosen) + 1), ref_bags, task)
            if round_best is None or metric > round_best[1] + 1e-15:
                round_best = (i, metric)
        i, metric = round_best
        if metric <= best_auc + eps:
            break
        chosen.append(i)
        prob_sum = probs[i] if prob_sum is None else prob_sum + probs[i]
        best_auc = metric
        log.append({"round": len(chosen), "candidate": i, "auc": metric})
    return Ensemble([candidates[i] for i in chosen]), log


def save_ensemble_manifest(path, member_paths, log, task, threshold=None):
    doc = {
        "format_version": 1,
        "combination": "mean",
        "task": task,
        "members": list(member_paths),
        "selection_log": log,
    }
    if threshold is not None:
        doc["threshold"] = threshold
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ensemble(path):
    """Load an ensemble manifest and its member checkpoints.

    Relative member paths resolve against the manifest directory. Returns
    (Ensemble, manifest dict).
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read ensemble manifest {path}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    members = []
    for rel in doc.get("members", []):
        ckpt = rel if os.path.isabs(rel) else os.path.join(base, rel)
        members.append(load_checkpoint(ckpt))
    if not members:
        raise DataError(f"ensemble manifest {path} lists no members")
    return Ensemble(members), doc
