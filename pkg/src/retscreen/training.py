"""Training loops: per-image supervised training (laterality) and per-eye
multiple-instance training that alternates selection of the most
pathological image of each eye with one epoch of gradient descent on the
selected images.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import micro_cnn
from .micro_cnn import MicroCnnConfig, MicroCnnModel
from .preprocess import PreprocessedImage, load_raw, normalize
from .records import DataError, referable_label
from .stats import ScoredSet, auc

TASKS = ("laterality", "referable", "severity")
LATERALITY_CLASSES = ("left", "right")


@dataclass(frozen=True)
class EyeBag:
    eye_id: tuple               # (patient_id, exam_id, side)
    images: tuple               # ordered PreprocessedImage sequence
    label: int                  # 0/1 (referable) or grade 0..4 (severity)

    def __post_init__(self):
        if len(self.images) < 1:
            raise ValueError(f"eye bag {self.eye_id} has no images")


@dataclass(frozen=True)
class TrainConfig:
    task: str
    cnn: MicroCnnConfig
    max_epochs: int
    patience: int
    seed: int
    batch_size: int = 32

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError(
                f"need 0 <= patience < max_epochs, got {self.patience} / {self.max_epochs}")


def cumulative_grade_scores(probs):
    """(N, 4) scores for grade >= t, t in 1..4, from (N, 5) probabilities."""
    rev = probs[:, ::-1].cumsum(axis=1)[:, ::-1]
    return rev[:, 1:5]


def pathology_scores(model, probs):
    """Scalar pathology score per probability row for the model's task head.

    Binary heads score the positive-class probability; 5-class heads score
    the expected grade.
    """
    if model.config.n_classes == 2:
        return probs[:, 1]
    grades = np.arange(model.config.n_classes, dtype=np.float64)
    return probs @ grades


def em_select(model, bag: EyeBag) -> int:
    """Index of the bag's most pathological image; ties go to the lowest index."""
    if len(bag.images) == 0:
        raise ValueError("cannot select from an empty bag")
    stack = np.stack([img.tensor for img in bag.images])
    scores = pathology_scores(model, micro_cnn.forward_batch(model, stack))
    return int(np.argmax(scores))


def _select_all(model, bags, chunk=256):
    """em_select over many bags with batched forward passes."""
    tensors = [img.tensor for bag in bags for img in bag.images]
    scores = np.empty(len(tensors), dtype=np.float64)
    for start in range(0, len(tensors), chunk):
        batch = np.stack(tensors[start:start + chunk])
        scores[start:start + len(batch)] = pathology_scores(
            model, micro_cnn.forward_batch(model, batch))
    out = []
    off = 0
    for bag in bags:
        k = len(bag.images)
        out.append(int(np.argmax(scores[off:off + k])))
        off += k
    return out


def _batch_probs(model, tensors, chunk=256):
    probs = np.empty((len(tensors), model.config.n_classes), dtype=np.float64)
    for start in range(0, len(tensors), chunk):
        batch = np.stack(tensors[start:start + chunk])
        probs[start:start + len(batch)] = micro_cnn.forward_batch(model, batch)
    return probs


def eye_score_matrix(model, bags):
    """Per-eye scores with max aggregation over each bag's images.

    Returns (referable-style score vector, (N, 4) cumulative grade scores);
    for binary heads the cumulative part is None.
    """
    tensors = [img.tensor for bag in bags for img in bag.images]
    probs = _batch_probs(model, tensors)
    if model.config.n_classes == 2:
        per_image = probs[:, 1]
        cum = None
    else:
        per_image = pathology_scores(model, probs)
        cum = cumulative_grade_scores(probs)
    eye_scores = np.empty(len(bags))
    eye_cum = None if cum is None else np.empty((len(bags), 4))
    off = 0
    for i, bag in enumerate(bags):
        k = len(bag.images)
        eye_scores[i] = per_image[off:off + k].max()
        if cum is not None:
            eye_cum[i] = cum[off:off + k].max(axis=0)
        off += k
    return eye_scores, eye_cum


def validation_metric(model, bags, task):
    """Eye-level AUC (referable) or mean one-vs-rest AUC over the four
    grade binarizations (severity)."""
    labels = np.array([bag.label for bag in bags])
    eye_scores, eye_cum = eye_score_matrix(model, bags)
    if task == "referable":
        return auc(ScoredSet(eye_scores, labels.astype(bool)))
    aucs = []
    for t in (1, 2, 3, 4):
        binarized = labels >= t
        if binarized.any() and not binarized.all():
            aucs.append(auc(ScoredSet(eye_cum[:, t - 1], binarized)))
    if not aucs:
        raise DataError("no severity binarization has both classes in validation")
    return float(np.mean(aucs))


def stratified_order(labels, rng):
    """Permutation spreading every class across the epoch."""
    labels = np.asarray(labels)
    keys = np.empty(len(labels), dtype=np.float64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        keys[idx] = (np.arange(len(idx)) + rng.uniform(size=len(idx))) / len(idx)
    return np.argsort(keys, kind="stable")


def _lr_at(config, epoch):
    # step decay: halve every 10 epochs
    return config.cnn.initial_learning_rate * (0.5 ** (epoch // 10))


def fit_eye_model(bags, val_bags, config: TrainConfig):
    """EM training over eye bags with early stopping on validation AUC.

    Epoch 0 trains on each bag's first image; every later epoch re-selects
    the most pathological image using the current model, then runs one
    momentum-SGD epoch on the selections. The best-validation snapshot is
    returned together with the epoch history.
    """
    if config.task not in ("referable", "severity"):
        raise ValueError(f"fit_eye_model handles referable/severity, got {config.task}")
    if not bags:
        raise DataError("no training bags")
    labels = np.array([bag.label for bag in bags])
    if len(np.unique(labels)) < 2:
        raise DataError("training labels are all one class; AUC undefined")
    val_labels = np.array([bag.label for bag in val_bags])
    if len(np.unique(val_labels)) < 2:
        raise DataError("validation labels are all one class; AUC undefined")

    model = micro_cnn.init_model(config.cnn)
    rng = np.random.default_rng(config.seed)
    opt_state = None
    history = []
    best_metric = -np.inf
    best_model = None
    stall = 0
    selections = [0] * len(bags)
    for epoch in range(config.max_epochs):
        if epoch == 0:
            new_selections = [0] * len(bags)
        else:
            new_selections = _select_all(model, bags)
        changes = sum(a != b for a, b in zip(selections, new_selections))
        selections = new_selections

        order = stratified_order(labels, rng)
        examples = [(bags[i].images[selections[i]].tensor, int(labels[i]))
                    for i in order]
        loss, opt_state = micro_cnn.sgd_epoch(
            model, examples, _lr_at(config, epoch), batch_size=config.batch_size,
            state=opt_state)

        metric = validation_metric(model, val_bags, config.task)
        history.append({"epoch": epoch, "train_loss": loss, "val_metric": metric,
                        "select_changes": changes, "trained_images": len(examples)})
        if metric > best_metric:
            best_metric = metric
            best_model = model.clone()
            stall = 0
        else:
            stall += 1
            if stall > config.patience:
                break
    best_model.training_meta.update({
        "task": config.task,
        "epochs_run": len(history),
        "best_val_metric": best_metric,
    })
    return best_model, history


def fit_image_model(images, labels, val_images, val_labels, config: TrainConfig):
    """Plain supervised training on per-image labels, same early stopping."""
    if len(images) == 0:
        raise DataError("no training images")
    labels = np.asarray(labels, dtype=int)
    val_labels = np.asarray(val_labels, dtype=int)
    if len(np.unique(labels)) < 2 or len(np.unique(val_labels)) < 2:
        raise DataError("labels are all one class; AUC undefined")

    model = micro_cnn.init_model(config.cnn)
    rng = np.random.default_rng(config.seed)
    tensors = [img.tensor if isinstance(img, PreprocessedImage) else np.asarray(img)
               for img in images]
    val_tensors = [img.tensor if isinstance(img, PreprocessedImage) else np.asarray(img)
                   for img in val_images]
    opt_state = None
    history = []
    best_metric = -np.inf
    best_model = None
    stall = 0
    for epoch in range(config.max_epochs):
        order = stratified_order(labels, rng)
        examples = [(tensors[i], int(labels[i])) for i in order]
        loss, opt_state = micro_cnn.sgd_epoch(
            model, examples, _lr_at(config, epoch), batch_size=config.batch_size,
            state=opt_state)
        probs = _batch_probs(model, val_tensors)
        metric = auc(ScoredSet(probs[:, 1], val_labels.astype(bool)))
        history.append({"epoch": epoch, "train_loss": loss, "val_metric": metric,
                        "select_changes": 0, "trained_images": len(examples)})
        if metric > best_metric:
            best_metric = metric
            best_model = model.clone()
            stall = 0
        else:
            stall += 1
            if stall > config.patience:
                break
    best_model.training_meta.update({
        "task": config.task,
        "epochs_run": len(history),
        "best_val_metric": best_metric,
    })
    return best_model, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_metric", "select_changes"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['train_loss']:.6f}",
                             f"{row['val_metric']:.6f}", row["select_changes"]])


def build_eye_bags(exams, image_root, input_size, task, patient_ids=None):
    """Eye bags from manifest exams, using annotated laterality to group
    images; ungradable eyes and unannotated images are excluded."""
    if task not in ("referable", "severity"):
        raise ValueError(f"task must be referable or severity, got {task!r}")
    bags = []
    for exam in exams:
        if patient_ids is not None and exam.patient_id not in patient_ids:
            continue
        for side in ("left", "right"):
            eye = exam.eye(side)
            if eye is None or not eye.gradable:
                continue
            refs = [img for img in exam.images if img.laterality == side]
            if not refs:
                continue
            pres = tuple(
                normalize(load_raw(os.path.join(image_root, ref.path)), input_size,
                          source_id=ref.path)
                for ref in refs)
            label = int(referable_label(eye)) if task == "referable" else int(eye.grade)
            bags.append(EyeBag(eye_id=(exam.patient_id, exam.exam_id, side),
                               images=pres, label=label))
    if not bags:
        raise DataError("manifest produced no usable eye bags")
    return bags


def build_image_set(exams, image_root, input_size, patient_ids=None):
    """(preprocessed images, 0/1 laterality labels) for laterality training."""
    images, labels = [], []
    for exam in exams:
        if patient_ids is not None and exam.patient_id not in patient_ids:
            continue
        for ref in exam.images:
            if ref.laterality is None:
                continue
            images.append(normalize(load_raw(os.path.join(image_root, ref.path)),
                                    input_size, source_id=ref.path))
            labels.append(LATERALITY_CLASSES.index(ref.laterality))
    if not images:
        raise DataError("manifest has no laterality-annotated images")
    return images, np.array(labels, dtype=int)
