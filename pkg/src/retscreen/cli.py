"""Command-line interface.

Subcommands: synth, train, ensemble, infer, eval, compare, tsne, heatmap.
Every command takes a single --seed, resolves flags over an optional JSON
config file, logs the resolved configuration beside its outputs, and
writes files atomically (temp + rename). Exit codes: 0 success, 1 usage
error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np

from . import inference, micro_cnn, stats, synth, training
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ensemble import (Ensemble, greedy_select, load_ensemble,
                       save_ensemble_manifest)
from .heatmap import input_gradient_map, overlay_green, save_map_png16
from .micro_cnn import MicroCnnConfig
from .preprocess import load_raw, normalize, save_png
from .records import (DataError, read_manifest, referable_label,
                      split_by_patient, vision_threatening_label)
from .stats import ScoredSet, delong_ci, delong_paired_test, format_auc_ci
from .training import TrainConfig, build_eye_bags, build_image_set
from .tsne import tsne

FORMAT_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _atomic_write_text(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, obj):
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write_text(path, buf.getvalue())


def _write_provenance(out_path, command, args, extra=None):
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"command": command, "config": config, "seed": config.get("seed"),
           "format_version": FORMAT_VERSION}
    if extra:
        doc.update(extra)
    if os.path.isdir(out_path):
        path = os.path.join(out_path, "provenance.json")
    else:
        path = out_path + ".provenance.json"
    _write_json(path, doc)


def _read_predictions(path):
    """Prediction interchange CSV: header unit_id,score."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"unit_id", "score"} <= set(
                    reader.fieldnames):
                raise DataError(f"{path}: expected header with unit_id,score")
            out = {}
            for row in reader:
                out[row["unit_id"]] = float(row["score"])
    except OSError as exc:
        raise DataError(f"cannot read predictions {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: bad score value: {exc}") from exc
    if not out:
        raise DataError(f"{path}: no prediction rows")
    return out


def _eye_labels(exams, kind):
    label_fn = {"referable": referable_label,
                "vision_threatening": vision_threatening_label}[kind]
    labels = {}
    for exam in exams:
        for side in ("left", "right"):
            eye = exam.eye(side)
            if eye is None or not eye.gradable:
                continue
            labels[f"{exam.exam_id}:{side}"] = bool(label_fn(eye))
    if not labels:
        raise DataError("manifest has no gradable eyes")
    return labels


def _join_scored_set(pred, labels):
    missing = sorted(set(pred) - set(labels))
    if missing:
        raise DataError(f"predictions reference units without labels, e.g. "
                        f"{missing[:3]}")
    units = sorted(pred)
    return ScoredSet(np.array([pred[u] for u in units]),
                     np.array([labels[u] for u in units])), units


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    params = synth.SynthParams(image_size=args.image_size,
                               me_probability=args.me_prob, seed=args.seed)
    dist = tuple(float(x) for x in args.distribution.split(","))
    manifest = synth.generate_dataset(args.n_patients, dist, params, args.seed,
                                      args.out, images_per_eye=args.images_per_eye)
    _write_provenance(args.out, "synth", args)
    print(f"wrote {manifest}")
    return 0


def _cnn_config(args, n_classes, head):
    return MicroCnnConfig(input_size=args.input_size, stage_count=args.stages,
                          base_channels=args.base_channels, head=head,
                          n_classes=n_classes, seed=args.seed,
                          initial_learning_rate=args.lr)


def cmd_train(args):
    exams = read_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    split = split_by_patient(exams, (1.0 - args.val_fraction, args.val_fraction),
                             args.seed)
    if args.task == "laterality":
        cnn = _cnn_config(args, 2, "multiclass")
        config = TrainConfig(task=args.task, cnn=cnn, max_epochs=args.epochs,
                             patience=args.patience, seed=args.seed,
                             batch_size=args.batch_size)
        tr_imgs, tr_labels = build_image_set(exams, root, cnn.input_size, split.train)
        va_imgs, va_labels = build_image_set(exams, root, cnn.input_size,
                                             split.validation)
        model, history = training.fit_image_model(tr_imgs, tr_labels, va_imgs,
                                                  va_labels, config)
    else:
        n_classes = 2 if args.task == "referable" else 5
        head = "binary" if args.task == "referable" else "multiclass"
        cnn = _cnn_config(args, n_classes, head)
        config = TrainConfig(task=args.task, cnn=cnn, max_epochs=args.epochs,
                             patience=args.patience, seed=args.seed,
                             batch_size=args.batch_size)
        tr_bags = build_eye_bags(exams, root, cnn.input_size, args.task, split.train)
        va_bags = build_eye_bags(exams, root, cnn.input_size, args.task,
                                 split.validation)
        model, history = training.fit_eye_model(tr_bags, va_bags, config)
    save_checkpoint(model, args.out)
    training.write_history_csv(history, args.out + ".history.csv")
    _write_provenance(args.out, "train", args,
                      extra={"best_val_metric": model.training_meta["best_val_metric"],
                             "epochs_run": model.training_meta["epochs_run"]})
    print(f"trained {args.task} model: val metric "
          f"{model.training_meta['best_val_metric']:.4f} "
          f"({model.training_meta['epochs_run']} epochs) -> {args.out}")
    return 0


def cmd_ensemble(args):
    exams = read_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    split = split_by_patient(exams, (1.0 - args.val_fraction, args.val_fraction),
                             args.seed)
    candidates = [load_checkpoint(p) for p in args.candidates]
    sizes = sorted({c.config.input_size for c in candidates})
    bags_by_size = {s: build_eye_bags(exams, root, s, args.task, split.validation)
                    for s in sizes}
    grown, log = greedy_select(candidates, bags_by_size, task=args.task)

    threshold = None
    if args.task == "referable":
        from .ensemble import _candidate_probs, _eye_metric  # noqa: F401
        bags = bags_by_size[sizes[0]]
        labels = np.array([b.label for b in bags], dtype=bool)
        member_probs = [
            _candidate_probs(m, bags_by_size[m.config.input_size])
            for m in grown.members]
        mean_probs = np.mean(member_probs, axis=0)
        offsets = np.cumsum([0] + [len(b.images) for b in bags])
        eye_scores = np.array([mean_probs[offsets[i]:offsets[i + 1], 1].max()
                               for i in range(len(bags))])
        threshold, sens, spec = stats.operating_point(
            ScoredSet(eye_scores, labels), specificity=args.spec_target)
        print(f"operating point: threshold {threshold:.4f} "
              f"(sensitivity {sens:.3f}, specificity {spec:.3f})")

    out_dir = os.path.dirname(os.path.abspath(args.out))
    chosen_paths = [os.path.relpath(os.path.abspath(args.candidates[e["candidate"]]),
                                    out_dir) for e in log]
    save_ensemble_manifest(args.out, chosen_paths, log, args.task, threshold)
    _write_provenance(args.out, "ensemble", args)
    print(f"selected {len(grown.members)} of {len(candidates)} candidates, "
          f"val AUC {log[-1]['auc']:.4f} -> {args.out}")
    return 0


def cmd_infer(args):
    exams = read_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    laterality_model = load_checkpoint(args.laterality)
    referable, ref_doc = load_ensemble(args.referable)
    severity = None
    if args.severity:
        severity, _ = load_ensemble(args.severity)
    threshold = args.threshold if args.threshold is not None \
        else ref_doc.get("threshold", 0.5)
    os.makedirs(args.out, exist_ok=True)
    heatmap_dir = None if args.no_heatmaps else os.path.join(args.out, "heatmaps")
    if args.limit:
        exams = exams[:args.limit]

    reports, rows = inference.diagnose_batch(
        exams, laterality_model, referable, severity, threshold,
        image_root=root, heatmap_dir=heatmap_dir)
    inference.write_reports_jsonl(reports, os.path.join(args.out, "reports.jsonl"))
    _write_csv(os.path.join(args.out, "summary.csv"),
               ["exam_id", "eye", "score", "decision", "latency_ms"],
               [[r["exam_id"], r["eye"], f"{r['score']:.6f}", r["decision"],
                 r["latency_ms"]] for r in rows])
    _write_csv(os.path.join(args.out, "predictions.csv"), ["unit_id", "score"],
               [[f"{r['exam_id']}:{r['eye']}", f"{r['score']:.6f}"] for r in rows])
    if args.features_out:
        ids, feats, labels = inference.prediction_features(
            exams, referable, image_root=root)
        _write_csv(args.features_out, ["id", "label"]
                   + [f"f{i}" for i in range(feats.shape[1])],
                   [[ids[i], labels[i]] + [f"{v:.6f}" for v in feats[i]]
                    for i in range(len(ids))])
    _write_provenance(args.out, "infer", args, extra={"threshold": threshold})
    n_err = sum("error" in r for r in reports)
    print(f"diagnosed {len(reports)} exams ({n_err} unreadable) -> {args.out}")
    return 0


def cmd_eval(args):
    pred = _read_predictions(args.pred)
    labels = _eye_labels(read_manifest(args.labels), args.label_kind)
    scored, units = _join_scored_set(pred, labels)
    report = {"n_units": len(units), "unit": "eye",
              "n_positive": scored.n_positive, "n_negative": scored.n_negative,
              "auc": stats.auc(scored), "label_kind": args.label_kind}
    if args.delong:
        var, ci = delong_ci(scored)
        report["delong_variance"] = var
        report["ci95"] = list(ci)
        print(f"AUC {format_auc_ci(report['auc'], ci)}")
    else:
        print(f"AUC {report['auc']:.3f}")
    if args.operating_point:
        kind, _, value = args.operating_point.partition("=")
        if kind not in ("sensitivity", "specificity") or not value:
            raise UsageError("--operating-point must look like specificity=0.87")
        kwargs = {kind: float(value)}
        thr, sens, spec = stats.operating_point(scored, **kwargs)
        report["operating_point"] = {"constraint": args.operating_point,
                                     "threshold": thr, "sensitivity": sens,
                                     "specificity": spec}
        print(f"operating point @ {args.operating_point}: threshold {thr:.4f}, "
              f"sensitivity {sens:.3f}, specificity {spec:.3f}")
    if args.roc_csv:
        pts = stats.roc_points(scored)
        _write_csv(args.roc_csv, ["fpr", "tpr"],
                   [[f"{p[0]:.6f}", f"{p[1]:.6f}"] for p in pts])
    _write_json(args.out, report)
    _write_provenance(args.out, "eval", args)
    return 0


def cmd_compare(args):
    pred_a = _read_predictions(args.pred_a)
    pred_b = _read_predictions(args.pred_b)
    if set(pred_a) != set(pred_b):
        raise DataError("prediction files cover different units; cannot pair")
    labels = _eye_labels(read_manifest(args.labels), args.label_kind)
    units = sorted(pred_a)
    missing = sorted(set(units) - set(labels))
    if missing:
        raise DataError(f"units without labels, e.g. {missing[:3]}")
    y = np.array([labels[u] for u in units])
    sa = ScoredSet(np.array([pred_a[u] for u in units]), y)
    sb = ScoredSet(np.array([pred_b[u] for u in units]), y)
    z, p = delong_paired_test(sa, sb)
    report = {"auc_a": stats.auc(sa), "auc_b": stats.auc(sb), "z": z, "p": p,
              "n_units": len(units)}
    _write_json(args.out, report)
    _write_provenance(args.out, "compare", args)
    print(f"AUC A {report['auc_a']:.4f} vs B {report['auc_b']:.4f}: "
          f"z = {z:.3f}, p = {p:.4g}")
    return 0


def cmd_tsne(args):
    try:
        with open(args.features, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
    except (OSError, StopIteration) as exc:
        raise DataError(f"cannot read features {args.features}: {exc}") from exc
    if not rows:
        raise DataError(f"{args.features}: no feature rows")
    has_label = len(header) > 1 and header[1] == "label"
    first_feat = 2 if has_label else 1
    ids = [r[0] for r in rows]
    labels = [r[1] if has_label else "" for r in rows]
    feats = np.array([[float(v) for v in r[first_feat:]] for r in rows])
    coords, kl = tsne(feats, perplexity=args.perplexity, seed=args.seed,
                      n_iter=args.iters)
    _write_csv(args.out, ["id", "x", "y", "label"],
               [[ids[i], f"{coords[i, 0]:.6f}", f"{coords[i, 1]:.6f}", labels[i]]
                for i in range(len(ids))])
    if args.kl_out:
        _write_csv(args.kl_out, ["iteration", "kl"],
                   [[i, f"{v:.8f}"] for i, v in enumerate(kl)])
    _write_provenance(args.out, "tsne", args, extra={"final_kl": kl[-1]})
    print(f"embedded {len(ids)} points, final KL {kl[-1]:.4f} -> {args.out}")
    return 0


def cmd_heatmap(args):
    raw = load_raw(args.image)
    if args.ensemble:
        target, _ = load_ensemble(args.ensemble)
        sizes = target.input_sizes
    else:
        target = load_checkpoint(args.checkpoint)
        sizes = [target.config.input_size]
    pre_by_size = {s: normalize(raw, s, source_id=args.image) for s in sizes}
    pre = pre_by_size if isinstance(target, Ensemble) else pre_by_size[sizes[0]]
    emap = input_gradient_map(target, pre, source_id=args.image)
    crop_box = pre_by_size[sizes[0]].fov_bbox
    save_png(overlay_green(raw, emap, tau=args.tau, bbox=crop_box), args.out)
    if args.map_out:
        save_map_png16(emap, args.map_out)
    _write_provenance(args.out, "heatmap", args)
    print(f"wrote overlay -> {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_train_flags(p):
    p.add_argument("--input-size", type=int, default=32)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.2)


def build_parser():
    parser = _Parser(prog="retscreen",
                     description="Desk-scale retinal screening pipeline")
    parser.add_argument("--config", help="JSON file of default flag values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--n-patients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--images-per-eye", type=int, default=2)
    p.add_argument("--me-prob", type=float, default=0.25)
    p.add_argument("--distribution", default=",".join(
        str(x) for x in synth.DEFAULT_GRADE_DISTRIBUTION))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one micro-CNN")
    p.add_argument("--task", choices=training.TASKS, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ensemble", help="greedy ensemble selection over checkpoints")
    p.add_argument("--task", choices=("referable", "severity"), default="referable")
    p.add_argument("--manifest", required=True)
    p.add_argument("--candidates", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--spec-target", type=float, default=0.87)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("infer", help="diagnose exam records")
    p.add_argument("--manifest", required=True)
    p.add_argument("--laterality", required=True, help="laterality checkpoint")
    p.add_argument("--referable", required=True, help="referable ensemble JSON")
    p.add_argument("--severity", help="severity ensemble JSON")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--no-heatmaps", action="store_true")
    p.add_argument("--features-out", help="write per-patient prediction features CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against manifest labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--label-kind", choices=("referable", "vision_threatening"),
                   default="referable")
    p.add_argument("--delong", action="store_true")
    p.add_argument("--operating-point", help="e.g. specificity=0.87")
    p.add_argument("--roc-csv")
    p.add_argument("--out", default="eval_report.json")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired DeLong test of two prediction files")
    p.add_argument("--pred-a", required=True)
    p.add_argument("--pred-b", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--label-kind", choices=("referable", "vision_threatening"),
                   default="referable")
    p.add_argument("--out", default="compare_report.json")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("tsne", help="embed a feature CSV in 2-D")
    p.add_argument("--features", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--kl-out")
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("heatmap", help="overlay evidence for one image")
    p.add_argument("--image", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ensemble")
    group.add_argument("--checkpoint")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--map-out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_heatmap)

    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        if "--config" in argv:
            i = argv.index("--config")
            with open(argv[i + 1], "r", encoding="utf-8") as fh:
                file_values = json.load(fh)
            if not isinstance(file_values, dict):
                raise UsageError("--config file must hold a JSON object")
            defaults = {k.replace("-", "_"): v for k, v in file_values.items()}
            for sp in parser._subparsers._group_actions[0].choices.values():
                sp.set_defaults(**defaults)
                for action in sp._actions:
                    if action.dest in defaults:
                        action.required = False
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
