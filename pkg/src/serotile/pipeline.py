"""File-based pipeline stages and the run orchestrator.

Every stage reads files produced by earlier stages and writes its own
outputs under the run output directory, so any suffix of the pipeline
can be re-run in isolation and reproduces identical bytes. ``run_all``
chains all stages and writes a manifest of content hashes; wall-clock
numbers go to a separate timings file so manifests of identical runs
are byte-identical.
"""

from __future__ import annotations

import csv
import datetime
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .analysis import (cluster_misclassified, confusion, feature_correlation,
                       roc_curve)
from .annotations import parse_annotations, assign_labels
from .cellfeatures import (CELL_FEATURE_NAMES, feature_matrix,
                           read_feature_csv, write_feature_csv)
from .config import PipelineConfig
from .errors import (ConfigError, MissingInputError, SingleClassError,
                     TooFewRowsError)
from .imgio import (cells_to_geojson, load_label_png, load_rgb_png,
                    read_json, render_overlay, save_label_png, save_rgb_png,
                    sha256_file, write_json)
from .lasso import lasso_select
from .patches import (assign_patch, patch_descriptor, patch_feature_names,
                      patch_grid, read_patch_csv, write_patch_csv)
from .segmentation import extract_cells, segment_tile
from .stains import deconvolve, rgb_to_od
from .subjects import bootstrap_call
from .svm import LinearModel, feature_importance, fit_linear_svm
from .synth import CLASS_NAMES, CLASS_NEGATIVE, CLASS_POSITIVE, generate_roi

STAGE_NAMES = ("synth", "deconvolve", "segment", "label", "features",
               "train-cell", "predict-cell", "patchify", "train-patch",
               "predict-patch", "subjects", "report")

_CELL_LABELS = ("tumor", "stroma")


@dataclass(frozen=True)
class RoiRef:
    """One ROI's identity and file locations."""

    class_name: str
    subject_id: str
    roi_id: str

    @property
    def key(self) -> str:
        return f"{self.subject_id}/{self.roi_id}"


class JsonlLogger:
    """Append-only line-JSON event log for one run."""

    def __init__(self, path):
        self.path = path

    def event(self, stage: str, event: str, **fields) -> None:
        record = {
            "ts": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "stage": stage,
            "event": event,
            **fields,
        }
        line = json.dumps(record, sort_keys=True)
        with open(self.path, "a") as fh:
            fh.write(line + "\n")
        print(line, file=sys.stderr)


def _null_logger():
    class _Null:
        def event(self, *args, **kwargs):
            pass
    return _Null()


# ---------------------------------------------------------------- paths

def _cohort_manifest_path(cfg):
    return os.path.join(cfg.cohort_dir, "manifest.json")


def _cohort_png(cfg, ref):
    return os.path.join(cfg.cohort_dir, ref.class_name, ref.subject_id,
                        f"{ref.roi_id}.png")


def _cohort_geojson(cfg, ref):
    return os.path.join(cfg.cohort_dir, ref.class_name, ref.subject_id,
                        f"{ref.roi_id}.geojson")


def _out(cfg, *parts):
    return os.path.join(cfg.output_dir, *parts)


def _od_npz(cfg, ref):
    return _out(cfg, "od", ref.subject_id, f"{ref.roi_id}.npz")


def _nuclei_png(cfg, ref):
    return _out(cfg, "segment", ref.subject_id, f"{ref.roi_id}_nuclei.png")


def _cells_png(cfg, ref):
    return _out(cfg, "segment", ref.subject_id, f"{ref.roi_id}_cells.png")


def _boundaries_geojson(cfg, ref):
    return _out(cfg, "segment", ref.subject_id,
                f"{ref.roi_id}_boundaries.geojson")


def _labels_csv(cfg, ref):
    return _out(cfg, "labels", ref.subject_id, f"{ref.roi_id}_labels.csv")


def _warnings_json(cfg, ref):
    return _out(cfg, "labels", ref.subject_id, f"{ref.roi_id}_warnings.json")


def _features_csv(cfg, ref):
    return _out(cfg, "features", ref.subject_id, f"{ref.roi_id}_features.csv")


def _cells_csv(cfg, ref):
    return _out(cfg, "features", ref.subject_id, f"{ref.roi_id}_cells.csv")


def _pred_csv(cfg, ref):
    return _out(cfg, "predictions", ref.subject_id, f"{ref.roi_id}_pred.csv")


def _overlay_png(cfg, ref):
    return _out(cfg, "overlays", ref.subject_id, f"{ref.roi_id}_overlay.png")


def _rel_out(cfg, path) -> str:
    return os.path.relpath(path, cfg.output_dir)


def _require(path):
    if not os.path.exists(path):
        raise MissingInputError(f"required input missing: {path}")
    return path


def _ensure_parent(path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


# ---------------------------------------------------------- enumeration

def load_cohort_manifest(cfg) -> dict:
    return read_json(_require(_cohort_manifest_path(cfg)))


def enumerate_rois(cfg) -> list:
    """All ROI references, in canonical (class, subject, roi) order."""
    manifest = load_cohort_manifest(cfg)
    spec = manifest["spec"]
    refs = []
    for class_name in CLASS_NAMES:
        for s in range(spec["n_subjects_per_class"]):
            subject_id = f"{class_name.lower()}_{s + 1:02d}"
            for r in range(spec["rois_per_subject"]):
                refs.append(RoiRef(class_name, subject_id, f"roi_{r:02d}"))
    return refs


def train_subjects(cfg, refs) -> set:
    """The subjects whose annotations train both classifiers."""
    per_class = {}
    for ref in refs:
        per_class.setdefault(ref.class_name, [])
        if ref.subject_id not in per_class[ref.class_name]:
            per_class[ref.class_name].append(ref.subject_id)
    chosen = set()
    for class_name, subjects in per_class.items():
        if cfg.train_subjects_per_class >= len(subjects):
            raise ConfigError(
                f"train_subjects_per_class={cfg.train_subjects_per_class} "
                f"leaves no held-out subjects for {class_name}")
        chosen.update(subjects[:cfg.train_subjects_per_class])
    return chosen


def _is_cell_train_roi(cfg, ref, train_set) -> bool:
    roi_index = int(ref.roi_id.split("_")[1])
    return (ref.subject_id in train_set
            and roi_index < cfg.cell_train_rois_per_subject)


def _map_rois(cfg, worker, args_list):
    """Run a per-ROI worker over all ROIs, preserving input order."""
    if cfg.workers <= 1 or len(args_list) <= 1:
        return [worker(args) for args in args_list]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(worker, args_list, chunksize=1))


# ------------------------------------------------------------- stage: synth

def _synth_worker(args):
    cfg, spec, class_name, subject_global, subject_id, roi_index = args
    roi_id = f"roi_{roi_index:02d}"
    rgb, truth, annotations = generate_roi(spec, class_name, subject_global,
                                           roi_index)
    base = os.path.join(cfg.cohort_dir, class_name, subject_id)
    os.makedirs(base, exist_ok=True)
    png = os.path.join(base, f"{roi_id}.png")
    geo = os.path.join(base, f"{roi_id}.geojson")
    tru = os.path.join(base, f"{roi_id}_truth.json")
    save_rgb_png(png, rgb)
    write_json(geo, annotations)
    write_json(tru, truth)
    rel = os.path.join(class_name, subject_id)
    return [os.path.join(rel, f"{roi_id}.png"),
            os.path.join(rel, f"{roi_id}.geojson"),
            os.path.join(rel, f"{roi_id}_truth.json")]


def stage_synth(cfg: PipelineConfig, log) -> list:
    """Generate the synthetic cohort and its content manifest."""
    spec = cfg.cohort_spec()
    os.makedirs(cfg.cohort_dir, exist_ok=True)
    args_list = []
    subject_global = 0
    for class_name in CLASS_NAMES:
        for s in range(spec.n_subjects_per_class):
            subject_id = f"{class_name.lower()}_{s + 1:02d}"
            for r in range(spec.rois_per_subject):
                args_list.append((cfg, spec, class_name, subject_global,
                                  subject_id, r))
            subject_global += 1
    results = _map_rois(cfg, _synth_worker, args_list)
    files = {}
    for rels in results:
        for rel in rels:
            files[rel] = sha256_file(os.path.join(cfg.cohort_dir, rel))
    manifest = {"seed": spec.seed, "spec": spec.to_json(),
                "files": dict(sorted(files.items()))}
    write_json(_cohort_manifest_path(cfg), manifest)
    log.event("synth", "done", rois=len(args_list))
    return sorted(files) + ["manifest.json"]


# -------------------------------------------------------- stage: deconvolve

def _deconv_worker(args):
    cfg, ref = args
    rgb = load_rgb_png(_require(_cohort_png(cfg, ref)))
    od = rgb_to_od(rgb, np.asarray(cfg.white_point))
    hema, eosin, residual = deconvolve(od, cfg.stain_matrix())
    path = _ensure_parent(_od_npz(cfg, ref))
    np.savez_compressed(path, hema=hema.astype(np.float32),
                        eosin=eosin.astype(np.float32),
                        residual=residual.astype(np.float32))
    return [_rel_out(cfg, path)]


def stage_deconvolve(cfg: PipelineConfig, log) -> list:
    refs = enumerate_rois(cfg)
    cfg.stain_matrix()  # fail fast on a bad matrix file
    results = _map_rois(cfg, _deconv_worker, [(cfg, r) for r in refs])
    log.event("deconvolve", "done", rois=len(refs))
    return [rel for rels in results for rel in rels]


# ----------------------------------------------------------- stage: segment

def _segment_worker(args):
    cfg, ref = args
    with np.load(_require(_od_npz(cfg, ref))) as planes:
        hema = planes["hema"].astype(np.float64)
    params = cfg.segmentation_params()
    cells, nuclei, cells_img = segment_tile(hema, params, tile_id=ref.key)
    nuc_path = _ensure_parent(_nuclei_png(cfg, ref))
    cell_path = _ensure_parent(_cells_png(cfg, ref))
    save_label_png(nuc_path, nuclei)
    save_label_png(cell_path, cells_img)
    geo_path = _ensure_parent(_boundaries_geojson(cfg, ref))
    write_json(geo_path, cells_to_geojson(cells, {"roi": ref.key}))
    return [_rel_out(cfg, nuc_path), _rel_out(cfg, cell_path),
            _rel_out(cfg, geo_path)], len(cells)


def stage_segment(cfg: PipelineConfig, log) -> list:
    refs = enumerate_rois(cfg)
    results = _map_rois(cfg, _segment_worker, [(cfg, r) for r in refs])
    total = sum(n for _, n in results)
    log.event("segment", "done", rois=len(refs), cells=total)
    return [rel for rels, _ in results for rel in rels]


# ------------------------------------------------------------- stage: label

def _load_cells(cfg, ref):
    nuclei = load_label_png(_require(_nuclei_png(cfg, ref)))
    cells_img = load_label_png(_require(_cells_png(cfg, ref)))
    return extract_cells(nuclei, cells_img, cfg.pixel_size, ref.key)


def _label_worker(args):
    cfg, ref = args
    cells = _load_cells(cfg, ref)
    doc = read_json(_require(_cohort_geojson(cfg, ref)))
    annotations = parse_annotations(doc)
    labeled, summary = assign_labels(cells, annotations)
    path = _ensure_parent(_labels_csv(cfg, ref))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "label", "source"])
        for lc in labeled:
            writer.writerow([lc.cell.id, lc.label, lc.source])
    warn_path = _ensure_parent(_warnings_json(cfg, ref))
    write_json(warn_path, summary)
    return [_rel_out(cfg, path), _rel_out(cfg, warn_path)]


def stage_label(cfg: PipelineConfig, log) -> list:
    refs = enumerate_rois(cfg)
    results = _map_rois(cfg, _label_worker, [(cfg, r) for r in refs])
    log.event("label", "done", rois=len(refs))
    return [rel for rels in results for rel in rels]


def _read_label_csv(path):
    out = {}
    with open(_require(path), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for cell_id, label, source in reader:
            out[int(cell_id)] = (label, source)
    return out


# ---------------------------------------------------------- stage: features

def _features_worker(args):
    cfg, ref = args
    with np.load(_require(_od_npz(cfg, ref))) as planes:
        hema = planes["hema"].astype(np.float64)
        eosin = planes["eosin"].astype(np.float64)
    cells = _load_cells(cfg, ref)
    labels_by_id = _read_label_csv(_labels_csv(cfg, ref))
    matrix, empty_cyto = feature_matrix(cells, hema, eosin)
    labels = [labels_by_id[c.id][0] for c in cells]
    feat_path = _ensure_parent(_features_csv(cfg, ref))
    write_feature_csv(feat_path, labels, matrix)
    cells_path = _ensure_parent(_cells_csv(cfg, ref))
    ps = cfg.pixel_size
    with open(cells_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "x_px", "y_px", "x_um", "y_um",
                         "label", "source", "empty_cytoplasm"])
        for i, cell in enumerate(cells):
            x_um, y_um = cell.centroid_um
            label, source = labels_by_id[cell.id]
            writer.writerow([cell.id, format(x_um / ps, ".6g"),
                             format(y_um / ps, ".6g"),
                             format(x_um, ".6g"), format(y_um, ".6g"),
                             label, source, int(empty_cyto[i])])
    return [_rel_out(cfg, feat_path), _rel_out(cfg, cells_path)]


def stage_features(cfg: PipelineConfig, log) -> list:
    refs = enumerate_rois(cfg)
    results = _map_rois(cfg, _features_worker, [(cfg, r) for r in refs])
    log.event("features", "done", rois=len(refs))
    return [rel for rels in results for rel in rels]


# --------------------------------------------------------- stage: train-cell

def _gather_labeled(cfg, refs):
    rows = []
    labels = []
    origin = []
    for ref in refs:
        file_labels, matrix = read_feature_csv(_require(_features_csv(cfg, ref)))
        for i, label in enumerate(file_labels):
            if label in _CELL_LABELS:
                rows.append(matrix[i])
                labels.append(label)
                origin.append((ref, i + 1))  # cell ids are 1-based row order
    matrix = (np.asarray(rows) if rows
              else np.zeros((0, len(CELL_FEATURE_NAMES))))
    return matrix, labels, origin


def stage_train_cell(cfg: PipelineConfig, log) -> list:
    refs = enumerate_rois(cfg)
    train_set = train_subjects(cfg, refs)
    train_refs = [r for r in refs if _is_cell_train_roi(cfg, r, train_set)]
    if not train_refs:
        raise ConfigError("no training ROIs selected; check train settings")
    matrix, labels, _ = _gather_labeled(cfg, train_refs)
    if matrix.shape[0] == 0:
        raise MissingInputError("no labeled cells in the training ROIs")
    model, trace = fit_linear_svm(
        matrix, labels, CELL_FEATURE_NAMES, positive_label="tumor",
        negative_label="stroma", c=cfg.svm_c, seed=cfg.seed,
        tol=cfg.svm_tol, max_epochs=cfg.svm_max_epochs)
    model_path = _ensure_parent(_out(cfg, "cellmodel", "model.json"))
    model.save(model_path)

    imp_path = _out(cfg, "cellmodel", "importance.csv")
    with open(imp_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "feature", "importance"])
        for rank, (name, value) in enumerate(feature_importance(model), 1):
            writer.writerow([rank, name, format(value, ".6g")])

    predicted = model.predict(matrix)
    train_conf = confusion(labels, predicted, _CELL_LABELS)
    info = {
        "n_cells": len(labels),
        "n_tumor": labels.count("tumor"),
        "n_stroma": labels.count("stroma"),
        "epochs": len(trace),
        "final_objective": trace[-1] if trace else 0.0,
        "train_accuracy": train_conf.accuracy,
        "train_rois": [r.key for r in train_refs],
    }
    info_path = _out(cfg, "cellmodel", "training.json")
    write_json(info_path, info)
    log.event("train-cell", "done", cells=len(labels), epochs=len(trace),
              train_accuracy=round(train_conf.accuracy, 4))
    return [_rel_out(cfg, p) for p in (model_path, imp_path, info_path)]


# ------------------------------------------------------- stage: predict-cell

def _predict_worker(args):
    cfg, ref, model_doc = args
    model = LinearModel.from_json(model_doc)
    file_labels, matrix = read_feature_csv(_require(_features_csv(cfg, ref)))
    decisions = (model.decision(matrix) if matrix.shape[0]
                 else np.zeros(0))
    predicted = model.predict(matrix) if matrix.shape[0] else []
    path = _ensure_parent(_pred_csv(cfg, ref))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "label", "predicted", "decision"])
        for i, (label, pred) in enumerate(zip(file_labels, predicted)):
            writer.writerow([i + 1, label, pred,
                             format(decisions[i], ".10g")])
    produced = [_rel_out(cfg, path)]
    if cfg.emit_overlays:
        rgb = load_rgb_png(_require(_cohort_png(cfg, ref)))
        cells = _load_cells(cfg, ref)
        by_id = {c.id: p for c, p in zip(cells, predicted)}
        overlay = render_overlay(rgb, cells, by_id)
        overlay_path = _ensure_parent(_overlay_png(cfg, ref))
        save_rgb_png(overlay_path, overlay)
        produced.append(_rel_out(cfg, overlay_path))
    return produced


def _read_pred_csv(path):
    rows = []
    with open(_require(path), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for cell_id, label, predicted, decision in reader:
            rows.append((int(cell_id), label, predicted, float(decision)))
    return rows


def stage_predict_cell(cfg: PipelineConfig, log) -> list:
    refs = enumerate_rois(cfg)
    model_path = _require(_out(cfg, "cellmodel", "model.json"))
    model_doc = read_json(model_path)
    results = _map_rois(cfg, _predict_worker,
                        [(cfg, r, model_doc) for r in refs])
    produced = [rel for rels in results for rel in rels]

    # held-out evaluation: labeled cells outside the training ROI set
    train_set = train_subjects(cfg, refs)
    eval_refs = [r for r in refs if not _is_cell_train_roi(cfg, r, train_set)]
    true_all = []
    pred_all = []
    by_class = {c: ([], []) for c in CLASS_NAMES}
    mis_rows = []
    for ref in eval_refs:
        for cell_id, label, predicted, decision in _read_pred_csv(
                _pred_csv(cfg, ref)):
            if label not in _CELL_LABELS:
                continue
            true_all.append(label)
            pred_all.append(predicted)
            by_class[ref.class_name][0].append(label)
            by_class[ref.class_name][1].append(predicted)
            if label != predicted:
                mis_rows.append((ref, cell_id, label, predicted, decision))

    eval_dir = _out(cfg, "evaluation")
    os.makedirs(eval_dir, exist_ok=True)
    produced_eval = []

    overall = confusion(true_all, pred_all, _CELL_LABELS)
    path = os.path.join(eval_dir, "cell_confusion_overall.csv")
    _write_rows(path, overall.to_rows())
    produced_eval.append(path)
    accuracy = {"overall": overall.accuracy, "n_cells": overall.total}
    for class_name in CLASS_NAMES:
        conf = confusion(*by_class[class_name], _CELL_LABELS)
        path = os.path.join(eval_dir, f"cell_confusion_{class_name}.csv")
        _write_rows(path, conf.to_rows())
        produced_eval.append(path)
        accuracy[class_name] = conf.accuracy
    acc_path = os.path.join(eval_dir, "cell_accuracy.json")
    write_json(acc_path, accuracy)
    produced_eval.append(acc_path)

    # cluster the failures for review; skip silently when there are none
    mis_path = os.path.join(eval_dir, "misclassified.csv")
    mis_header = ["subject", "roi", "cell_id", "label", "predicted",
                  "decision", "cluster", "representative"]
    if mis_rows:
        features = []
        for ref, cell_id, *_ in mis_rows:
            _, matrix = read_feature_csv(_features_csv(cfg, ref))
            features.append(matrix[cell_id - 1])
        assignments, representatives = cluster_misclassified(
            np.asarray(features), k=cfg.misclassified_clusters, seed=cfg.seed)
        rep_set = set(representatives)
        rows = [mis_header]
        for i, (ref, cell_id, label, predicted, decision) in enumerate(mis_rows):
            rows.append([ref.subject_id, ref.roi_id, cell_id, label,
                         predicted, format(decision, ".10g"),
                         int(assignments[i]), int(i in rep_set)])
        _write_rows(mis_path, rows)
    else:
        _write_rows(mis_path, [mis_header])
    produced_eval.append(mis_path)

    # correlation structure of the features, on the training cells
    train_refs = [r for r in refs if _is_cell_train_roi(cfg, r, train_set)]
    matrix, _, _ = _gather_labeled(cfg, train_refs)
    corr_path = os.path.join(eval_dir, "feature_correlation.csv")
    try:
        corr, order = feature_correlation(matrix)
        names = [CELL_FEATURE_NAMES[i] for i in order]
        rows = [["feature"] + names]
        for i, name in enumerate(names):
            rows.append([name] + [format(v, ".6g") for v in corr[i]])
        _write_rows(corr_path, rows)
    except TooFewRowsError:
        _write_rows(corr_path, [["feature"]])
    produced_eval.append(corr_path)

    log.event("predict-cell", "done", rois=len(refs),
              eval_cells=overall.total,
              eval_accuracy=round(overall.accuracy, 4),
              misclassified=len(mis_rows))
    return produced + [_rel_out(cfg, p) for p in produced_eval]


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


# ----------------------------------------------------------- stage: patchify

def _read_cells_csv(path):
    rows = []
    with open(_require(path), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows.append({
                "cell_id": int(row[0]),
                "x_px": float(row[1]), "y_px": float(row[2]),
                "x_um": float(row[3]), "y_um": float(row[4]),
                "label": row[5], "source": row[6],
                "empty_cytoplasm": bool(int(row[7])),
            })
    return rows


def stage_patchify(cfg: PipelineConfig, log) -> list:
    refs = enumerate_rois(cfg)
    manifest = load_cohort_manifest(cfg)
    tile_shape = tuple(manifest["spec"]["roi_size_px"])
    rows_grid, cols_grid = patch_grid(tile_shape, cfg.patch_size_px)

    descriptor_rows = []
    eligibility_rows = []
    n_eligible = 0
    for ref in refs:
        cells = _read_cells_csv(_cells_csv(cfg, ref))
        _, matrix = read_feature_csv(_require(_features_csv(cfg, ref)))
        preds = _read_pred_csv(_pred_csv(cfg, ref))
        groups = {}
        for cell, (cell_id, _, predicted, _) in zip(cells, preds):
            if cell["cell_id"] != cell_id:
                raise MissingInputError(
                    f"cell id mismatch between features and predictions "
                    f"for {ref.key}")
            where = assign_patch((cell["x_px"], cell["y_px"]), tile_shape,
                                 cfg.patch_size_px)
            if where is None:
                continue
            groups.setdefault(where, {"tumor": [], "stroma": []})
            groups[where][predicted].append(cell_id - 1)
        for grid_row in range(rows_grid):
            for grid_col in range(cols_grid):
                members = groups.get((grid_row, grid_col),
                                     {"tumor": [], "stroma": []})
                n_tumor = len(members["tumor"])
                n_stroma = len(members["stroma"])
                eligible = (n_tumor >= cfg.min_cells_per_patch
                            and n_stroma >= cfg.min_cells_per_patch)
                eligibility_rows.append([ref.key, grid_row, grid_col,
                                         n_tumor, n_stroma, int(eligible)])
                if not eligible:
                    continue
                n_eligible += 1
                t_idx = np.asarray(members["tumor"], dtype=int)
                s_idx = np.asarray(members["stroma"], dtype=int)
                xy = np.asarray([[c["x_um"], c["y_um"]] for c in cells])
                vector = patch_descriptor(
                    matrix[t_idx], matrix[s_idx], xy[t_idx], xy[s_idx],
                    bandwidths=cfg.kde_bandwidths_um,
                    min_cells=cfg.min_cells_per_patch)
                descriptor_rows.append((ref.key, grid_row, grid_col,
                                        ref.class_name, vector))

    desc_path = _ensure_parent(_out(cfg, "patches", "descriptors.csv"))
    write_patch_csv(desc_path, descriptor_rows,
                    bandwidths=cfg.kde_bandwidths_um)
    elig_path = _out(cfg, "patches", "eligibility.csv")
    _write_rows(elig_path, [["roi_id", "grid_row", "grid_col", "n_tumor",
                             "n_stroma", "eligible"]] + eligibility_rows)
    log.event("patchify", "done", patches=len(eligibility_rows),
              eligible=n_eligible)
    return [_rel_out(cfg, desc_path), _rel_out(cfg, elig_path)]


# -------------------------------------------------------- stage: train-patch

def _subject_of_key(key: str) -> str:
    return key.split("/")[0]


def stage_train_patch(cfg: PipelineConfig, log) -> list:
    refs = enumerate_rois(cfg)
    train_set = train_subjects(cfg, refs)
    names = patch_feature_names(cfg.kde_bandwidths_um)
    keys, labels, matrix = read_patch_csv(
        _require(_out(cfg, "patches", "descriptors.csv")),
        bandwidths=cfg.kde_bandwidths_um)
    train_idx = [i for i, key in enumerate(keys)
                 if _subject_of_key(key[0]) in train_set]
    if not train_idx:
        raise MissingInputError("no eligible patches from training subjects")
    x = matrix[train_idx]
    y = [labels[i] for i in train_idx]

    model, trace = fit_linear_svm(
        x, y, names, positive_label=CLASS_POSITIVE,
        negative_label=CLASS_NEGATIVE, c=cfg.svm_c, seed=cfg.seed,
        tol=cfg.svm_tol, max_epochs=cfg.svm_max_epochs)
    model_path = _ensure_parent(_out(cfg, "patchmodel", "model.json"))
    model.save(model_path)

    fit = lasso_select(
        x, y, names, positive_label=CLASS_POSITIVE,
        negative_label=CLASS_NEGATIVE, n_lambdas=cfg.lasso["n_lambdas"],
        lambda_min_ratio=cfg.lasso["lambda_min_ratio"],
        n_folds=cfg.lasso["n_folds"], seed=cfg.seed, tol=cfg.lasso["tol"])
    lasso_path = _out(cfg, "patchmodel", "lasso_model.json")
    fit.model.save(lasso_path)

    # selected-feature table: importance is the coefficient scaled by the
    # largest magnitude, decomposed by cell type / feature / statistic
    table_path = _out(cfg, "patchmodel", "lasso_selection.csv")
    rows = [["No.", "Content", "Cellular Feature Name", "Statistics",
             "Importance"]]
    peak = max((abs(v) for _, v in fit.nonzero), default=0.0)
    for rank, (name, coef) in enumerate(fit.nonzero, 1):
        content, feature, stat = name.split(":")
        importance = coef / peak if peak > 0 else 0.0
        rows.append([rank, content, feature, stat,
                     format(importance, ".6g")])
    _write_rows(table_path, rows)

    path_path = _out(cfg, "patchmodel", "lasso_path.csv")
    rows = [["index", "lambda", "cv_mean", "cv_se", "nnz", "chosen"]]
    for i in range(fit.lambda_path.shape[0]):
        rows.append([i, format(fit.lambda_path[i], ".10g"),
                     format(fit.cv_mean[i], ".10g"),
                     format(fit.cv_se[i], ".10g"), int(fit.nnz_path[i]),
                     int(i == fit.chosen_index)])
    _write_rows(path_path, rows)

    info = {
        "n_patches": len(train_idx),
        "n_positive": y.count(CLASS_POSITIVE),
        "n_negative": y.count(CLASS_NEGATIVE),
        "svm_epochs": len(trace),
        "svm_final_objective": trace[-1] if trace else 0.0,
        "lasso_lambda": fit.lam,
        "lasso_selected": fit.n_selected,
    }
    info_path = _out(cfg, "patchmodel", "training.json")
    write_json(info_path, info)
    log.event("train-patch", "done", patches=len(train_idx),
              lasso_selected=fit.n_selected, svm_epochs=len(trace))
    return [_rel_out(cfg, p) for p in (model_path, lasso_path, table_path,
                                       path_path, info_path)]


# ------------------------------------------------------ stage: predict-patch

def stage_predict_patch(cfg: PipelineConfig, log) -> list:
    keys, labels, matrix = read_patch_csv(
        _require(_out(cfg, "patches", "descriptors.csv")),
        bandwidths=cfg.kde_bandwidths_um)
    model = LinearModel.load(_require(_out(cfg, "patchmodel", "model.json")))
    decisions = model.decision(matrix) if matrix.shape[0] else np.zeros(0)
    predicted = model.predict(matrix) if matrix.shape[0] else []
    path = _ensure_parent(_out(cfg, "patchpred", "decisions.csv"))
    rows = [["roi_id", "grid_row", "grid_col", "subject", "label",
             "decision", "predicted"]]
    for (key, grid_row, grid_col), label, dec, pred in zip(
            keys, labels, decisions, predicted):
        rows.append([key, grid_row, grid_col, _subject_of_key(key), label,
                     format(dec, ".10g"), pred])
    _write_rows(path, rows)
    log.event("predict-patch", "done", patches=len(keys))
    return [_rel_out(cfg, path)]


def _read_decisions_csv(path):
    rows = []
    with open(_require(path), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for key, grid_row, grid_col, subject, label, decision, pred in reader:
            rows.append({"roi_id": key, "grid_row": int(grid_row),
                         "grid_col": int(grid_col), "subject": subject,
                         "label": label, "decision": float(decision),
                         "predicted": pred})
    return rows


# ----------------------------------------------------------- stage: subjects

def stage_subjects(cfg: PipelineConfig, log) -> list:
    rows = _read_decisions_csv(_out(cfg, "patchpred", "decisions.csv"))
    by_subject = {}
    subject_class = {}
    for row in rows:
        by_subject.setdefault(row["subject"], []).append(row["decision"])
        subject_class[row["subject"]] = row["label"]

    calls_rows = [["subject", "label", "n_patches", "fraction_positive",
                   "predicted"]]
    means_rows = [["subject", "replicate", "mean_decision"]]
    n_correct = 0
    for subject in sorted(by_subject):
        call = bootstrap_call(subject, by_subject[subject],
                              positive_label=CLASS_POSITIVE,
                              negative_label=CLASS_NEGATIVE,
                              replicates=cfg.bootstrap_replicates,
                              seed=cfg.seed)
        calls_rows.append([subject, subject_class[subject], call.n_patches,
                           format(call.fraction_positive, ".6g"),
                           call.predicted])
        if call.predicted == subject_class[subject]:
            n_correct += 1
        for r, mean in enumerate(call.replicate_means):
            means_rows.append([subject, r, format(mean, ".10g")])

    calls_path = _ensure_parent(_out(cfg, "subjects", "calls.csv"))
    _write_rows(calls_path, calls_rows)
    means_path = _out(cfg, "subjects", "replicate_means.csv")
    _write_rows(means_path, means_rows)
    log.event("subjects", "done", subjects=len(by_subject),
              correct=n_correct)
    return [_rel_out(cfg, calls_path), _rel_out(cfg, means_path)]


# ------------------------------------------------------------- stage: report

def stage_report(cfg: PipelineConfig, log) -> list:
    refs = enumerate_rois(cfg)
    train_set = train_subjects(cfg, refs)
    rows = _read_decisions_csv(_out(cfg, "patchpred", "decisions.csv"))
    held_out = [r for r in rows if r["subject"] not in train_set]

    report_dir = _out(cfg, "report")
    os.makedirs(report_dir, exist_ok=True)
    produced = []

    decisions = np.array([r["decision"] for r in held_out])
    labels_pm = np.array([1.0 if r["label"] == CLASS_POSITIVE else -1.0
                          for r in held_out])
    auc = None
    roc_path = os.path.join(report_dir, "roc.csv")
    try:
        points, auc = roc_curve(decisions, labels_pm)
        roc_rows = [["fpr", "tpr", "threshold"]]
        for fpr, tpr, thr in points:
            roc_rows.append([format(fpr, ".10g"), format(tpr, ".10g"),
                             format(thr, ".10g")])
        _write_rows(roc_path, roc_rows)
    except SingleClassError:
        _write_rows(roc_path, [["fpr", "tpr", "threshold"]])
    produced.append(roc_path)

    # shared-bin decision histograms per class
    n_bins = 50
    if decisions.size:
        lo = float(decisions.min())
        hi = float(decisions.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, n_bins + 1)
        for class_name in CLASS_NAMES:
            values = decisions[np.array([r["label"] == class_name
                                         for r in held_out], dtype=bool)]
            counts, _ = np.histogram(values, bins=edges)
            hist_rows = [["bin_left", "bin_right", "count"]]
            for b in range(n_bins):
                hist_rows.append([format(edges[b], ".10g"),
                                  format(edges[b + 1], ".10g"),
                                  int(counts[b])])
            path = os.path.join(report_dir,
                                f"decision_histogram_{class_name}.csv")
            _write_rows(path, hist_rows)
            produced.append(path)

    patch_conf = confusion([r["label"] for r in held_out],
                           [r["predicted"] for r in held_out],
                           CLASS_NAMES)
    conf_path = os.path.join(report_dir, "patch_confusion.csv")
    _write_rows(conf_path, patch_conf.to_rows())
    produced.append(conf_path)

    cell_accuracy = read_json(
        _require(_out(cfg, "evaluation", "cell_accuracy.json")))
    calls = {}
    with open(_require(_out(cfg, "subjects", "calls.csv")),
              newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        subject_rows = list(reader)
    n_subjects = len(subject_rows)
    n_correct = sum(1 for row in subject_rows if row[1] == row[4])
    calls = {"n_subjects": n_subjects, "n_correct": n_correct,
             "accuracy": n_correct / n_subjects if n_subjects else 0.0}

    summary = {
        "cells": cell_accuracy,
        "patches": {
            "n_eval": patch_conf.total,
            "accuracy": patch_conf.accuracy,
            "auc": auc,
        },
        "subjects": calls,
        "package_version": __version__,
    }
    summary_path = os.path.join(report_dir, "summary.json")
    write_json(summary_path, summary)
    produced.append(summary_path)
    log.event("report", "done", patch_accuracy=round(patch_conf.accuracy, 4),
              subject_accuracy=round(calls["accuracy"], 4))
    return [_rel_out(cfg, p) for p in produced]


# --------------------------------------------------------------- orchestration

_STAGE_FUNCS = {
    "synth": stage_synth,
    "deconvolve": stage_deconvolve,
    "segment": stage_segment,
    "label": stage_label,
    "features": stage_features,
    "train-cell": stage_train_cell,
    "predict-cell": stage_predict_cell,
    "patchify": stage_patchify,
    "train-patch": stage_train_patch,
    "predict-patch": stage_predict_patch,
    "subjects": stage_subjects,
    "report": stage_report,
}


def run_stage(cfg: PipelineConfig, name: str, log=None) -> list:
    if name not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {name!r}")
    os.makedirs(cfg.output_dir, exist_ok=True)
    if log is None:
        log = JsonlLogger(_out(cfg, "logs.jsonl"))
    log.event(name, "start")
    return _STAGE_FUNCS[name](cfg, log)


def run_all(cfg: PipelineConfig, log=None) -> dict:
    """Run every stage in order; write the run manifest and timings.

    The manifest records the resolved configuration, input content
    hashes, and a content hash per produced file, grouped by stage.
    Synth paths are relative to the cohort directory, all others to the
    output directory. Wall-clock seconds go to timings.json, which the
    manifest deliberately excludes so identical runs produce identical
    manifests.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    if log is None:
        log = JsonlLogger(_out(cfg, "logs.jsonl"))
    stage_hashes = {}
    timings = {}
    for name in STAGE_NAMES:
        started = time.perf_counter()
        produced = run_stage(cfg, name, log)
        timings[name] = round(time.perf_counter() - started, 3)
        base = cfg.cohort_dir if name == "synth" else cfg.output_dir
        stage_hashes[name] = {
            rel: sha256_file(os.path.join(base, rel))
            for rel in sorted(produced)
        }

    manifest = {
        "package_version": __version__,
        "config": cfg.snapshot(),
        "inputs": {
            "cohort_manifest": sha256_file(_cohort_manifest_path(cfg)),
            "stain_matrix": (sha256_file(cfg.stain_matrix_path)
                             if cfg.stain_matrix_path else None),
        },
        "stages": stage_hashes,
    }
    write_json(_out(cfg, "manifest.json"), manifest)
    write_json(_out(cfg, "timings.json"), timings)
    log.event("run-all", "done", seconds=round(sum(timings.values()), 3))
    return manifest
