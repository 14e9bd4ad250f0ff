"""Experiment commands: splitting, pretraining, fine-tuning, encoding,
downstream evaluation, group-difference maps and report aggregation.

Each ``cmd_*`` function takes an ``ExperimentConfig`` plus explicit paths and
writes its outputs under ``out_dir``.  Outputs carry no timestamps or absolute
paths, so reruns with the same config and seed are byte-identical.
"""
import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import downstream, metrics, pca, vae
from .config import CLASSIFICATION_HEADS, REGRESSION_HEADS, TASKS
from .containers import atomic_write_bytes, load_tensor, save_tensor
from .errors import DataError, ShapeError, StratificationError, UndefinedMetricError
from .ingest import DatasetManifest, load_subject, read_manifest, save_nifti, write_manifest

log = logging.getLogger(__name__)

MAX_FOLDS = 5


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(path, obj):
    blob = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    atomic_write_bytes(path, blob.encode("utf-8"))


def _write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# --- split ------------------------------------------------------------------

def assign_folds(labels, folds, seed):
    """Stratified k-fold assignment: shuffle each class, then deal round-robin.

    Dealing continues across classes, so fold sizes differ by at most one.
    """
    labels = np.asarray(labels)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    rng = np.random.default_rng([seed, 17])
    out = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < folds:
            raise StratificationError(
                f"class {cls!r} has {len(members)} member(s), fewer than {folds} folds"
            )
        members = rng.permutation(members)
        out[members] = (np.arange(len(members)) + offset) % folds
        offset += len(members)
    return out


def assign_splits(labels, fractions, seed):
    """Stratified train/val/test assignment with per-class rounding."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 23])
    out = np.empty(len(labels), dtype=object)
    f_train, f_val, _ = fractions
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        n = len(members)
        n_train = int(round(f_train * n))
        n_val = int(round(f_val * n))
        n_val = min(n_val, n - n_train)
        out[members[:n_train]] = "train"
        out[members[n_train : n_train + n_val]] = "val"
        out[members[n_train + n_val :]] = "test"
    return out.tolist()


def cmd_split(manifest, seed, folds=None, fractions=None, stratify=None, out_path=None):
    """Return (and optionally write) a manifest with the fold column filled."""
    if (folds is None) == (fractions is None):
        raise ValueError("give exactly one of folds or fractions")
    if stratify:
        labels = manifest.labels(stratify)
        if labels is None:
            raise DataError(f"no {stratify!r} labels to stratify on")
    else:
        labels = np.zeros(len(manifest))
    if folds is not None:
        if folds > MAX_FOLDS:
            raise ValueError(f"fold indices are limited to 0-{MAX_FOLDS - 1}")
        assignment = [int(f) for f in assign_folds(labels, folds, seed)]
    else:
        assignment = assign_splits(labels, fractions, seed)
    out = manifest.with_folds(assignment)
    if out_path:
        write_manifest(out_path, out)
    return out


# --- data loading -----------------------------------------------------------

def load_volumes(manifest, window=1):
    return [load_subject(manifest, r, window) for r in manifest]


def pretrain_partition(manifest, cfg):
    """Training / validation records for unsupervised training.

    String splits in the manifest win; otherwise the configured fractions are
    applied deterministically from the seed.  Test subjects are never used.
    """
    folds = [r.fold for r in manifest]
    if all(isinstance(f, str) for f in folds):
        splits = folds
    else:
        splits = assign_splits(np.zeros(len(manifest)), cfg.eval.split, cfg.seed)
    split_of = {r.subject_id: s for r, s in zip(manifest, splits)}
    train = manifest.subset(lambda r: split_of[r.subject_id] == "train")
    val = manifest.subset(lambda r: split_of[r.subject_id] == "val")
    if len(train) == 0:
        raise DataError("no training subjects after splitting")
    return train, val


def _spec_for(cfg, latent_dim, spatial):
    return vae.VaeSpec(latent_dim=latent_dim, input_spatial=tuple(spatial),
                       encoder_channels=tuple(cfg.model.encoder_channels))


# --- pretrain ---------------------------------------------------------------

def cmd_pretrain(cfg, out_dir, manifest_path=None, model="vae", latent_dims=None):
    """Train one VAE (or PCA model) per latent dim; return {dim: checkpoint path}."""
    manifest = read_manifest(manifest_path or cfg.data.manifest)
    train_m, val_m = pretrain_partition(manifest, cfg)
    train_v = load_volumes(train_m, cfg.data.paa_window)
    val_v = load_volumes(val_m, cfg.data.paa_window)
    os.makedirs(out_dir, exist_ok=True)
    dims = latent_dims or cfg.model.latent_dims
    outputs = {}
    for dim in dims:
        if model == "pca":
            k = cfg.model.pca_components or dim
            fitted = pca.fit_volumes(train_v, k)
            path = os.path.join(out_dir, f"pca_k{k}.pca")
            pca.save_pca(path, fitted)
        else:
            spec = _spec_for(cfg, dim, train_v[0].spatial_shape)
            ckpt = vae.train(train_v, val_v, cfg.train, spec=spec)
            path = os.path.join(out_dir, f"vae_L{dim}.vae")
            vae.save_checkpoint(path, ckpt)
            _write_text(os.path.join(out_dir, f"vae_L{dim}_history.csv"), vae.history_csv(ckpt.history))
        outputs[dim] = path
        log.info("wrote %s", path)
    return outputs


# --- fine-tune --------------------------------------------------------------

def cmd_finetune(cfg, checkpoint_path, out_dir, manifest_path=None):
    """One checkpoint per schedule entry plus a from-scratch control.

    Snapshots come from a single run: epoch ``n`` of a longer run equals an
    ``n``-epoch run because every epoch draws from its own (seed, epoch) stream.
    """
    base = vae.load_checkpoint(checkpoint_path)
    manifest = read_manifest(manifest_path or cfg.data.target_manifest or cfg.data.manifest)
    train_m, val_m = pretrain_partition(manifest, cfg)
    train_v = load_volumes(train_m, cfg.data.paa_window)
    val_v = load_volumes(val_m, cfg.data.paa_window)
    if tuple(train_v[0].spatial_shape) != tuple(base.spec.input_spatial):
        raise ShapeError(f"checkpoint expects {base.spec.input_spatial}, data is {train_v[0].spatial_shape}")
    schedule = sorted(set(int(e) for e in cfg.finetune.epochs))
    os.makedirs(out_dir, exist_ok=True)
    outputs = {}
    longest = max(schedule) if schedule else 0
    if longest > 0:
        _, snaps = vae.fine_tune(base, train_v, longest, cfg.train, val_v, snapshot_epochs=schedule)
    else:
        snaps = {}
    for n in schedule:
        path = os.path.join(out_dir, f"finetune_e{n:03d}.vae")
        if n == 0:
            # The zero-epoch entry is the input checkpoint itself, byte for byte.
            with open(checkpoint_path, "rb") as fh:
                atomic_write_bytes(path, fh.read())
        else:
            vae.save_checkpoint(path, snaps[n])
            _write_text(path[:-4] + "_history.csv", vae.history_csv(snaps[n].history))
        outputs[n] = path
    fresh = vae.checkpoint_from_model(vae.VAE(base.spec, seed=cfg.seed), optimizer_state=None,
                                      rng_seed=cfg.seed)
    control = vae.fine_tune(fresh, train_v, longest, cfg.train, val_v)
    control_path = os.path.join(out_dir, f"control_e{longest:03d}.vae")
    vae.save_checkpoint(control_path, control)
    _write_text(control_path[:-4] + "_history.csv", vae.history_csv(control.history))
    outputs["control"] = control_path
    return outputs


# --- encode -----------------------------------------------------------------

def cmd_encode(cfg, model_path, out_dir, manifest_path=None):
    """Write one VXT1 file per subject plus index.json.

    VAE: (T, L) posterior means.  PCA: length-k whitened temporal average.
    A subject that fails to load is recorded under "failures" and skipped.
    """
    manifest = read_manifest(manifest_path or cfg.data.manifest)
    is_pca = model_path.endswith(".pca")
    model = pca.load_pca(model_path) if is_pca else vae.load_checkpoint(model_path)
    net = None if is_pca else model.build_model()
    os.makedirs(out_dir, exist_ok=True)
    entries, failures = {}, {}
    for rec in manifest:
        try:
            vol = load_subject(manifest, rec, cfg.data.paa_window)
            feats = pca.encode_subject(model, vol) if is_pca else vae.infer_latents(net, vol)
        except (OSError, DataError, ShapeError, ValueError) as exc:
            failures[rec.subject_id] = f"{type(exc).__name__}: {exc}"
            log.warning("encode failed for %s: %s", rec.subject_id, exc)
            continue
        fname = f"{rec.subject_id}.vxt"
        save_tensor(os.path.join(out_dir, fname), feats)
        entries[rec.subject_id] = {"file": fname, "shape": list(np.shape(feats))}
    index = {
        "representation": "pca" if is_pca else "vae",
        "latent_dim": model.n_components if is_pca else model.spec.latent_dim,
        "model_sha256": sha256_file(model_path),
        "model_file": os.path.basename(model_path),
        "paa_window": cfg.data.paa_window,
        "subjects": entries,
        "failures": failures,
    }
    _dump_json(os.path.join(out_dir, "index.json"), index)
    return index


def load_store(store_dir):
    with open(os.path.join(store_dir, "index.json")) as fh:
        index = json.load(fh)
    latents = {sid: load_tensor(os.path.join(store_dir, e["file"])) for sid, e in index["subjects"].items()}
    return index, latents


# --- eval -------------------------------------------------------------------

def head_mode(head):
    """Split a grid head name into (base head, feature mode)."""
    if head == "lstm":
        return "lstm", "sequence"
    if head.startswith("m"):
        return head[1:], "mean"
    return head, "concat"


def heads_for_task(kind, heads):
    allowed = CLASSIFICATION_HEADS if kind == "classify" else REGRESSION_HEADS
    return [h for h in heads if h in allowed]


def _fold_ids(manifest, cfg, stratify_labels):
    folds = [r.fold for r in manifest]
    if all(isinstance(f, (int, np.integer)) for f in folds):
        return np.asarray(folds, dtype=np.int64), max(folds) + 1
    return assign_folds(stratify_labels, cfg.eval.folds, cfg.seed), cfg.eval.folds


def _score(kind, pred, truth):
    if kind == "classify":
        return {"roc_auc": metrics.roc_auc(pred, truth)}
    return {"mae": metrics.mae(pred, truth), "r2": metrics.r2(pred, truth), "pearson": metrics.pearson(pred, truth)}


def eval_cell(job):
    """Train and score one (task, head, fold) cell; never raises."""
    head, kind, series, y, train_idx, val_idx, test_idx, ev, seed = job
    base, mode = head_mode(head)
    try:
        if series.ndim == 2 and mode != "mean":
            raise ValueError("per-timepoint features are unavailable for this representation")
        if base == "lstm":
            task_loss = "bce" if kind == "classify" else "mse"
            spec = downstream.LstmSpec(series.shape[2], ev["lstm_dropout"], task_loss)
            lcfg = downstream.LstmConfig(ev["lstm_lr"], ev["lstm_max_epochs"], ev["lstm_patience"], seed)
            trained = downstream.train_lstm_head(series[train_idx], y[train_idx], spec, lcfg,
                                                 series[val_idx], y[val_idx])
            pred = trained.predict(series[test_idx])
        else:
            fit_idx = np.concatenate([train_idx, val_idx])
            data = series if series.ndim == 3 else series[:, None, :]
            fm = downstream.build_features(list(data), mode, train_rows=fit_idx)
            xtr, xte = fm.values[fit_idx], fm.values[test_idx]
            if base == "svm":
                trained = downstream.train_linear_svm(xtr, y[fit_idx], ev["svm_c"], seed=seed)
            elif base == "svr":
                trained = downstream.train_linear_svr(xtr, y[fit_idx], ev["svr_c"], ev["svr_epsilon"], seed=seed)
            else:
                trained = downstream.train_knn(xtr, y[fit_idx], ev["knn_k"],
                                               "classify" if kind == "classify" else "regress")
            pred = trained.predict(xte)
        return {"status": "ok", "metrics": _score(kind, pred, y[test_idx]), "n_test": int(len(test_idx))}
    except (UndefinedMetricError, ValueError, ShapeError, FloatingPointError) as exc:
        return {"status": "failed", "reason": f"{type(exc).__name__}: {exc}", "n_test": int(len(test_idx))}


def cmd_eval(cfg, store_dir, out_dir, manifest_path=None, tasks=None, heads=None, jobs=1):
    """Evaluate every (task, head, fold) cell and write report.json / report.csv."""
    manifest = read_manifest(manifest_path or cfg.data.manifest)
    index, latents = load_store(store_dir)
    present = [r for r in manifest if r.subject_id in latents]
    manifest = DatasetManifest(present, root=manifest.root)
    series = np.stack([latents[r.subject_id] for r in manifest]).astype(np.float64)
    tasks = tasks or cfg.eval.tasks
    heads = heads or cfg.eval.heads
    ev = vars(cfg.eval)

    first_binary = next((TASKS[t][0] for t in tasks if TASKS[t][1] == "classify"), None)
    strat = manifest.labels(first_binary) if first_binary else None
    fold_of, n_folds = _fold_ids(manifest, cfg, strat if strat is not None else np.zeros(len(manifest)))

    jobs_list, keys = [], []
    for task in tasks:
        column, kind = TASKS[task]
        y = manifest.labels(column)
        if y is None:
            raise DataError(f"manifest has no {column!r} labels for task {task!r}")
        for head in heads_for_task(kind, heads):
            for fold in range(n_folds):
                test_idx = np.flatnonzero(fold_of == fold)
                # The next fold serves as validation for early stopping; with two
                # folds there is none to spare and the LSTM monitors its training loss.
                val_fold = (fold + 1) % n_folds if n_folds > 2 else -1
                val_idx = np.flatnonzero(fold_of == val_fold)
                train_idx = np.flatnonzero((fold_of != fold) & (fold_of != val_fold))
                jobs_list.append((head, kind, series, y, train_idx, val_idx, test_idx, ev, cfg.seed))
                keys.append((task, head, fold))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(eval_cell, jobs_list))
    else:
        results = [eval_cell(j) for j in jobs_list]

    cells = []
    for (task, head, fold), res in zip(keys, results):
        base, mode = head_mode(head)
        cells.append({
            "representation": index["representation"],
            "latent_dim": index["latent_dim"],
            "task": task,
            "head": head,
            "mode": mode,
            "fold": fold,
            **res,
        })
    report = {
        "provenance": {
            "config_sha256": cfg.config_hash(),
            "seed": cfg.seed,
            "model_sha256": index["model_sha256"],
            "store_failures": index["failures"],
        },
        "n_subjects": len(manifest),
        "n_folds": n_folds,
        "cells": cells,
    }
    os.makedirs(out_dir, exist_ok=True)
    _dump_json(os.path.join(out_dir, "report.json"), report)
    _write_text(os.path.join(out_dir, "report.csv"), cells_csv(cells))
    return report


CSV_COLUMNS = ["representation", "latent_dim", "task", "head", "mode", "fold", "status",
               "roc_auc", "mae", "r2", "pearson", "n_test", "reason"]


def cells_csv(cells):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for c in cells:
        m = c.get("metrics", {})
        row = {**c, **m}
        writer.writerow([_csv_value(row.get(col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def _csv_value(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def mean_metric(report, task, head, metric):
    vals = [c["metrics"][metric] for c in report["cells"]
            if c["task"] == task and c["head"] == head and c["status"] == "ok"]
    return float(np.mean(vals)) if vals else float("nan")


# --- group difference -------------------------------------------------------

def cmd_groupdiff(cfg, checkpoint_path, store_dir, out_dir, manifest_path=None, column=None, quantile=None):
    """Decode group-mean latents, subtract (group 1 minus group 0), threshold."""
    column = column or cfg.groupdiff.column
    quantile = cfg.groupdiff.quantile if quantile is None else quantile
    manifest = read_manifest(manifest_path or cfg.data.manifest)
    _, latents = load_store(store_dir)
    groups = {0: [], 1: []}
    for rec in manifest:
        value = getattr(rec, column, None)
        if value is None or rec.subject_id not in latents:
            continue
        if value not in (0, 1):
            raise ValueError(f"group column {column!r} must be binary")
        groups[int(value)].append(latents[rec.subject_id])
    if not groups[0] or not groups[1]:
        raise ValueError(f"group column {column!r} leaves an empty group")
    if any(np.ndim(z) != 2 for z in groups[0] + groups[1]):
        raise ShapeError("group differences need per-timepoint VAE latents")
    ckpt = vae.load_checkpoint(checkpoint_path)
    diff = vae.group_difference(ckpt, groups[1], groups[0], quantile)
    os.makedirs(out_dir, exist_ok=True)
    vol_path = os.path.join(out_dir, f"groupdiff_{column}.nii.gz")
    save_nifti(vol_path, diff.astype(np.float32), description=f"{column} 1-0 q{quantile}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "z", "value"])
    for x, y, z in np.argwhere(diff != 0):
        writer.writerow([x, y, z, repr(float(diff[x, y, z]))])
    csv_path = os.path.join(out_dir, f"groupdiff_{column}.csv")
    _write_text(csv_path, buf.getvalue())
    return diff, vol_path, csv_path


# --- report -----------------------------------------------------------------

def cmd_report(report_paths, out_dir):
    """Aggregate fold cells of one or more reports into mean/std per grid entry."""
    groups = {}
    order = []
    for path in report_paths:
        with open(path) as fh:
            rep = json.load(fh)
        for c in rep["cells"]:
            key = (c["representation"], c["latent_dim"], c["task"], c["head"], c["mode"])
            if key not in groups:
                groups[key] = {"ok": [], "failed": 0}
                order.append(key)
            if c["status"] == "ok":
                groups[key]["ok"].append(c["metrics"])
            else:
                groups[key]["failed"] += 1
    rows = []
    for key in order:
        g = groups[key]
        row = dict(zip(["representation", "latent_dim", "task", "head", "mode"], key))
        row["folds_ok"] = len(g["ok"])
        row["folds_failed"] = g["failed"]
        names = sorted({m for cell in g["ok"] for m in cell})
        for m in names:
            vals = np.array([cell[m] for cell in g["ok"]])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        rows.append(row)
    os.makedirs(out_dir, exist_ok=True)
    _dump_json(os.path.join(out_dir, "summary.json"), {"rows": rows})
    cols = ["representation", "latent_dim", "task", "head", "mode", "folds_ok", "folds_failed",
            "roc_auc_mean", "roc_auc_std", "mae_mean", "mae_std", "r2_mean", "r2_std",
            "pearson_mean", "pearson_std"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_csv_value(row.get(c)) for c in cols])
    _write_text(os.path.join(out_dir, "summary.csv"), buf.getvalue())
    return rows
