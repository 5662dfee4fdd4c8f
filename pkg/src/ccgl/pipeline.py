"""Stage orchestration: data, contrastive training, classification, evaluation, export.

Every stage reads its inputs from and writes its artifacts under
``<out_dir>/seed_<seed>/``, so stages can be re-run independently and the
whole chain is reproducible from the archived effective config.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .cohort import Cohort, PatientRecord, RoiTimeSeries, load_cohort, split_cohort, standardized_pcd, synth_cohort
from .config import RunConfig, save_config
from .connectivity import pearson_matrix
from .encoder import embed_cohort, similarity_matrix, train_cgl
from .metrics import (
    attraction_stats,
    auc,
    confusion_metrics,
    export_population_graph,
    knn_baseline,
    write_attraction_csv,
)
from .population import dgc_forward, population_from_embeddings, train_dgc


def seed_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"seed_{seed}"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{hint} not found: {path}")
    return path


def save_snapshot(cohort: Cohort, out: Path) -> None:
    meta = {
        "roi_count": cohort.roi_count,
        "patients": [
            {
                "id": p.id,
                "pcd": p.pcd.tolist(),
                "label": p.label,
                "site": p.site,
                "split": p.split,
            }
            for p in cohort.patients
        ],
    }
    with open(out / "cohort.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    np.savez(out / "series.npz", **{p.id: p.series.values for p in cohort.patients})


def load_snapshot(run_dir: Path) -> Cohort:
    meta_path = _require(run_dir / "cohort.json", "cohort snapshot")
    series_path = _require(run_dir / "series.npz", "cohort series")
    with open(meta_path) as fh:
        meta = json.load(fh)
    with np.load(series_path) as series:
        patients = tuple(
            PatientRecord(
                id=entry["id"],
                series=RoiTimeSeries(series[entry["id"]]),
                pcd=np.asarray(entry["pcd"]),
                label=int(entry["label"]),
                site=entry["site"],
                split=entry["split"],
            )
            for entry in meta["patients"]
        )
    return Cohort(patients=patients, roi_count=int(meta["roi_count"]))


def stage_data(cfg: RunConfig, seed: int) -> Cohort:
    """Synthesize or ingest the cohort, assign splits, archive the snapshot."""
    out = seed_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.synth is not None:
        cohort = synth_cohort(cfg.synth, seed)
    else:
        cohort = load_cohort(cfg.manifest, cfg.min_window_length)
    cohort = split_cohort(cohort, cfg.split_ratios, seed)
    save_snapshot(cohort, out)
    save_config(cfg.with_seed(seed), out / "effective_config.json")
    return cohort


def _write_history_csv(history, path: Path, columns) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in columns])


def stage_train_cgl(cfg: RunConfig, seed: int):
    out = seed_dir(cfg, seed)
    cohort = load_snapshot(out)
    params, history = train_cgl(cohort, cfg, seed)
    save_checkpoint(params, out / "cgl_params.json")
    _write_history_csv(history, out / "cgl_history.csv", ["epoch", "loss", "mean_homo", "mean_heter"])
    return params, history


def stage_train_dgc(cfg: RunConfig, seed: int):
    out = seed_dir(cfg, seed)
    cohort = load_snapshot(out)
    encoder_params = load_checkpoint(_require(out / "cgl_params.json", "CGL checkpoint"))
    embeddings = embed_cohort(cohort, encoder_params, cfg)
    pop = population_from_embeddings(cohort, embeddings)
    params, history = train_dgc(pop, cfg, seed)
    save_checkpoint(params, out / "dgc_params.json")
    _write_history_csv(history, out / "dgc_history.csv", ["epoch", "loss", "val_metric"])
    return params, history


def baseline_fc_features(cohort: Cohort) -> np.ndarray:
    """Raw per-patient features: vectorised upper-triangle Pearson plus z-scored pcd."""
    pcd = standardized_pcd(cohort)
    rows = []
    iu = np.triu_indices(cohort.roi_count, k=1)
    for i, p in enumerate(cohort.patients):
        corr = pearson_matrix(p.series).values
        rows.append(np.concatenate([corr[iu], pcd[i]]))
    return np.stack(rows)


def stage_evaluate(cfg: RunConfig, seed: int) -> dict:
    """Score the trained pipeline on the test split and archive all reports."""
    out = seed_dir(cfg, seed)
    cohort = load_snapshot(out)
    encoder_params = load_checkpoint(_require(out / "cgl_params.json", "CGL checkpoint"))
    dgc_params = load_checkpoint(_require(out / "dgc_params.json", "DGC checkpoint"))

    embeddings = embed_cohort(cohort, encoder_params, cfg)
    pop = population_from_embeddings(cohort, embeddings)
    probs = dgc_forward(pop, dgc_params, settings=cfg.dgc)
    predicted = probs.argmax(axis=1)

    test = pop.test_mask
    report = confusion_metrics(predicted[test], pop.labels[test])
    run = {
        "seed": seed,
        "auc": auc(probs[test, 1], pop.labels[test]),
        "acc": report.accuracy,
        "sen": report.sensitivity,
        "spec": report.specificity,
        "counts": {"tp": report.tp, "fp": report.fp, "tn": report.tn, "fn": report.fn},
    }

    # raw-FC nearest-neighbour baseline on the identical splits
    features = baseline_fc_features(cohort)
    train_mask = pop.train_mask
    k = min(cfg.dgc.k, int(train_mask.sum()))
    base_scores, _ = knn_baseline(features[train_mask], pop.labels[train_mask], features[test], k)
    run["knn_baseline_auc"] = auc(base_scores, pop.labels[test])

    with open(out / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "split", "label", "prob_class0", "prob_class1", "predicted"])
        for i, p in enumerate(cohort.patients):
            writer.writerow(
                [p.id, p.split, p.label, repr(float(probs[i, 0])), repr(float(probs[i, 1])), int(predicted[i])]
            )

    pair_rows = np.concatenate([np.stack(v[:2]) for v in embeddings])
    summary = attraction_stats(similarity_matrix(pair_rows))
    write_attraction_csv(summary, out / "attraction.csv", out / "attraction_hist.csv")

    with open(out / "metrics_run.json", "w") as fh:
        json.dump(run, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run


def stage_export(cfg: RunConfig, seed: int):
    out = seed_dir(cfg, seed)
    cohort = load_snapshot(out)
    encoder_params = load_checkpoint(_require(out / "cgl_params.json", "CGL checkpoint"))
    embeddings = embed_cohort(cohort, encoder_params, cfg)
    pop = population_from_embeddings(cohort, embeddings)
    paths = []
    for fmt in ("dot", "graphml"):
        paths.append(
            export_population_graph(
                pop.node_features,
                pop.labels,
                out / f"population.{fmt}",
                fmt=fmt,
                ids=pop.ids,
                splits=[p.split for p in cohort.patients],
            )
        )
    return paths


def _aggregate(runs: list) -> dict:
    metrics = ("auc", "acc", "sen", "spec", "knn_baseline_auc")
    mean, std = {}, {}
    for key in metrics:
        values = [r[key] for r in runs if r.get(key) is not None]
        if values:
            mean[key] = float(np.mean(values))
            std[key] = float(np.std(values))
    return {"runs": runs, "mean": mean, "std": std, "n_runs": len(runs)}


def run_pipeline(cfg: RunConfig) -> dict:
    """All stages for every configured seed, plus the aggregated metrics report."""
    runs = []
    for seed in cfg.seeds:
        stage_data(cfg, seed)
        stage_train_cgl(cfg, seed)
        stage_train_dgc(cfg, seed)
        runs.append(stage_evaluate(cfg, seed))
        stage_export(cfg, seed)
    aggregated = _aggregate(runs)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as fh:
        json.dump(aggregated, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return aggregated
