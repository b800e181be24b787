"""Evaluation: ranking metrics, threshold sensitivity, and full experiments.

roc_auc uses the rank-sum (Mann-Whitney) formulation with average-rank tie
correction, so it equals the pair-counting probability
P(score_pos > score_neg) + 0.5 * P(equal). Pixel-level AUC pools all
pixels across images. The threshold sweep quantifies how much a single
unified threshold loses against per-category optima; its unified accuracy
is the unweighted mean of per-category accuracies, which makes the
reported gap non-negative by construction.

run_experiment drives the two inference paths end to end: unsupervised
(simulate, train the decoder, calibrate, evaluate) and few-shot (build a
per-category memory bank from k normal shots, calibrate on synthetic
anomalies, evaluate). Identical config and seed reproduce byte-identical
artifacts.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_math import LossWeights
from .datasets import (
    CategoryData,
    SuiteConfig,
    build_synthetic_suite,
    load_mvtec_layout,
    materialize_mvtec,
    simulate_training_anomalies,
)
from .decoder import (
    TrainConfig,
    localize,
    save_decoder,
    train_decoder,
    write_loss_trace,
)
from .features import IMAGE_SIZE, FeatureBackendConfig, toy_extract
from .fewshot import build_memory_bank, localize_fewshot, save_bank
from .judge import CalibratedThreshold, Verdict, calibrate_threshold, image_score, render_verdict
from .simulation import RegionConfig, SimulateConfig
from .text_prompts import ensemble_text_features

MODE_UNSUPERVISED = "unsupervised-decoder"
MODE_FEWSHOT = "fewshot"


class MetricUndefinedError(ValueError):
    """The metric is undefined for the given inputs (single-class data)."""


class ExperimentConfigError(ValueError):
    """The experiment configuration has unknown or invalid keys."""


def _average_ranks(values: np.ndarray) -> np.ndarray:
    # 1-based ranks with ties sharing their group's average rank.
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    n = values.shape[0]
    starts = np.empty(n, dtype=bool)
    starts[0] = True
    starts[1:] = sorted_vals[1:] != sorted_vals[:-1]
    group = np.cumsum(starts) - 1
    first = np.flatnonzero(starts)
    counts = np.diff(np.append(first, n))
    group_rank = first + (counts + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = group_rank[group]
    return ranks


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and aligned")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("roc_auc needs both classes present")
    ranks = _average_ranks(s)
    rank_sum = float(np.sum(ranks[y == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pixel_auc(maps, masks) -> float:
    """roc_auc over all pixels pooled across the given image pairs."""
    flat_scores = []
    flat_labels = []
    for m, mask in zip(maps, masks, strict=True):
        m = np.asarray(m, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if m.shape != mask.shape:
            raise ValueError(f"map {m.shape} and mask {mask.shape} dims differ")
        flat_scores.append(m.reshape(-1))
        flat_labels.append((mask.reshape(-1) > 0.5).astype(np.int64))
    if not flat_scores:
        raise MetricUndefinedError("pixel_auc needs at least one image")
    return roc_auc(np.concatenate(flat_scores), np.concatenate(flat_labels))


def accuracy(verdicts, labels) -> float:
    """Fraction of verdict booleans matching the binary labels."""
    if len(verdicts) != len(labels):
        raise ValueError(f"{len(verdicts)} verdicts vs {len(labels)} labels")
    if not verdicts:
        raise ValueError("empty inputs")
    hits = sum(1 for v, y in zip(verdicts, labels) if v.is_anomalous == bool(y))
    return hits / len(verdicts)


@dataclass(frozen=True)
class SweepResult:
    categories: tuple[str, ...]
    thresholds: np.ndarray
    accuracies: np.ndarray  # (n_categories, n_thresholds)
    per_category_optima: dict[str, tuple[float, float]]
    unified_optimum: tuple[float, float]
    gap: float


def _best_on_grid(thresholds: np.ndarray, accs: np.ndarray) -> tuple[float, float]:
    best_t, best_a = float(thresholds[0]), -1.0
    for t, a in zip(thresholds, accs):  # ascending scan, ties go to the larger t
        if a >= best_a:
            best_t, best_a = float(t), float(a)
    return best_t, best_a


def threshold_sweep(per_category_scores, grid) -> SweepResult:
    """Accuracy per (category, threshold) plus per-category/unified optima.

    ``per_category_scores`` maps a category to its (normal scores,
    anomalous scores) pair. The gap is the mean per-category optimum minus
    the best unified accuracy, which cannot be negative.
    """
    thresholds = np.asarray(list(grid), dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("threshold grid is empty")
    names = tuple(sorted(per_category_scores))
    if len(names) < 2:
        raise ValueError("threshold_sweep needs at least 2 categories")
    accs = np.zeros((len(names), thresholds.size))
    for i, name in enumerate(names):
        normal, anomalous = per_category_scores[name]
        normal = np.asarray(normal, dtype=np.float64)
        anomalous = np.asarray(anomalous, dtype=np.float64)
        if normal.size == 0 or anomalous.size == 0:
            raise ValueError(f"category {name!r} needs scores from both classes")
        total = normal.size + anomalous.size
        for j, t in enumerate(thresholds):
            correct = int(np.sum(anomalous > t)) + int(np.sum(normal <= t))
            accs[i, j] = correct / total
    optima = {name: _best_on_grid(thresholds, accs[i]) for i, name in enumerate(names)}
    unified_curve = accs.mean(axis=0)
    unified = _best_on_grid(thresholds, unified_curve)
    gap = float(np.mean([a for _, a in optima.values()]) - unified[1])
    return SweepResult(
        categories=names,
        thresholds=thresholds,
        accuracies=accs,
        per_category_optima=optima,
        unified_optimum=unified,
        gap=gap,
    )


def default_sweep_grid(all_scores, n: int = 201) -> np.ndarray:
    s = np.asarray(all_scores, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


def write_sweep_csv(result: SweepResult, path) -> None:
    header = "threshold," + ",".join(result.categories) + ",unified"
    lines = [header]
    unified_curve = result.accuracies.mean(axis=0)
    for j, t in enumerate(result.thresholds):
        cells = [repr(float(t))]
        cells.extend(repr(float(result.accuracies[i, j])) for i in range(len(result.categories)))
        cells.append(repr(float(unified_curve[j])))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Experiment orchestration


DEFAULT_EXPERIMENT_CONFIG: dict = {
    "dataset": {
        "type": "synthetic",
        "train_per_category": 16,
        "test_normal_per_category": 8,
        "test_anomalous_per_category": 8,
        "root": None,
    },
    "mode": MODE_UNSUPERVISED,
    "k": 1,
    "seed": 0,
    "object_name": "object",
    "text_dim": 64,
    "calib_fraction": 0.25,
    "backend": {"grid_size": 16, "stage_dims": [64, 64, 64, 64], "final_dim": 128},
    # lr is tuned for the unit-scale toy descriptors; real-encoder features
    # train at the conventional 1e-3 (TrainConfig default).
    "train": {
        "epochs": 80,
        "batch_size": 16,
        "lr": 0.5,
        "warmup_frac": 0.1,
        "beta": 1.0,
        "delta": 1.0,
        "gamma": 2.0,
        "temperature": 0.07,
    },
    "sim": {
        "per_normal": 2,
        "max_patches": 2,
        "mode": "source",
        "min_area_frac": 0.01,
        "max_area_frac": 0.05,
    },
}


def _merge_section(defaults: dict, override: dict, path: str) -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ExperimentConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ExperimentConfigError(f"config key {path + key!r} must be an object")
            merged[key] = _merge_section(defaults[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


def normalize_experiment_config(config: dict) -> dict:
    """Apply defaults and reject unknown keys; returns the canonical dict."""
    cfg = _merge_section(DEFAULT_EXPERIMENT_CONFIG, config or {}, "")
    if cfg["mode"] not in (MODE_UNSUPERVISED, MODE_FEWSHOT):
        raise ExperimentConfigError(f"unknown mode {cfg['mode']!r}")
    if cfg["dataset"]["type"] not in ("synthetic", "mvtec"):
        raise ExperimentConfigError(f"unknown dataset type {cfg['dataset']['type']!r}")
    if cfg["dataset"]["type"] == "mvtec" and not cfg["dataset"]["root"]:
        raise ExperimentConfigError("mvtec dataset requires a 'root' path")
    if cfg["k"] < 1:
        raise ExperimentConfigError("k must be >= 1")
    return cfg


def config_hash(cfg: dict) -> str:
    payload = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EvalReport:
    config: dict
    config_hash: str
    mode: str
    seed: int
    threshold: float
    calibration_balanced_accuracy: float
    pooled: dict
    per_category: dict
    bank_sizes: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "mode": self.mode,
            "seed": self.seed,
            "threshold": self.threshold,
            "calibration_balanced_accuracy": self.calibration_balanced_accuracy,
            "pooled": self.pooled,
            "per_category": self.per_category,
            "bank_sizes": self.bank_sizes,
        }


def _sim_config(sim_cfg: dict) -> SimulateConfig:
    return SimulateConfig(
        region=RegionConfig(
            min_area_frac=sim_cfg["min_area_frac"], max_area_frac=sim_cfg["max_area_frac"]
        ),
        max_patches=sim_cfg["max_patches"],
        mode=sim_cfg["mode"],
    )


def _load_dataset(cfg: dict) -> dict[str, CategoryData]:
    ds = cfg["dataset"]
    if ds["type"] == "synthetic":
        return build_synthetic_suite(
            SuiteConfig(
                train_per_category=ds["train_per_category"],
                test_normal_per_category=ds["test_normal_per_category"],
                test_anomalous_per_category=ds["test_anomalous_per_category"],
                seed=cfg["seed"],
                sim=_sim_config(cfg["sim"]),
            )
        )
    return materialize_mvtec(load_mvtec_layout(ds["root"]))


def _zero_mask() -> np.ndarray:
    return np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)


def _category_metrics(scores, labels, maps, masks, verdicts) -> dict:
    out: dict = {"n_test": len(labels)}
    labels_arr = np.asarray(labels)
    out["image_auc"] = (
        roc_auc(scores, labels_arr) if 0 < labels_arr.sum() < len(labels) else None
    )
    try:
        out["pixel_auc"] = pixel_auc(maps, masks)
    except MetricUndefinedError:
        out["pixel_auc"] = None
    out["accuracy"] = accuracy(verdicts, labels)
    return out


def run_experiment(config: dict, out_dir=None) -> EvalReport:
    """Execute one configured experiment; optionally write artifacts.

    With an out_dir, emits report.json, per_category.csv, verdicts.jsonl
    and the trained checkpoint (decoder.dec1 plus loss_trace.csv) or the
    per-category banks (bank_<category>.mbk1).
    """
    cfg = normalize_experiment_config(config)
    seed = int(cfg["seed"])
    data = _load_dataset(cfg)
    names = sorted(data)
    sim_cfg = _sim_config(cfg["sim"])
    backend = FeatureBackendConfig(
        backend="toy",
        grid_size=cfg["backend"]["grid_size"],
        stage_dims=tuple(cfg["backend"]["stage_dims"]),
        final_dim=cfg["backend"]["final_dim"],
        seed=seed,
    )
    text = ensemble_text_features(cfg["object_name"], cfg["text_dim"], seed=seed)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    bank_sizes: dict = {}
    if cfg["mode"] == MODE_UNSUPERVISED:
        train_pools: dict[str, tuple[np.ndarray, ...]] = {}
        calib_pools: dict[str, tuple[np.ndarray, ...]] = {}
        for name in names:
            normals = data[name].train_normals
            if len(normals) < 2:
                train_pools[name] = normals
                calib_pools[name] = normals
                continue
            n_calib = max(1, int(round(cfg["calib_fraction"] * len(normals))))
            n_calib = min(n_calib, len(normals) - 1)
            train_pools[name] = normals[: len(normals) - n_calib]
            calib_pools[name] = normals[len(normals) - n_calib :]
        train_sims = simulate_training_anomalies(
            data, cfg["sim"]["per_normal"], sim_cfg, seed=seed, normals_by_category=train_pools
        )
        train_items: list = list(train_sims)
        for name in names:
            train_items.extend(train_pools[name])
        train_cfg = TrainConfig(
            epochs=cfg["train"]["epochs"],
            batch_size=cfg["train"]["batch_size"],
            lr=cfg["train"]["lr"],
            warmup_frac=cfg["train"]["warmup_frac"],
            seed=seed,
            weights=LossWeights(
                alpha=1.0,
                beta=cfg["train"]["beta"],
                delta=cfg["train"]["delta"],
                gamma=cfg["train"]["gamma"],
            ),
            temperature=cfg["train"]["temperature"],
        )
        result = train_decoder(train_items, backend, text, train_cfg)
        params = result.params

        def score_map(image: np.ndarray, _category: str) -> np.ndarray:
            return localize(toy_extract(image, backend), text, params)

        calib_sims = simulate_training_anomalies(
            data, 1, sim_cfg, seed=seed + 1, normals_by_category=calib_pools
        )
        calib_normal = [
            image_score(score_map(img, name)) for name in names for img in calib_pools[name]
        ]
        calib_anomalous = [image_score(score_map(s.image, s.category)) for s in calib_sims]
        if out_path is not None:
            save_decoder(params, out_path / "decoder.dec1")
            write_loss_trace(result.history, out_path / "loss_trace.csv")
    else:
        k = int(cfg["k"])
        banks = {}
        shot_pools: dict[str, tuple[np.ndarray, ...]] = {}
        for name in names:
            normals = data[name].train_normals
            if len(normals) < k:
                raise ExperimentConfigError(
                    f"category {name!r} has {len(normals)} normals, fewer than k={k}"
                )
            shots = normals[:k]
            shot_pools[name] = shots
            stacks = [toy_extract(img, backend) for img in shots]
            banks[name] = build_memory_bank(
                stacks, image_ids=[f"{name}_shot_{i}" for i in range(k)]
            )
            bank_sizes[name] = list(banks[name].sizes)

        def score_map(image: np.ndarray, category: str) -> np.ndarray:
            return localize_fewshot(toy_extract(image, backend), banks[category])

        calib_sims = simulate_training_anomalies(
            data, 2, sim_cfg, seed=seed + 1, normals_by_category=shot_pools
        )
        calib_normal = [
            image_score(score_map(img, name)) for name in names for img in shot_pools[name]
        ]
        calib_anomalous = [image_score(score_map(s.image, s.category)) for s in calib_sims]
        if out_path is not None:
            for name in names:
                save_bank(banks[name], out_path / f"bank_{name}.mbk1")

    threshold = calibrate_threshold(calib_normal, calib_anomalous)

    per_category: dict = {}
    all_scores: list[float] = []
    all_labels: list[int] = []
    all_maps: list[np.ndarray] = []
    all_masks: list[np.ndarray] = []
    all_verdicts: list[Verdict] = []
    verdict_rows: list[dict] = []
    for name in names:
        scores, labels, maps, masks, verdicts = [], [], [], [], []
        for item in data[name].test:
            amap = score_map(item.image, name)
            verdict = render_verdict(amap, threshold)
            scores.append(verdict.image_score)
            labels.append(item.label)
            maps.append(amap)
            masks.append(item.mask if item.mask is not None else _zero_mask())
            verdicts.append(verdict)
            verdict_rows.append(
                {
                    "image_id": item.image_id,
                    "category": name,
                    "label": item.label,
                    "score": verdict.image_score,
                    "is_anomalous": verdict.is_anomalous,
                    "cells": list(verdict.grid_cells),
                    "text": verdict.response_text,
                }
            )
        per_category[name] = _category_metrics(scores, labels, maps, masks, verdicts)
        all_scores.extend(scores)
        all_labels.extend(labels)
        all_maps.extend(maps)
        all_masks.extend(masks)
        all_verdicts.extend(verdicts)

    pooled = _category_metrics(all_scores, all_labels, all_maps, all_masks, all_verdicts)
    report = EvalReport(
        config=cfg,
        config_hash=config_hash(cfg),
        mode=cfg["mode"],
        seed=seed,
        threshold=threshold.value,
        calibration_balanced_accuracy=threshold.balanced_accuracy,
        pooled=pooled,
        per_category=per_category,
        bank_sizes=bank_sizes,
    )
    if out_path is not None:
        _write_report_files(report, verdict_rows, out_path)
    return report


def _write_report_files(report: EvalReport, verdict_rows: list[dict], out_path: Path) -> None:
    (out_path / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    lines = ["category,image_auc,pixel_auc,accuracy,n_test"]
    for name in sorted(report.per_category):
        row = report.per_category[name]

        def fmt(v):
            return "" if v is None else repr(float(v))

        lines.append(
            f"{name},{fmt(row['image_auc'])},{fmt(row['pixel_auc'])},"
            f"{fmt(row['accuracy'])},{row['n_test']}"
        )
    (out_path / "per_category.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with (out_path / "verdicts.jsonl").open("w", encoding="utf-8") as fh:
        for row in verdict_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
