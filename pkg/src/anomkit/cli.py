"""Command-line pipeline: simulate, train, bank, infer, eval, sweep.

Every subcommand takes a JSON config file (--config) whose keys can be
overridden by flags (flags win). Unknown config keys abort before any
filesystem write. Exit codes: 0 success, 1 usage error, 2 runtime error.
All outputs land under the --out directory and are byte-identical across
reruns with the same config and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import imgio
from .datasets import load_mvtec_layout  # noqa: F401  (re-exported surface)
from .decoder import (
    TrainConfig,
    load_decoder,
    localize,
    save_decoder,
    train_decoder,
    write_loss_trace,
)
from .core_math import LossWeights
from .eval_harness import (
    DEFAULT_EXPERIMENT_CONFIG,
    ExperimentConfigError,
    default_sweep_grid,
    run_experiment,
    threshold_sweep,
    write_sweep_csv,
)
from .features import IMAGE_SIZE, FeatureBackendConfig, resize_bilinear_rgb, toy_extract
from .fewshot import build_memory_bank, load_bank, localize_fewshot, save_bank
from .judge import cells_or_fallback, render_verdict
from .simulation import RegionConfig, SimulateConfig, simulate_anomaly, write_sample
from .text_prompts import DEFAULT_QUESTION, description_for, ensemble_text_features

_REQUIRED = object()


class UsageError(Exception):
    """Bad invocation: malformed config, unknown keys, missing inputs."""


class PrerequisiteError(Exception):
    """A required artifact is missing; the message names the producing command."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we map usage to 1
        raise UsageError(message)


def _load_config(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(data)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = sorted(k for k, v in cfg.items() if v is _REQUIRED)
    if missing:
        raise UsageError(f"missing required config keys: {', '.join(missing)}")
    return cfg


def _require_dir(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.is_dir():
        raise UsageError(f"{what} is not a directory: {path}")
    return path


def _pngs(directory: Path) -> list[Path]:
    return sorted(directory.glob("*.png"))


def _load_normals(directory: Path) -> list[tuple[str, np.ndarray]]:
    paths = _pngs(directory)
    if not paths:
        raise UsageError(f"no .png images in {directory}")
    return [
        (p.stem, resize_bilinear_rgb(imgio.load_image_rgb(p), IMAGE_SIZE, IMAGE_SIZE))
        for p in paths
    ]


def _backend_from(cfg: dict) -> FeatureBackendConfig:
    return FeatureBackendConfig(
        backend="toy",
        grid_size=cfg["grid_size"],
        stage_dims=(cfg["stage_dim"],) * 4,
        final_dim=cfg["final_dim"],
        seed=cfg["seed"],
    )


def _backend_meta(backend: FeatureBackendConfig) -> dict:
    return {
        "grid_size": backend.grid_size,
        "stage_dims": list(backend.stage_dims),
        "final_dim": backend.final_dim,
        "seed": backend.seed,
    }


def _write_json(payload: dict, path: Path) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands


SIMULATE_DEFAULTS = {
    "input_dir": _REQUIRED,
    "samples_per_image": 2,
    "seed": 0,
    "category": "object",
    "donor": "rotate",  # "rotate" pairs each image with the next; "self" reuses it
    "mode": "mixed",
    "max_patches": 3,
    "min_area_frac": 0.005,
    "max_area_frac": 0.05,
}


def cmd_simulate(cfg: dict, out: Path) -> int:
    in_dir = _require_dir(cfg["input_dir"], "input_dir")
    if cfg["donor"] not in ("rotate", "self"):
        raise UsageError(f"donor must be 'rotate' or 'self', got {cfg['donor']!r}")
    normals = _load_normals(in_dir)
    sim_cfg = SimulateConfig(
        region=RegionConfig(
            min_area_frac=cfg["min_area_frac"], max_area_frac=cfg["max_area_frac"]
        ),
        max_patches=cfg["max_patches"],
        mode=cfg["mode"],
    )
    out.mkdir(parents=True, exist_ok=True)
    description = description_for(cfg["category"]).description
    qa_lines = []
    for i, (_, image) in enumerate(normals):
        donor = image if cfg["donor"] == "self" else normals[(i + 1) % len(normals)][1]
        for j in range(cfg["samples_per_image"]):
            sample_seed = cfg["seed"] + i * cfg["samples_per_image"] + j
            sample = simulate_anomaly(image, donor, sample_seed, sim_cfg, cfg["category"])
            paths = write_sample(sample, out)
            cells = cells_or_fallback(sample.mask)
            qa_lines.append(
                {
                    "image": str(paths["image"].relative_to(out)),
                    "question": description + DEFAULT_QUESTION,
                    "answer": (
                        "Yes, there is an anomaly in the image, at the "
                        + " and ".join(cells)
                        + " of the image."
                    ),
                }
            )
    with (out / "qa.jsonl").open("w", encoding="utf-8") as fh:
        for line in qa_lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    print(f"wrote {len(qa_lines)} samples to {out}")
    return 0


TRAIN_DEFAULTS = {
    "samples_dir": _REQUIRED,
    "normals_dir": "",
    "epochs": 50,
    "batch_size": 16,
    "lr": 1e-3,
    "warmup_frac": 0.1,
    "seed": 0,
    "beta": 1.0,
    "delta": 1.0,
    "gamma": 2.0,
    "temperature": 0.07,
    "grid_size": 16,
    "stage_dim": 64,
    "final_dim": 128,
    "object_name": "object",
    "text_dim": 64,
}


def _load_samples_tree(samples_dir: Path) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for img_path in sorted(samples_dir.glob("*/*_img.png")):
        mask_path = img_path.with_name(img_path.name.replace("_img.png", "_mask.png"))
        if not mask_path.is_file():
            raise PrerequisiteError(
                f"missing mask {mask_path} for {img_path}; rerun `simulate`"
            )
        pairs.append((imgio.load_image_rgb(img_path), imgio.load_mask(mask_path)))
    return pairs


def cmd_train(cfg: dict, out: Path) -> int:
    samples_dir = _require_dir(cfg["samples_dir"], "samples_dir")
    items: list = _load_samples_tree(samples_dir)
    if not items:
        raise PrerequisiteError(
            f"no simulated samples under {samples_dir}; run `simulate` first"
        )
    if cfg["normals_dir"]:
        normals_dir = _require_dir(cfg["normals_dir"], "normals_dir")
        items.extend(img for _, img in _load_normals(normals_dir))
    backend = _backend_from(cfg)
    text = ensemble_text_features(cfg["object_name"], cfg["text_dim"], seed=cfg["seed"])
    train_cfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        warmup_frac=cfg["warmup_frac"],
        seed=cfg["seed"],
        weights=LossWeights(beta=cfg["beta"], delta=cfg["delta"], gamma=cfg["gamma"]),
        temperature=cfg["temperature"],
    )
    result = train_decoder(items, backend, text, train_cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_decoder(result.params, out / "decoder.dec1")
    write_loss_trace(result.history, out / "loss_trace.csv")
    _write_json(
        {
            "kind": "decoder",
            "backend": _backend_meta(backend),
            "text": {"object_name": cfg["object_name"], "dim": cfg["text_dim"], "seed": cfg["seed"]},
        },
        out / "train_meta.json",
    )
    print(f"trained {cfg['epochs']} epochs, final loss {result.history[-1].loss:.6f}")
    return 0


BANK_DEFAULTS = {
    "normals_dir": _REQUIRED,
    "k": 0,  # 0 = use every image in normals_dir
    "coreset_fraction": 1.0,
    "seed": 0,
    "grid_size": 16,
    "stage_dim": 64,
    "final_dim": 128,
}


def cmd_bank(cfg: dict, out: Path) -> int:
    normals_dir = _require_dir(cfg["normals_dir"], "normals_dir")
    normals = _load_normals(normals_dir)
    if cfg["k"]:
        normals = normals[: cfg["k"]]
    backend = _backend_from(cfg)
    stacks = [toy_extract(img, backend) for _, img in normals]
    bank = build_memory_bank(
        stacks, coreset_fraction=cfg["coreset_fraction"], image_ids=[n for n, _ in normals]
    )
    out.mkdir(parents=True, exist_ok=True)
    save_bank(bank, out / "bank.mbk1")
    _write_json({"kind": "bank", "backend": _backend_meta(backend)}, out / "bank_meta.json")
    print(f"stored {bank.sizes} patches per stage from {len(normals)} normal images")
    return 0


INFER_DEFAULTS = {
    "images_dir": _REQUIRED,
    "checkpoint": "",
    "bank": "",
    "meta": "",
    "threshold": 0.5,
}


def cmd_infer(cfg: dict, out: Path) -> int:
    images_dir = _require_dir(cfg["images_dir"], "images_dir")
    if not cfg["checkpoint"] and not cfg["bank"]:
        raise UsageError("either 'checkpoint' or 'bank' is required; run `train` or `bank` first")
    if cfg["checkpoint"] and cfg["bank"]:
        raise UsageError("give only one of 'checkpoint' or 'bank'")
    artifact = Path(cfg["checkpoint"] or cfg["bank"])
    if not artifact.is_file():
        producer = "train" if cfg["checkpoint"] else "bank"
        raise PrerequisiteError(f"missing artifact {artifact}; run `{producer}` first")
    meta_name = "train_meta.json" if cfg["checkpoint"] else "bank_meta.json"
    meta_path = Path(cfg["meta"]) if cfg["meta"] else artifact.parent / meta_name
    if not meta_path.is_file():
        producer = "train" if cfg["checkpoint"] else "bank"
        raise PrerequisiteError(f"missing metadata {meta_path}; run `{producer}` first")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    backend = FeatureBackendConfig(
        backend="toy",
        grid_size=meta["backend"]["grid_size"],
        stage_dims=tuple(meta["backend"]["stage_dims"]),
        final_dim=meta["backend"]["final_dim"],
        seed=meta["backend"]["seed"],
    )
    if cfg["checkpoint"]:
        params = load_decoder(artifact)
        text = ensemble_text_features(
            meta["text"]["object_name"], meta["text"]["dim"], seed=meta["text"]["seed"]
        )

        def score_map(image):
            return localize(toy_extract(image, backend), text, params)

    else:
        bank = load_bank(artifact)

        def score_map(image):
            return localize_fewshot(toy_extract(image, backend), bank)

    normals = _load_normals(images_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for stem, image in normals:
        amap = score_map(image)
        (out / f"{stem}_map.f32").write_bytes(np.ascontiguousarray(amap, dtype="<f4").tobytes())
        imgio.save_heatmap(amap, out / f"{stem}_heat.png")
        verdict = render_verdict(amap, cfg["threshold"])
        rows.append(
            {
                "image_id": stem,
                "score": verdict.image_score,
                "is_anomalous": verdict.is_anomalous,
                "cells": list(verdict.grid_cells),
                "text": verdict.response_text,
            }
        )
    with (out / "verdicts.jsonl").open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"scored {len(rows)} images into {out}")
    return 0


def _flatten_keys(tree: dict, prefix: str = "") -> list[str]:
    keys = []
    for key, value in tree.items():
        if isinstance(value, dict):
            keys.extend(_flatten_keys(value, prefix + key + "."))
        else:
            keys.append(prefix + key)
    return keys


def cmd_eval(args) -> int:
    config: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            config = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if args.mode is not None:
        config["mode"] = args.mode
    if args.seed is not None:
        config["seed"] = args.seed
    if args.k is not None:
        config["k"] = args.k
    if args.epochs is not None:
        config.setdefault("train", {})["epochs"] = args.epochs
    if args.mvtec_root is not None:
        config.setdefault("dataset", {})
        config["dataset"]["type"] = "mvtec"
        config["dataset"]["root"] = args.mvtec_root
    try:
        report = run_experiment(config, out_dir=args.out)
    except ExperimentConfigError as exc:
        raise UsageError(str(exc)) from exc
    pooled = report.pooled
    print(f"mode={report.mode} threshold={report.threshold:.6f}")
    for key in ("image_auc", "pixel_auc", "accuracy"):
        value = pooled.get(key)
        print(f"pooled {key}: {value if value is None else f'{value:.4f}'}")
    return 0


SWEEP_DEFAULTS = {
    "scores_json": _REQUIRED,
    "grid_points": 201,
}


def cmd_sweep(cfg: dict, out: Path) -> int:
    scores_path = Path(cfg["scores_json"])
    if not scores_path.is_file():
        raise PrerequisiteError(f"missing scores file {scores_path}; run `infer` or `eval` first")
    data = json.loads(scores_path.read_text(encoding="utf-8"))
    per_category = {
        name: (entry["normal"], entry["anomalous"]) for name, entry in data.items()
    }
    pooled = [s for normal, anomalous in per_category.values() for s in (*normal, *anomalous)]
    grid = default_sweep_grid(pooled, n=cfg["grid_points"])
    result = threshold_sweep(per_category, grid)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(result, out / "sweep.csv")
    for name, (t, acc) in sorted(result.per_category_optima.items()):
        print(f"{name}: best accuracy {acc:.4f} at threshold {t:.6f}")
    t, acc = result.unified_optimum
    print(f"unified: best accuracy {acc:.4f} at threshold {t:.6f} (gap {result.gap:.4f})")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def _add_config_flags(parser: argparse.ArgumentParser, defaults: dict) -> None:
    parser.add_argument("--config", help="JSON config file")
    for key, value in defaults.items():
        if value is _REQUIRED:
            parser.add_argument(f"--{key}", help="(required unless in config)")
        elif isinstance(value, bool):
            parser.add_argument(f"--{key}", type=lambda s: s.lower() == "true")
        elif isinstance(value, int):
            parser.add_argument(f"--{key}", type=int, help=f"default {value}")
        elif isinstance(value, float):
            parser.add_argument(f"--{key}", type=float, help=f"default {value}")
        else:
            parser.add_argument(f"--{key}", help=f"default {value!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="anomkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="synthesize anomalous samples plus QA records")
    _add_config_flags(p_sim, SIMULATE_DEFAULTS)
    p_sim.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="train the localization decoder")
    _add_config_flags(p_train, TRAIN_DEFAULTS)
    p_train.add_argument("--out", required=True)

    p_bank = sub.add_parser("bank", help="build a few-shot memory bank")
    _add_config_flags(p_bank, BANK_DEFAULTS)
    p_bank.add_argument("--out", required=True)

    p_infer = sub.add_parser("infer", help="score images with a checkpoint or bank")
    _add_config_flags(p_infer, INFER_DEFAULTS)
    p_infer.add_argument("--out", required=True)

    p_eval = sub.add_parser(
        "eval",
        help="run a full experiment and emit report files",
        epilog="accepted config keys: " + ", ".join(_flatten_keys(DEFAULT_EXPERIMENT_CONFIG)),
    )
    p_eval.add_argument("--config", help="experiment config JSON")
    p_eval.add_argument("--mode", choices=("unsupervised-decoder", "fewshot"))
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--k", type=int)
    p_eval.add_argument("--epochs", type=int)
    p_eval.add_argument("--mvtec_root")
    p_eval.add_argument("--out", required=True)

    p_sweep = sub.add_parser("sweep", help="threshold-sensitivity sweep over score files")
    _add_config_flags(p_sweep, SWEEP_DEFAULTS)
    p_sweep.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "eval":
            return cmd_eval(args)
        defaults = {
            "simulate": SIMULATE_DEFAULTS,
            "train": TRAIN_DEFAULTS,
            "bank": BANK_DEFAULTS,
            "infer": INFER_DEFAULTS,
            "sweep": SWEEP_DEFAULTS,
        }[args.command]
        cfg = _load_config(args, defaults)
        handler = {
            "simulate": cmd_simulate,
            "train": cmd_train,
            "bank": cmd_bank,
            "infer": cmd_infer,
            "sweep": cmd_sweep,
        }[args.command]
        return handler(cfg, Path(args.out))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
