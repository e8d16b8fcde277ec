"""Counting metrics and the experiment runners: single-dataset evaluation,
cross-dataset transfer, and the ablation sweeps.

MAE is the mean absolute count error; MSE here is the root of the mean
squared error, as is conventional for counting benchmarks. Sums use fsum so
results do not depend on image order.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest
from .encoders import EncoderHandle
from .errors import EmptyInput, LengthMismatch
from .inference import CountPrediction, InferenceConfig, predict
from .prompts import RankingPromptSpec, build_ranking_prompts
from .training import Checkpoint, TrainConfig, build_training_pyramids, train

logger = logging.getLogger(__name__)

ABLATION_KINDS = ("prompts", "patch_number", "freeze", "data_size")


@dataclass
class EvalReport:
    label: str
    n_images: int
    mae: float
    mse: float
    per_image: list[dict] = field(default_factory=list)
    throughput_fps: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self, include_throughput: bool = False) -> dict:
        out = {
            "label": self.label,
            "n_images": self.n_images,
            "mae": self.mae,
            "mse": self.mse,
            "per_image": self.per_image,
            "warnings": self.warnings,
        }
        if include_throughput:
            out["throughput_fps"] = self.throughput_fps
        return out


def compute_metrics(preds, gts, ids=None, label: str = "") -> EvalReport:
    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise EmptyInput("cannot compute metrics over zero images")
    ids = list(ids) if ids is not None else list(range(len(preds)))
    errors = [abs(float(e) - float(c)) for e, c in zip(preds, gts)]
    mae = math.fsum(errors) / len(errors)
    mse = math.sqrt(math.fsum(err * err for err in errors) / len(errors))
    per_image = [
        {"id": str(i), "pred": float(e), "gt": float(c), "abs_err": err}
        for i, e, c, err in zip(ids, preds, gts, errors)
    ]
    return EvalReport(label=label, n_images=len(preds), mae=mae, mse=mse, per_image=per_image)


def _throughput(seconds: list[float]) -> dict:
    fps = [1.0 / s for s in seconds if s > 0]
    if not fps:
        return {}
    return {"min": min(fps), "max": max(fps), "mean": sum(fps) / len(fps)}


def run_eval(manifest: DatasetManifest, enc_original: EncoderHandle,
             enc_finetuned: EncoderHandle, text_enc: EncoderHandle,
             cfg: InferenceConfig, label: str | None = None,
             split: str = "test",
             collect_predictions: list[CountPrediction] | None = None) -> EvalReport:
    """Predict every image in the split and reduce to MAE/MSE plus a
    throughput range (speed varies with how many tiles survive filtering)."""
    images = manifest.split(split)
    if not images:
        raise EmptyInput(f"manifest {manifest.name!r} has no images in split {split!r}")
    preds, gts, ids, seconds = [], [], [], []
    for annotated in images:
        started = time.perf_counter()
        prediction = predict(annotated.image, enc_original, enc_finetuned, text_enc, cfg)
        seconds.append(time.perf_counter() - started)
        preds.append(prediction.total)
        gts.append(annotated.count)
        ids.append(annotated.image.path)
        if collect_predictions is not None:
            collect_predictions.append(prediction)
    report = compute_metrics(preds, gts, ids=ids, label=label or manifest.name)
    report.throughput_fps = _throughput(seconds)
    return report


def report_from_predictions(predictions_path, manifest: DatasetManifest,
                            label: str | None = None, split: str = "test") -> EvalReport:
    """Score an existing line-delimited predictions file against a manifest.

    Records are joined on the image path, falling back to the basename when
    the stored paths differ (absolute vs manifest-relative)."""
    from pathlib import Path as _Path

    totals: dict[str, float] = {}
    by_name: dict[str, float] = {}
    ambiguous: set[str] = set()
    with open(predictions_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            totals[record["image"]] = float(record["total"])
            name = _Path(record["image"]).name
            if name in by_name:
                ambiguous.add(name)
            by_name[name] = float(record["total"])
    images = manifest.split(split)
    if not images:
        raise EmptyInput(f"manifest {manifest.name!r} has no images in split {split!r}")
    preds, gts, ids = [], [], []
    for annotated in images:
        path = annotated.image.path
        name = _Path(path).name
        if path in totals:
            value = totals[path]
        elif name in by_name and name not in ambiguous:
            value = by_name[name]
        else:
            raise LengthMismatch(f"no prediction found for {path}")
        preds.append(value)
        gts.append(annotated.count)
        ids.append(path)
    return compute_metrics(preds, gts, ids=ids, label=label or manifest.name)


def run_cross_eval(test_manifest: DatasetManifest, checkpoint: Checkpoint,
                   enc_original: EncoderHandle, enc_finetuned: EncoderHandle,
                   text_enc: EncoderHandle, cfg: InferenceConfig) -> EvalReport:
    """Evaluate a checkpoint trained elsewhere under the test dataset's own
    grid and resize policy. Same-dataset pairs get a warning, not an error."""
    trained_on = checkpoint.manifest.get("dataset") or "unknown"
    label = f"{trained_on}->{test_manifest.name}"
    report = run_eval(test_manifest, enc_original, enc_finetuned, text_enc, cfg, label=label)
    if trained_on == test_manifest.name:
        message = (f"cross-eval with identical train/test dataset {trained_on!r}; "
                   "this is a plain evaluation, not a transfer result")
        logger.warning(message)
        report.warnings.append(message)
    return report


def subsample_refs(refs, fraction: float, seed: int):
    """Deterministic subset of the training refs: stable order, seeded pick."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    refs = sorted(refs, key=lambda r: r.path)
    n = max(1, round(len(refs) * fraction))
    if n >= len(refs):
        return refs
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(refs), size=n, replace=False)
    return [refs[i] for i in sorted(picked)]


def default_settings(kind: str) -> list:
    if kind == "prompts":
        return [
            {"r0": 20, "k": 30},
            {"r0": 20, "k": 35},
            {"r0": 20, "k": 40},
            {"r0": 20, "k": 35, "alphabetic_mode": True},
            {"r0": 10, "k": 35},
            {"r0": 30, "k": 35},
        ]
    if kind == "patch_number":
        return [3, 4, 5]
    if kind == "freeze":
        return [
            {"freeze_text": True, "freeze_image": True},
            {"freeze_text": True, "freeze_image": False},
            {"freeze_text": False, "freeze_image": True},
            {"freeze_text": False, "freeze_image": False},
        ]
    if kind == "data_size":
        return [{"fraction": 0.25}, {"fraction": 0.5}, {"fraction": 0.75}, {"fraction": 1.0}]
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")


def run_ablation(kind: str, settings=None, *, train_manifest: DatasetManifest,
                 test_manifest: DatasetManifest, make_encoders,
                 base_train_cfg: TrainConfig, infer_factory,
                 seed: int = 0, extra_manifest: DatasetManifest | None = None) -> list[dict]:
    """One evaluation row per setting.

    ``make_encoders()`` must return a fresh (original, finetunable, text)
    triple per row so rows do not share trained state. ``infer_factory``
    maps (ranking_prompt_set, grid_p) to an InferenceConfig for the test
    dataset.
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")
    settings = list(settings) if settings is not None else default_settings(kind)
    if kind == "data_size" and extra_manifest is not None:
        settings = settings + [{"fraction": 1.0, "extra": True}]

    def train_row(cfg: TrainConfig, refs) -> tuple[EncoderHandle, EncoderHandle, EncoderHandle]:
        enc_o, enc_f, text = make_encoders()
        pyramids = build_training_pyramids(
            refs, m=cfg.m, min_ratio=cfg.min_ratio, target_side=cfg.patch_side,
            resize_max_long=train_manifest.resize_max_long)
        train(pyramids, enc_f, text, cfg, dataset_name=train_manifest.name)
        return enc_o, enc_f, text

    all_refs = train_manifest.train_refs()
    rows = []
    if kind == "patch_number":
        enc_o, enc_f, text = train_row(base_train_cfg, all_refs)
        ranking_ps = build_ranking_prompts(base_train_cfg.ranking)
        for p in settings:
            report = run_eval(test_manifest, enc_o, enc_f, text,
                              infer_factory(ranking_ps, int(p)),
                              label=f"P={int(p)}")
            rows.append(_row(kind, {"p": int(p)}, report))
        return rows

    for setting in settings:
        if kind == "prompts":
            spec = RankingPromptSpec(
                r0=int(setting["r0"]), k=int(setting["k"]), n=base_train_cfg.m,
                alphabetic_mode=bool(setting.get("alphabetic_mode", False)))
            cfg = replace(base_train_cfg, ranking=spec)
            enc_o, enc_f, text = train_row(cfg, all_refs)
            ranking_ps = build_ranking_prompts(spec)
            label = f"r0={spec.r0},k={spec.k}" + (",A" if spec.alphabetic_mode else "")
        elif kind == "freeze":
            cfg = replace(base_train_cfg,
                          freeze_text=bool(setting["freeze_text"]),
                          freeze_image=bool(setting["freeze_image"]))
            enc_o, enc_f, text = train_row(cfg, all_refs)
            ranking_ps = build_ranking_prompts(cfg.ranking)
            label = (f"text={'fixed' if cfg.freeze_text else 'tuned'},"
                     f"image={'fixed' if cfg.freeze_image else 'tuned'}")
        elif kind == "data_size":
            fraction = float(setting["fraction"])
            refs = subsample_refs(all_refs, fraction, seed)
            label = f"fraction={fraction}"
            if setting.get("extra"):
                if extra_manifest is None:
                    raise ValueError("data_size setting requests extra data but none was given")
                refs = refs + extra_manifest.train_refs()
                label += f"+{extra_manifest.name}"
            enc_o, enc_f, text = train_row(base_train_cfg, refs)
            ranking_ps = build_ranking_prompts(base_train_cfg.ranking)
            setting = {**setting, "n_train_images": len(refs)}
        report = run_eval(test_manifest, enc_o, enc_f, text,
                          infer_factory(ranking_ps, None), label=label)
        rows.append(_row(kind, dict(setting), report))
    return rows


def _row(kind: str, setting: dict, report: EvalReport) -> dict:
    return {
        "kind": kind,
        "setting": setting,
        "label": report.label,
        "mae": report.mae,
        "mse": report.mse,
        "n_images": report.n_images,
    }


def write_eval_outputs(report: EvalReport, out_dir, stem: str = "report") -> dict[str, Path]:
    """Write the deterministic report (json + csv) and a volatile timing
    sidecar; wall-clock numbers never enter the primary artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}.csv",
        "timing": out_dir / f"{stem}_timing.json",
    }
    paths["json"].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "pred", "gt", "abs_err"])
        for rec in report.per_image:
            writer.writerow([rec["id"], rec["pred"], rec["gt"], rec["abs_err"]])
    paths["timing"].write_text(
        json.dumps({"label": report.label, "throughput_fps": report.throughput_fps},
                   sort_keys=True, indent=2) + "\n")
    return paths


def write_ablation_outputs(kind: str, rows: list[dict], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"ablation_{kind}"
    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}.csv",
        "series": out_dir / f"{stem}_series.json",
    }
    paths["json"].write_text(json.dumps({"kind": kind, "rows": rows},
                                        sort_keys=True, indent=2) + "\n")
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "mae", "mse", "n_images"])
        for row in rows:
            writer.writerow([row["label"], row["mae"], row["mse"], row["n_images"]])
    series = {
        "kind": kind,
        "x": [_series_x(kind, row) for row in rows],
        "mae": [row["mae"] for row in rows],
        "mse": [row["mse"] for row in rows],
    }
    paths["series"].write_text(json.dumps(series, sort_keys=True, indent=2) + "\n")
    return paths


def _series_x(kind: str, row: dict):
    if kind == "patch_number":
        return row["setting"]["p"]
    if kind == "data_size":
        return row["setting"].get("n_train_images", row["setting"]["fraction"])
    return row["label"]
