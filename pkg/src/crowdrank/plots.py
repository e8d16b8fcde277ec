"""Static charts and per-image count overlays for report files."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
from PIL import Image, ImageDraw

from .errors import ParseError


def _load_report(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"unreadable report {path}: {exc}") from exc


def plot_ablation_series(report: dict, out_dir: Path, stem: str) -> list[Path]:
    """One chart per metric over the swept variable."""
    if "rows" in report:
        xs = [row["label"] for row in report["rows"]]
        series = {"mae": [r["mae"] for r in report["rows"]],
                  "mse": [r["mse"] for r in report["rows"]]}
    else:
        xs = report["x"]
        series = {"mae": report["mae"], "mse": report["mse"]}
    numeric = all(isinstance(x, (int, float)) for x in xs)
    written = []
    for metric, values in series.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if numeric:
            order = sorted(range(len(xs)), key=lambda i: xs[i])
            ax.plot([xs[i] for i in order], [values[i] for i in order], marker="o")
        else:
            ax.bar(range(len(xs)), values)
            ax.set_xticks(range(len(xs)))
            ax.set_xticklabels([str(x) for x in xs], rotation=30, ha="right", fontsize=7)
        ax.set_xlabel(report.get("kind", "setting"))
        ax.set_ylabel(metric.upper())
        ax.set_title(f"{metric.upper()} vs {report.get('kind', 'setting')}")
        fig.tight_layout()
        out = out_dir / f"{stem}_{metric}.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    return written


def plot_count_overlays(report: dict, out_dir: Path, stem: str, k_worst: int = 5) -> list[Path]:
    """Render predicted vs true totals onto the k worst images."""
    records = sorted(report.get("per_image", []), key=lambda r: -r["abs_err"])[:k_worst]
    written = []
    for rank, rec in enumerate(records):
        src = Path(rec["id"])
        if not src.is_file():
            continue
        with Image.open(src) as im:
            im = im.convert("RGB")
            draw = ImageDraw.Draw(im)
            text = f"pred {rec['pred']:.0f} / gt {rec['gt']:.0f}"
            pad = 4
            box = draw.textbbox((pad, pad), text)
            draw.rectangle((0, 0, box[2] + pad, box[3] + pad), fill=(0, 0, 0))
            draw.text((pad, pad), text, fill=(255, 255, 0))
            out = out_dir / f"{stem}_worst{rank}_{src.stem}.png"
            im.save(out)
        written.append(out)
    return written


def render_reports(paths, out_dir, k_worst: int = 5) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in paths:
        report = _load_report(path)
        stem = Path(path).stem
        if "rows" in report or "x" in report:
            written += plot_ablation_series(report, out_dir, stem)
        elif "per_image" in report:
            written += plot_count_overlays(report, out_dir, stem, k_worst=k_worst)
        else:
            raise ParseError(f"{path}: not an evaluation or ablation report")
    return written
