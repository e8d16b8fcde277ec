"""Command-line entry point: convert, train, infer, evaluate, cross-eval,
ablate, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every output-producing command takes --out-dir, holds a lockfile there for
its duration, and records a run manifest with the config hash and seed.
Wall-clock measurements go to *_timing sidecars so the primary artifacts
are byte-stable across reruns with the same seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import __version__
from .config import (
    RunConfig,
    build_encoders,
    inference_config,
    load_config,
    run_config_hash,
    train_config,
)
from .converters import CONVERTERS
from .data import ingest
from .errors import ConfigError, CrowdRankError, ParseError
from .evaluation import (
    report_from_predictions,
    run_ablation,
    run_cross_eval,
    run_eval,
    write_ablation_outputs,
    write_eval_outputs,
)
from .geometry import ImageRef
from .inference import predict, prediction_record, timing_record
from .plots import render_reports
from .training import build_training_pyramids, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("crowdrank")

IMAGE_EXTS = (".jpg", ".jpeg", ".png")


def _add_common(sub: argparse.ArgumentParser, out_dir: bool = True) -> None:
    sub.add_argument("-c", "--config", help="YAML run configuration")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="dotted config override, repeatable")
    sub.add_argument("--seed", type=int, help="override the config seed")
    if out_dir:
        sub.add_argument("--out-dir", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdrank")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("convert", help="convert an upstream dataset layout to a manifest")
    p.add_argument("root", help="dataset root directory")
    p.add_argument("--format", required=True, choices=sorted(CONVERTERS))
    p.add_argument("--out", required=True, help="manifest path to write")
    p.set_defaults(func=cmd_convert, needs_lock=False)

    p = commands.add_parser("train", help="fine-tune the image encoder")
    _add_common(p)
    p.set_defaults(func=cmd_train, needs_lock=True)

    p = commands.add_parser("infer", help="predict counts for an image or directory")
    _add_common(p)
    p.add_argument("images", help="image file or directory")
    p.add_argument("--checkpoint", help="checkpoint produced by train")
    p.add_argument("--p", type=int, help="override the grid dimension")
    p.set_defaults(func=cmd_infer, needs_lock=True)

    p = commands.add_parser("evaluate", help="evaluate on the configured test manifest")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint produced by train")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--predictions",
                   help="score an existing predictions.jsonl instead of running inference")
    p.set_defaults(func=cmd_evaluate, needs_lock=True)

    p = commands.add_parser("cross-eval", help="evaluate a checkpoint on another dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-manifest", help="defaults to data.test_manifest")
    p.set_defaults(func=cmd_cross_eval, needs_lock=True)

    p = commands.add_parser("ablate", help="run one ablation sweep")
    _add_common(p)
    p.add_argument("--kind", required=True,
                   choices=("prompts", "patch_number", "freeze", "data_size"))
    p.add_argument("--values", nargs="*", default=None,
                   help="settings: ints for patch_number, r0:k[:A] for prompts, "
                        "fractions for data_size")
    p.add_argument("--extra-manifest", help="extra training data for data_size")
    p.set_defaults(func=cmd_ablate, needs_lock=True)

    p = commands.add_parser("plot", help="charts and overlays from report files")
    p.add_argument("reports", nargs="+", help="report json files")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--k-worst", type=int, default=5)
    p.set_defaults(func=cmd_plot, needs_lock=False)
    return parser


def _resolve_config(args) -> RunConfig:
    overrides = list(getattr(args, "overrides", []))
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(getattr(args, "config", None), overrides)


def _out_dir(args) -> Path:
    out = Path(args.out_dir or Path("runs") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(out: Path, args, cfg: RunConfig | None) -> None:
    payload = {
        "command": args.command,
        "version": __version__,
        "seed": cfg.seed if cfg else None,
        "config_hash": run_config_hash(cfg) if cfg else None,
    }
    (out / "run_manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _ingest_required(path_value, what: str):
    if not path_value:
        raise ConfigError(f"{what} manifest not configured (set data.{what}_manifest)")
    return ingest(path_value)


def cmd_convert(args) -> int:
    converter = CONVERTERS[args.format]
    n = converter(args.root, args.out)
    logger.info("wrote %d records to %s", n, args.out)
    print(f"converted {n} images -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    manifest = _ingest_required(cfg.data.train_manifest, "train")
    name = cfg.data.dataset_name or manifest.name
    tcfg = train_config(cfg)
    pyramids = build_training_pyramids(
        manifest.train_refs(), m=tcfg.m, min_ratio=tcfg.min_ratio,
        target_side=tcfg.patch_side, resize_max_long=manifest.resize_max_long)
    _, enc_f, text = build_encoders(cfg)
    ckpt = train(pyramids, enc_f, text, tcfg, dataset_name=name,
                 log_path=out / "train_log.jsonl")
    save_checkpoint(out / "checkpoint.bin", ckpt)
    (out / "checkpoint_manifest.json").write_text(
        json.dumps(ckpt.manifest, sort_keys=True, indent=2) + "\n")
    _write_run_manifest(out, args, cfg)
    final = ckpt.manifest["loss_history"][-1]["mean_loss"]
    print(f"trained {tcfg.epochs} epochs on {len(pyramids)} pyramids; "
          f"final mean loss {final:.6f}; checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _encoders_for_inference(cfg: RunConfig, checkpoint_path):
    enc_o, enc_f, text = build_encoders(cfg)
    ckpt = None
    if checkpoint_path:
        ckpt = load_checkpoint(checkpoint_path)
        enc_f.load_state_arrays(ckpt.state)
    return enc_o, enc_f, text, ckpt


def _list_images(target: Path) -> list[Path]:
    if target.is_dir():
        return sorted(p for p in target.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    return [target]


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    target = Path(args.images)
    if not target.exists():
        raise ConfigError(f"image path not found: {target}")
    enc_o, enc_f, text, _ = _encoders_for_inference(cfg, args.checkpoint)
    icfg = inference_config(cfg, p=args.p)
    failures = 0
    with open(out / "predictions.jsonl", "w") as pred_fh, \
            open(out / "timings.jsonl", "w") as time_fh:
        for path in _list_images(target):
            try:
                ref = ImageRef.from_path(path)
                pred = predict(ref, enc_o, enc_f, text, icfg)
            except Exception as exc:
                failures += 1
                logger.error("failed on %s: %s", path, exc)
                continue
            pred_fh.write(json.dumps(prediction_record(pred), sort_keys=True) + "\n")
            time_fh.write(json.dumps(timing_record(pred), sort_keys=True) + "\n")
    _write_run_manifest(out, args, cfg)
    print(f"predictions written to {out / 'predictions.jsonl'}"
          + (f" ({failures} image(s) failed)" if failures else ""))
    return 1 if failures else 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    manifest = _ingest_required(cfg.data.test_manifest, "test")
    if args.predictions:
        report = report_from_predictions(args.predictions, manifest, split=args.split)
    else:
        enc_o, enc_f, text, _ = _encoders_for_inference(cfg, args.checkpoint)
        icfg = inference_config(cfg, manifest=manifest)
        report = run_eval(manifest, enc_o, enc_f, text, icfg, split=args.split)
    write_eval_outputs(report, out)
    _write_run_manifest(out, args, cfg)
    print(f"{report.label}: MAE {report.mae:.3f} MSE {report.mse:.3f} "
          f"over {report.n_images} images")
    return 0


def cmd_cross_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    manifest = ingest(args.test_manifest) if args.test_manifest else \
        _ingest_required(cfg.data.test_manifest, "test")
    enc_o, enc_f, text, ckpt = _encoders_for_inference(cfg, args.checkpoint)
    icfg = inference_config(cfg, manifest=manifest)
    report = run_cross_eval(manifest, ckpt, enc_o, enc_f, text, icfg)
    write_eval_outputs(report, out, stem="cross_report")
    _write_run_manifest(out, args, cfg)
    print(f"{report.label}: MAE {report.mae:.3f} MSE {report.mse:.3f}")
    return 0


def _parse_ablation_values(kind: str, values):
    if not values:
        return None
    if kind == "patch_number":
        return [int(v) for v in values]
    if kind == "data_size":
        return [{"fraction": float(v)} for v in values]
    if kind == "prompts":
        settings = []
        for token in values:
            parts = token.split(":")
            if len(parts) not in (2, 3):
                raise ConfigError(f"prompt setting {token!r} is not r0:k or r0:k:A")
            settings.append({"r0": int(parts[0]), "k": int(parts[1]),
                             "alphabetic_mode": len(parts) == 3 and parts[2].upper() == "A"})
        return settings
    if kind == "freeze":
        if values:
            raise ConfigError("the freeze sweep is fixed to its four combinations")
        return None
    return None


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    train_manifest = _ingest_required(cfg.data.train_manifest, "train")
    test_manifest = _ingest_required(cfg.data.test_manifest, "test")
    extra = ingest(args.extra_manifest) if args.extra_manifest else (
        ingest(cfg.data.extra_manifest) if cfg.data.extra_manifest else None)
    settings = _parse_ablation_values(args.kind, args.values)

    def infer_factory(ranking_ps, p):
        return inference_config(cfg, manifest=test_manifest, ranking_prompts=ranking_ps, p=p)

    rows = run_ablation(
        args.kind, settings,
        train_manifest=train_manifest, test_manifest=test_manifest,
        make_encoders=lambda: build_encoders(cfg),
        base_train_cfg=train_config(cfg),
        infer_factory=infer_factory,
        seed=cfg.seed, extra_manifest=extra)
    paths = write_ablation_outputs(args.kind, rows, out)
    _write_run_manifest(out, args, cfg)
    for row in rows:
        print(f"{row['label']}: MAE {row['mae']:.3f} MSE {row['mse']:.3f}")
    print(f"table written to {paths['csv']}")
    return 0


def cmd_plot(args) -> int:
    out = _out_dir(args)
    written = render_reports(args.reports, out, k_worst=args.k_worst)
    for path in written:
        print(path)
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    lock = None
    try:
        if getattr(args, "needs_lock", False):
            out = _out_dir(args)
            lock = FileLock(out / ".crowdrank.lock")
            try:
                lock.acquire(timeout=0)
            except Timeout:
                logger.error("another command is already running in %s", out)
                return 1
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        logger.error("%s", exc)
        return 2
    except CrowdRankError as exc:
        logger.error("%s", exc)
        return 1
    except Exception:  # pragma: no cover - defensive
        logger.exception("unexpected failure")
        return 1
    finally:
        if lock is not None and lock.is_locked:
            lock.release()


if __name__ == "__main__":
    sys.exit(main())
