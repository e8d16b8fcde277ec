"""Run configuration: a nested YAML file mapped onto dataclasses, with
strict key checking, dotted-path overrides, and builders that wire the
library objects together. Built-in defaults encode the standard recipe
(m = n = 6 count prompts starting at 20 with step 35, learning rate 1e-4,
100 epochs, 4x4 grid for the densest datasets and 3x3 otherwise, long side
kept under 2048).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DatasetManifest
from .encoders import EMBED_DIM, make_mock_count_encoder, make_tiny_encoders
from .errors import ConfigError
from .geometry import DEFAULT_PATCH_SIDE, GridSpec
from .inference import InferenceConfig
from .prompts import (
    DEFAULT_COARSE_CLASSES,
    DEFAULT_FINE_CLASSES,
    RANKING_TEMPLATE,
    PromptSet,
    RankingPromptSpec,
    build_filter_prompts,
    build_ranking_prompts,
)
from .training import TrainConfig, config_hash


@dataclass
class DataSection:
    train_manifest: str | None = None
    test_manifest: str | None = None
    extra_manifest: str | None = None
    dataset_name: str | None = None


@dataclass
class EncoderSection:
    backend: str = "mock"  # mock | tiny | clip
    dim: int = EMBED_DIM
    clip_model: str = "openai/clip-vit-base-patch16"


@dataclass
class PromptSection:
    coarse_classes: list = field(default_factory=lambda: list(DEFAULT_COARSE_CLASSES))
    coarse_target: str = "crowd"
    fine_classes: list = field(default_factory=lambda: list(DEFAULT_FINE_CLASSES))
    fine_target: str = "human heads"
    r0: int = 20
    k: int = 35
    template: str = RANKING_TEMPLATE
    alphabetic_mode: bool = False


@dataclass
class TrainingSection:
    m: int = 6
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_pyramids: int = 8
    min_ratio: float = 0.5
    freeze_text: bool = True
    freeze_image: bool = False
    pair_mode: str = "all_pairs"


@dataclass
class InferenceSection:
    p: int | None = None  # None: use the dataset policy
    patch_side: int = DEFAULT_PATCH_SIDE
    use_finetuned_for_ranking: bool = True
    use_coarse: bool = True
    use_fine: bool = True
    keep_threshold: float | None = None
    resize_max_long: int | str | None = "auto"  # "auto": dataset policy


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    prompts: PromptSection = field(default_factory=PromptSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    seed: int = 0


def _build_section(cls, payload: dict, path: str):
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} under {path!r}")
    kwargs = {}
    for key, value in payload.items():
        spec = allowed[key]
        if spec.type in ("int", int) and isinstance(value, str):
            value = int(value)
        elif spec.type in ("float", float) and isinstance(value, str):
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under {path!r}: {exc}") from exc


def config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a mapping")
    section_types = {
        "data": DataSection,
        "encoder": EncoderSection,
        "prompts": PromptSection,
        "training": TrainingSection,
        "inference": InferenceSection,
    }
    unknown = set(payload) - set(section_types) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {
        name: _build_section(cls, payload.get(name, {}) or {}, name)
        for name, cls in section_types.items()
    }
    seed = payload.get("seed", 0)
    if isinstance(seed, str):
        seed = int(seed)
    return RunConfig(seed=seed, **kwargs)


def apply_overrides(payload: dict, overrides) -> dict:
    """Apply "a.b=value" strings on top of the raw config mapping; values are
    parsed as YAML so numbers and booleans come through typed."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = payload
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a non-mapping")
        node[keys[-1]] = yaml.safe_load(raw)
    return payload


def load_config(path=None, overrides=None) -> RunConfig:
    payload: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}") from exc
    payload = apply_overrides(payload, overrides)
    return config_from_dict(payload)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def run_config_hash(cfg: RunConfig) -> str:
    return config_hash(json.loads(json.dumps(config_to_dict(cfg))))


def ranking_spec(cfg: RunConfig) -> RankingPromptSpec:
    return RankingPromptSpec(
        r0=cfg.prompts.r0, k=cfg.prompts.k, n=cfg.training.m,
        template=cfg.prompts.template, alphabetic_mode=cfg.prompts.alphabetic_mode)


def filter_prompt_sets(cfg: RunConfig) -> tuple[PromptSet, PromptSet]:
    coarse = build_filter_prompts("coarse", cfg.prompts.coarse_classes, cfg.prompts.coarse_target)
    fine = build_filter_prompts("fine", cfg.prompts.fine_classes, cfg.prompts.fine_target)
    return coarse, fine


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        m=t.m, ranking=ranking_spec(cfg), epochs=t.epochs, learning_rate=t.learning_rate,
        batch_pyramids=t.batch_pyramids, freeze_text=t.freeze_text, freeze_image=t.freeze_image,
        seed=cfg.seed, pair_mode=t.pair_mode, min_ratio=t.min_ratio,
        patch_side=cfg.inference.patch_side)


def inference_config(cfg: RunConfig, manifest: DatasetManifest | None = None,
                     ranking_prompts: PromptSet | None = None,
                     p: int | None = None) -> InferenceConfig:
    """Resolve the grid size and resize cap: explicit argument, then config,
    then the dataset policy."""
    coarse, fine = filter_prompt_sets(cfg)
    ranking = ranking_prompts or build_ranking_prompts(ranking_spec(cfg))
    grid_p = p or cfg.inference.p or (manifest.default_p if manifest else 3)
    resize = cfg.inference.resize_max_long
    if resize == "auto":
        resize = manifest.resize_max_long if manifest else None
    return InferenceConfig(
        grid=GridSpec(int(grid_p)),
        coarse_prompts=coarse,
        fine_prompts=fine,
        ranking_prompts=ranking,
        use_finetuned_for_ranking=cfg.inference.use_finetuned_for_ranking,
        use_coarse=cfg.inference.use_coarse,
        use_fine=cfg.inference.use_fine,
        keep_threshold=cfg.inference.keep_threshold,
        patch_side=cfg.inference.patch_side,
        resize_max_long=resize,
    )


def build_encoders(cfg: RunConfig):
    """Return (original image, finetunable image, text) handles.

    The original and finetunable handles are independent so their call
    counters and, for torch backends, parameters stay separate.
    """
    backend = cfg.encoder.backend
    if backend == "mock":
        enc_o, text = make_mock_count_encoder(seed=cfg.seed)
        enc_f, _ = make_mock_count_encoder(seed=cfg.seed)
        return enc_o, enc_f, text
    if backend == "tiny":
        enc_o, text = make_tiny_encoders(dim=cfg.encoder.dim, seed=cfg.seed)
        enc_f, _ = make_tiny_encoders(dim=cfg.encoder.dim, seed=cfg.seed)
        enc_o.trainable = False
        text.trainable = True
        return enc_o, enc_f, text
    if backend == "clip":
        from .encoders import load_clip_encoders

        enc_o, text = load_clip_encoders(cfg.encoder.clip_model, trainable_image=False)
        enc_f, _ = load_clip_encoders(cfg.encoder.clip_model, trainable_image=True)
        return enc_o, enc_f, text
    raise ConfigError(f"unknown encoder backend {backend!r}")
