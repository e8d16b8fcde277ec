"""Three-stage counting pipeline: coarse scene filter, body-part filter,
then count-interval matching on the surviving tiles.

The first two stages run with the original (non-fine-tuned) image encoder;
only the final count mapping uses the fine-tuned one. Tiles rejected at any
stage contribute a count of zero and are never encoded again, so the work
per image shrinks with the number of rejected tiles.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .encoders import EmbeddingMatrix, EncoderHandle, encode_images
from .errors import DimMismatch
from .geometry import (
    DEFAULT_PATCH_SIDE,
    GridSpec,
    ImageRef,
    Rect,
    extract_and_resize,
    load_pixels,
    resize_long_side,
    tile_grid,
)
from .prompts import PromptSet, embed_prompt_set


@dataclass(frozen=True)
class StageDecision:
    stage: str
    scores: tuple[float, ...]
    chosen_index: int
    kept: bool | None = None


@dataclass
class TileResult:
    crop: Rect
    decisions: list[StageDecision]
    patch_count: int


@dataclass
class CountPrediction:
    image: ImageRef
    grid_p: int
    tiles: list[TileResult]
    total: int
    timing: dict[str, float]


@dataclass
class InferenceConfig:
    grid: GridSpec
    coarse_prompts: PromptSet
    fine_prompts: PromptSet
    ranking_prompts: PromptSet
    use_finetuned_for_ranking: bool = True
    use_coarse: bool = True
    use_fine: bool = True
    keep_threshold: float | None = None
    patch_side: int = DEFAULT_PATCH_SIDE
    resize_max_long: int | None = None

    def __post_init__(self) -> None:
        if self.ranking_prompts.counts is None:
            raise ValueError("ranking prompt set must carry its counts")


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum()


def stage_filter(patch_embedding: np.ndarray, prompts: PromptSet,
                 txt_matrix: EmbeddingMatrix, keep_threshold: float | None = None) -> StageDecision:
    """Classify one patch against the stage prompts; keep it when the target
    class wins the argmax (ties break toward the target). With a threshold
    set, keep instead requires the target's softmax score to reach it."""
    if prompts.stage not in ("coarse", "fine"):
        raise ValueError(f"stage_filter needs a filtering prompt set, got {prompts.stage!r}")
    if txt_matrix.rows != len(prompts.texts):
        raise DimMismatch("text matrix rows do not match prompt count")
    patch_embedding = np.asarray(patch_embedding)
    if patch_embedding.shape != (txt_matrix.dim,):
        raise DimMismatch(
            f"patch embedding shape {patch_embedding.shape} vs text dim {txt_matrix.dim}")
    scores = txt_matrix.values @ patch_embedding
    target = prompts.target_index
    chosen = target if scores[target] == scores.max() else int(np.argmax(scores))
    if keep_threshold is None:
        kept = chosen == target
    else:
        kept = float(_softmax(scores)[target]) >= keep_threshold
    return StageDecision(stage=prompts.stage, scores=tuple(float(v) for v in scores),
                         chosen_index=chosen, kept=kept)


def _ranking_decision(patch_embedding: np.ndarray, ranking_prompts: PromptSet,
                      txt_matrix: EmbeddingMatrix) -> tuple[StageDecision, int]:
    if ranking_prompts.counts is None:
        raise ValueError("ranking prompt set must carry its counts")
    if txt_matrix.rows != len(ranking_prompts.texts):
        raise DimMismatch("text matrix rows do not match prompt count")
    patch_embedding = np.asarray(patch_embedding)
    if patch_embedding.shape != (txt_matrix.dim,):
        raise DimMismatch(
            f"patch embedding shape {patch_embedding.shape} vs text dim {txt_matrix.dim}")
    scores = txt_matrix.values @ patch_embedding
    # argmax takes the first maximum; counts are ascending, so an exact tie
    # resolves to the smaller count.
    chosen = int(np.argmax(scores))
    decision = StageDecision(stage="ranking", scores=tuple(float(v) for v in scores),
                             chosen_index=chosen, kept=None)
    return decision, int(ranking_prompts.counts[chosen])


def stage_count(patch_embedding: np.ndarray, ranking_prompts: PromptSet,
                txt_matrix: EmbeddingMatrix) -> int:
    """Map one surviving patch to its count interval."""
    return _ranking_decision(patch_embedding, ranking_prompts, txt_matrix)[1]


def predict(image: ImageRef, enc_original: EncoderHandle, enc_finetuned: EncoderHandle,
            text_enc: EncoderHandle, cfg: InferenceConfig) -> CountPrediction:
    """Run the full pipeline on one image and aggregate per-tile counts."""
    started = time.perf_counter()
    ref = resize_long_side(image, cfg.resize_max_long) if cfg.resize_max_long else image
    tiles = tile_grid(ref, cfg.grid)
    pixels = load_pixels(ref)
    buffers = [extract_and_resize(pixels, t, cfg.patch_side) for t in tiles]

    coarse_txt = embed_prompt_set(cfg.coarse_prompts, text_enc)
    fine_txt = embed_prompt_set(cfg.fine_prompts, text_enc)
    ranking_txt = embed_prompt_set(cfg.ranking_prompts, text_enc)

    decisions: list[list[StageDecision]] = [[] for _ in tiles]
    survivors = list(range(len(tiles)))
    timing: dict[str, float] = {}

    t0 = time.perf_counter()
    if cfg.use_coarse:
        emb = encode_images(enc_original, buffers)
        kept = []
        for idx in survivors:
            decision = stage_filter(emb.values[idx], cfg.coarse_prompts, coarse_txt,
                                    cfg.keep_threshold)
            decisions[idx].append(decision)
            if decision.kept:
                kept.append(idx)
        survivors = kept
    timing["coarse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if cfg.use_fine and survivors:
        emb = encode_images(enc_original, [buffers[i] for i in survivors])
        kept = []
        for row, idx in enumerate(survivors):
            decision = stage_filter(emb.values[row], cfg.fine_prompts, fine_txt,
                                    cfg.keep_threshold)
            decisions[idx].append(decision)
            if decision.kept:
                kept.append(idx)
        survivors = kept
    timing["fine"] = time.perf_counter() - t0

    counts = {idx: 0 for idx in range(len(tiles))}
    t0 = time.perf_counter()
    if survivors:
        rank_enc = enc_finetuned if cfg.use_finetuned_for_ranking else enc_original
        emb = encode_images(rank_enc, [buffers[i] for i in survivors])
        for row, idx in enumerate(survivors):
            decision, count = _ranking_decision(emb.values[row], cfg.ranking_prompts, ranking_txt)
            decisions[idx].append(decision)
            counts[idx] = count
    timing["ranking"] = time.perf_counter() - t0
    timing["total"] = time.perf_counter() - started

    results = [TileResult(crop=t, decisions=decisions[i], patch_count=counts[i])
               for i, t in enumerate(tiles)]
    return CountPrediction(image=ref, grid_p=cfg.grid.p, tiles=results,
                           total=sum(counts.values()), timing=timing)


def prediction_record(pred: CountPrediction) -> dict:
    """Deterministic JSON-ready record; wall-clock timing stays out of it."""
    return {
        "image": pred.image.path,
        "width": pred.image.width,
        "height": pred.image.height,
        "p": pred.grid_p,
        "total": pred.total,
        "tiles": [
            {
                "crop": list(tile.crop.box()),
                "count": tile.patch_count,
                "decisions": [
                    {
                        "stage": d.stage,
                        "scores": [round(s, 9) for s in d.scores],
                        "chosen": d.chosen_index,
                        "kept": d.kept,
                    }
                    for d in tile.decisions
                ],
            }
            for tile in pred.tiles
        ],
    }


def timing_record(pred: CountPrediction) -> dict:
    total = pred.timing.get("total", 0.0)
    return {
        "image": pred.image.path,
        "stage_seconds": {k: v for k, v in pred.timing.items() if k != "total"},
        "seconds": total,
        "fps": (1.0 / total) if total > 0 else None,
    }
