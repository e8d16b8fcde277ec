"""Prompt construction for the three query families, plus embedding caching.

Prompt wording is pinned verbatim in the golden tests: text encoders are
sensitive to it, so the templates here must not drift.
"""
from __future__ import annotations

from dataclasses import dataclass

from .encoders import EmbeddingMatrix, EncoderHandle, encode_texts
from .errors import EmptyInput, TargetMissing

RANKING_TEMPLATE = "There are {} persons in the crowd"
COARSE_TEMPLATE = "The object is {}"
FINE_TEMPLATE = "The objects are {}"

DEFAULT_COARSE_CLASSES = ("crowd", "tree", "car", "building", "road", "sky")
DEFAULT_FINE_CLASSES = ("human heads", "human bodies", "human legs")


@dataclass(frozen=True)
class RankingPromptSpec:
    """Arithmetic count ladder: r0, r0 + k, ..., r0 + (n - 1) k."""

    r0: int = 20
    k: int = 35
    n: int = 6
    template: str = RANKING_TEMPLATE
    alphabetic_mode: bool = False

    def __post_init__(self) -> None:
        if self.r0 < 0:
            raise ValueError("r0 must be non-negative")
        if self.k < 1:
            raise ValueError("counting interval k must be >= 1")
        if self.n < 2:
            raise ValueError("need at least 2 ranking classes")
        if self.template.count("{}") != 1:
            raise ValueError("template must contain exactly one placeholder")

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(self.r0 + j * self.k for j in range(self.n))


@dataclass(frozen=True)
class PromptSet:
    stage: str  # "coarse" | "fine" | "ranking"
    texts: tuple[str, ...]
    target_index: int | None = None
    counts: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.texts:
            raise EmptyInput("prompt set must contain at least one text")
        if self.stage in ("coarse", "fine"):
            if self.target_index is None or not 0 <= self.target_index < len(self.texts):
                raise ValueError(f"target_index {self.target_index} out of range")
        if self.counts is not None:
            if len(self.counts) != len(self.texts):
                raise ValueError("counts and texts must align")
            if any(b <= a for a, b in zip(self.counts, self.counts[1:])):
                raise ValueError("counts must be strictly increasing")


def build_ranking_prompts(spec: RankingPromptSpec) -> PromptSet:
    """Render the count ladder into prompt texts, smallest count first."""
    counts = spec.counts
    rendered = [f"A + {c}" if spec.alphabetic_mode else str(c) for c in counts]
    texts = tuple(spec.template.format(r) for r in rendered)
    return PromptSet(stage="ranking", texts=texts, counts=counts)


def build_filter_prompts(stage: str, classes, target: str) -> PromptSet:
    if stage not in ("coarse", "fine"):
        raise ValueError(f"unknown filtering stage {stage!r}")
    classes = list(classes)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes to filter against")
    if target not in classes:
        raise TargetMissing(f"target {target!r} not in classes {classes}")
    template = COARSE_TEMPLATE if stage == "coarse" else FINE_TEMPLATE
    texts = tuple(template.format(c) for c in classes)
    return PromptSet(stage=stage, texts=texts, target_index=classes.index(target))


def embed_prompt_set(ps: PromptSet, text_encoder: EncoderHandle) -> EmbeddingMatrix:
    """Embed the prompts once per (handle, prompt set); later calls hit the cache.

    Safe under concurrent readers; the handle lock serializes first-time
    embedding of a given set.
    """
    key = (ps.stage, ps.texts)
    cached = text_encoder.prompt_cache.get(key)
    if cached is not None:
        return cached
    with text_encoder.cache_lock:
        cached = text_encoder.prompt_cache.get(key)
        if cached is None:
            cached = encode_texts(text_encoder, list(ps.texts))
            text_encoder.prompt_cache[key] = cached
    return cached
