"""Encoder handles, cosine similarity, and deterministic mock encoders.

Every encoder returns L2-normalized rows, so the inner product in
``similarity`` is cosine similarity and stays in [-1, 1]. Handles count the
number of items they encode, which the inference tests use to verify that
filtered patches never reach later stages.
"""
from __future__ import annotations

import hashlib
import math
import re
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import synthetic
from .errors import DimMismatch, EncoderFailure, ShapeMismatch

EMBED_DIM = 48

# Mock embedding layout: two count dimensions, one slot per named class,
# and a tail block for hashed fallbacks.
_CLASS_BASE = 2
_HASH_BASE = _CLASS_BASE + 16
# One quarter period over a count gap of 300 keeps cos(angle * |a - b|)
# strictly decreasing for every pair of counts the pipeline can see.
COUNT_ANGLE = math.pi / 600.0


@dataclass
class EmbeddingMatrix:
    """A (rows, dim) stack of embeddings, one row per encoded item."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"embedding matrix must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise EncoderFailure("embedding matrix contains non-finite values")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class SimilarityMatrix:
    """Pairwise inner products between image rows and text rows."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"similarity matrix must be 2-D, got {self.values.shape}")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


def l2_normalize(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EncoderFailure("cannot normalize a zero embedding row")
    return values / norms


def similarity(img: EmbeddingMatrix, txt: EmbeddingMatrix) -> SimilarityMatrix:
    if img.dim != txt.dim:
        raise DimMismatch(f"image dim {img.dim} != text dim {txt.dim}")
    return SimilarityMatrix(img.values @ txt.values.T)


@dataclass
class EncoderHandle:
    """Uniform wrapper over a mock function or a torch module.

    ``call_counter`` counts individual items (patches or texts) encoded
    through the public encode functions. ``module`` is set for torch-backed
    handles; ``batch_fn`` for fixed-function mocks.
    """

    kind: str  # "image" | "text"
    backend: str  # "mock" | "tiny" | "clip"
    trainable: bool = False
    call_counter: int = 0
    module: Optional[nn.Module] = None
    batch_fn: Optional[Callable] = field(default=None, repr=False)
    prompt_cache: dict = field(default_factory=dict, repr=False)
    cache_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    counter_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _count(self, n: int) -> None:
        with self.counter_lock:
            self.call_counter += n

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameter snapshot as plain numpy arrays (empty for mocks)."""
        if self.module is None:
            return {}
        return {
            name: tensor.detach().cpu().numpy().copy()
            for name, tensor in sorted(self.module.state_dict().items())
        }

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        if self.module is None:
            if state:
                raise EncoderFailure(f"{self.backend} backend has no parameters to restore")
            return
        self.module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in state.items()})


def patches_to_tensor(patches) -> torch.Tensor:
    """Stack uint8 (S, S, 3) buffers into a float (B, 3, S, S) tensor in [0, 1]."""
    stacked = np.stack(patches).astype(np.float32) / 255.0
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def text_features(texts) -> torch.Tensor:
    """Deterministic 64-d features for text, for the tiny torch text tower."""
    rows = []
    for text in texts:
        digest = hashlib.sha256(text.encode("utf-8")).digest() * 2
        rows.append(np.frombuffer(digest, dtype=np.uint8).astype(np.float32) / 255.0)
    return torch.from_numpy(np.stack(rows))


def encode_images(handle: EncoderHandle, patches) -> EmbeddingMatrix:
    """Encode same-sized pixel buffers into normalized rows, order preserved."""
    if handle.kind != "image":
        raise EncoderFailure(f"handle of kind {handle.kind!r} cannot encode images")
    patches = list(patches)
    if not patches:
        raise ShapeMismatch("cannot encode an empty patch list")
    shapes = {tuple(p.shape) for p in patches}
    if len(shapes) > 1:
        raise ShapeMismatch(f"patches differ in shape: {sorted(shapes)}")
    if handle.batch_fn is not None:
        values = handle.batch_fn(patches)
    elif handle.module is not None:
        with torch.no_grad():
            raw = handle.module(patches_to_tensor(patches))
            values = F.normalize(raw, dim=1).numpy()
    else:
        raise EncoderFailure("handle has no backing implementation")
    handle._count(len(patches))
    return EmbeddingMatrix(l2_normalize(np.asarray(values, dtype=np.float64)), normalized=True)


def encode_texts(handle: EncoderHandle, texts) -> EmbeddingMatrix:
    if handle.kind != "text":
        raise EncoderFailure(f"handle of kind {handle.kind!r} cannot encode texts")
    texts = list(texts)
    if not texts:
        raise EncoderFailure("cannot encode an empty text list")
    if handle.batch_fn is not None:
        values = handle.batch_fn(texts)
    elif handle.module is not None:
        with torch.no_grad():
            raw = handle.module(text_features(texts))
            values = F.normalize(raw, dim=1).numpy()
    else:
        raise EncoderFailure("handle has no backing implementation")
    handle._count(len(texts))
    return EmbeddingMatrix(l2_normalize(np.asarray(values, dtype=np.float64)), normalized=True)


class TinyImageEncoder(nn.Module):
    """Small trainable embedder: 8x8 average-pooled RGB through one linear map."""

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0):
        super().__init__()
        self.proj = nn.Linear(192, dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(dim, 192, generator=gen) * 0.2)
            self.proj.bias.copy_(torch.randn(dim, generator=gen) * 0.01)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(x, 8).flatten(1)
        return self.proj(pooled)


class TinyTextEncoder(nn.Module):
    """Hash features through one linear map; the text-side counterpart."""

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0):
        super().__init__()
        self.proj = nn.Linear(64, dim)
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(dim, 64, generator=gen) * 0.2)
            self.proj.bias.copy_(torch.randn(dim, generator=gen) * 0.01)


    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.proj(feats)


def make_tiny_encoders(dim: int = EMBED_DIM, seed: int = 0) -> tuple[EncoderHandle, EncoderHandle]:
    image = EncoderHandle(kind="image", backend="tiny", trainable=True,
                          module=TinyImageEncoder(dim=dim, seed=seed))
    text = EncoderHandle(kind="text", backend="tiny", trainable=False,
                         module=TinyTextEncoder(dim=dim, seed=seed))
    return image, text


def count_embedding(count: float, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit vector whose dot with another count vector is cos(angle * gap)."""
    v = np.zeros(dim, dtype=np.float64)
    v[0] = math.cos(COUNT_ANGLE * count)
    v[1] = math.sin(COUNT_ANGLE * count)
    return v


_FILTER_RE = re.compile(r"^The objects? (?:is|are) (.+?)\.?$")
_NUMBER_RE = re.compile(r"(\d+)")


def _hash_slot(token: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
    return _HASH_BASE + int.from_bytes(digest[:4], "big") % (EMBED_DIM - _HASH_BASE)


def _class_direction(name: str, seed: int) -> np.ndarray:
    v = np.zeros(EMBED_DIM, dtype=np.float64)
    try:
        v[_CLASS_BASE + synthetic.class_slot(name)] = 1.0
    except KeyError:
        v[_hash_slot(name, seed)] = 1.0
    return v


def make_mock_count_encoder(seed: int = 0) -> tuple[EncoderHandle, EncoderHandle]:
    """Paired deterministic encoders that invert the synthetic pixel code.

    The image side reads the planted (class, count) code from a patch corner
    and emits a unit vector combining a count phase with class directions;
    the text side maps count prompts onto the same phase and class prompts
    onto the matching class directions. Similarity between a planted patch
    and the prompt for count r is therefore strictly decreasing in the gap
    |planted - r|, and planted classes win their own filter prompts.
    """
    body_parts = ("human heads", "human bodies", "human legs")

    def embed_patch(buf: np.ndarray) -> np.ndarray:
        cls, count = synthetic.decode_code(buf[0, 0])
        if cls == "crowd" or cls in body_parts:
            v = count_embedding(count)
            v += _class_direction("crowd", seed)
            v += _class_direction("human heads" if cls == "crowd" else cls, seed)
        elif cls is not None:
            v = _class_direction(cls, seed)
        else:
            v = np.zeros(EMBED_DIM, dtype=np.float64)
            code = (int(buf[0, 0, 0]) << 16) | (int(buf[0, 0, 1]) << 8) | int(buf[0, 0, 2])
            v[_HASH_BASE + code % (EMBED_DIM - _HASH_BASE)] = 1.0
        return v

    def image_fn(patches) -> np.ndarray:
        return l2_normalize(np.stack([embed_patch(np.asarray(p)) for p in patches]))

    def embed_text(text: str) -> np.ndarray:
        m = _FILTER_RE.match(text)
        if m:
            return _class_direction(m.group(1), seed)
        num = _NUMBER_RE.search(text)
        if num:
            return count_embedding(int(num.group(1)))
        rng = np.random.default_rng(
            int.from_bytes(hashlib.sha256(f"{seed}:{text}".encode()).digest()[:8], "big")
        )
        v = np.zeros(EMBED_DIM, dtype=np.float64)
        v[_HASH_BASE:] = rng.normal(size=EMBED_DIM - _HASH_BASE)
        return v

    def text_fn(texts) -> np.ndarray:
        return l2_normalize(np.stack([embed_text(t) for t in texts]))

    image = EncoderHandle(kind="image", backend="mock", trainable=False, batch_fn=image_fn)
    text = EncoderHandle(kind="text", backend="mock", trainable=False, batch_fn=text_fn)
    return image, text


class _ClipImageModule(nn.Module):
    """Adapter: pixel tensor in [0, 1] to CLIP image features."""

    def __init__(self, clip_model, mean, std):
        super().__init__()
        self.clip = clip_model
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.clip.get_image_features(pixel_values=(x - self.mean) / self.std)


def load_clip_encoders(model_name: str = "openai/clip-vit-base-patch16",
                       trainable_image: bool = True) -> tuple[EncoderHandle, EncoderHandle]:
    """Thin adapter around a pretrained vision-language checkpoint.

    Requires the ``transformers`` extra and a locally cached checkpoint; the
    test suite never exercises this path.
    """
    try:
        from transformers import CLIPModel, CLIPProcessor
    except ImportError as exc:
        raise EncoderFailure("pretrained backend needs the 'clip' extra installed") from exc
    try:
        model = CLIPModel.from_pretrained(model_name)
        processor = CLIPProcessor.from_pretrained(model_name)
    except Exception as exc:
        raise EncoderFailure(f"could not load pretrained weights {model_name!r}: {exc}") from exc
    model.eval()
    ip = processor.image_processor
    image = EncoderHandle(
        kind="image", backend="clip", trainable=trainable_image,
        module=_ClipImageModule(model, ip.image_mean, ip.image_std),
    )

    def text_fn(texts) -> np.ndarray:
        tokens = processor(text=list(texts), return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = model.get_text_features(**tokens)
        return F.normalize(feats, dim=1).numpy()

    text = EncoderHandle(kind="text", backend="clip", trainable=False, batch_fn=text_fn)
    return image, text
