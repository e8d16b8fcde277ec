"""Pairwise ranking loss over the patch/prompt similarity matrix, its
gradient check, and the fine-tuning loop that aligns the image encoder to
the frozen count-prompt embeddings.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import EncoderHandle, encode_images, patches_to_tensor, text_features
from .errors import EmptyInput, ImageTooSmall, InvalidRatio, KinkTooClose, NotSquare, ShapeMismatch
from .geometry import (
    DEFAULT_PATCH_SIDE,
    PatchPyramid,
    build_pyramid,
    extract_and_resize,
    load_pixels,
    resize_long_side,
)
from .prompts import RankingPromptSpec, build_ranking_prompts, embed_prompt_set

logger = logging.getLogger(__name__)

PAIR_MODES = ("all_pairs", "adjacent")


@dataclass
class RankingLossReport:
    loss: float
    violated_pairs: int
    total_pairs: int


def _pair_indices(m: int, pair_mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Row/column index arrays for the checked (smaller, larger) pairs."""
    if pair_mode == "all_pairs":
        return np.triu_indices(m, k=1)
    if pair_mode == "adjacent":
        larger = np.arange(1, m)
        return larger - 1, larger
    raise ValueError(f"pair_mode must be one of {PAIR_MODES}, got {pair_mode!r}")


def ranking_loss(s, pair_mode: str = "all_pairs") -> RankingLossReport:
    """Mean hinge penalty for similarity rows that beat the diagonal.

    For every checked pair (i', i) with i' < i the diagonal entry s[i, i]
    must dominate s[i', i]; each violation contributes its margin. Loss is
    averaged over the checked pairs, so its scale is independent of m.
    """
    values = np.asarray(getattr(s, "values", s), dtype=np.float64)
    if values.ndim != 2:
        raise ShapeMismatch(f"similarity matrix must be 2-D, got {values.shape}")
    m, n = values.shape
    if m != n:
        raise NotSquare(f"ranking loss needs a square matrix, got {m}x{n}")
    smaller, larger = _pair_indices(m, pair_mode)
    if len(smaller) == 0:
        return RankingLossReport(loss=0.0, violated_pairs=0, total_pairs=0)
    margins = values[smaller, larger] - values[larger, larger]
    hinge = np.maximum(0.0, margins)
    return RankingLossReport(
        loss=float(hinge.sum() / len(smaller)),
        violated_pairs=int(np.count_nonzero(margins > 0)),
        total_pairs=int(len(smaller)),
    )


def ranking_loss_torch(s: torch.Tensor, pair_mode: str = "all_pairs") -> torch.Tensor:
    """Differentiable twin of ``ranking_loss``; accepts (m, m) or (b, m, m)."""
    squeeze = s.ndim == 2
    if squeeze:
        s = s.unsqueeze(0)
    m = s.shape[-1]
    if s.shape[-2] != m:
        raise NotSquare(f"ranking loss needs square matrices, got {tuple(s.shape[-2:])}")
    smaller, larger = _pair_indices(m, pair_mode)
    margins = s[:, smaller, larger] - s[:, larger, larger]
    loss = F.relu(margins).mean(dim=1)
    return loss[0] if squeeze else loss.mean()


def embedding_ranking_loss(img: np.ndarray, txt: np.ndarray,
                           pair_mode: str = "all_pairs") -> float:
    return ranking_loss(np.asarray(img) @ np.asarray(txt).T, pair_mode).loss


def embedding_ranking_loss_grad(img: np.ndarray, txt: np.ndarray,
                                pair_mode: str = "all_pairs") -> np.ndarray:
    """Closed-form gradient of the mean hinge loss w.r.t. the image rows.

    With s = img @ txt.T, an active pair (i', i) contributes +txt[i] to the
    gradient of row i' and -txt[i] to that of row i, scaled by 1/total_pairs;
    a descent step therefore pushes row i toward its own text row and row i'
    away from it.
    """
    img = np.asarray(img, dtype=np.float64)
    txt = np.asarray(txt, dtype=np.float64)
    s = img @ txt.T
    smaller, larger = _pair_indices(s.shape[0], pair_mode)
    margins = s[smaller, larger] - s[larger, larger]
    active = margins > 0
    grad = np.zeros_like(img)
    if np.any(active):
        weight = txt[larger[active]] / len(smaller)
        np.add.at(grad, smaller[active], weight)
        np.subtract.at(grad, larger[active], weight)
    return grad


def gradient_check(img: np.ndarray, txt: np.ndarray, epsilon: float = 1e-5,
                   pair_mode: str = "all_pairs") -> float:
    """Compare the closed-form gradient against central finite differences.

    Only valid away from hinge kinks: every pair margin must sit at least
    10 * epsilon from zero, otherwise KinkTooClose is raised. Returns the
    worst relative disagreement over all embedding entries.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    img = np.asarray(img, dtype=np.float64)
    txt = np.asarray(txt, dtype=np.float64)
    s = img @ txt.T
    smaller, larger = _pair_indices(s.shape[0], pair_mode)
    margins = s[smaller, larger] - s[larger, larger]
    closest = float(np.min(np.abs(margins))) if len(margins) else np.inf
    if closest < 10 * epsilon:
        raise KinkTooClose(f"hinge margin {closest:.3e} within 10*epsilon of zero")
    analytic = embedding_ranking_loss_grad(img, txt, pair_mode)
    worst = 0.0
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            bumped = img.copy()
            bumped[i, j] += epsilon
            hi = embedding_ranking_loss(bumped, txt, pair_mode)
            bumped[i, j] -= 2 * epsilon
            lo = embedding_ranking_loss(bumped, txt, pair_mode)
            fd = (hi - lo) / (2 * epsilon)
            denom = max(abs(analytic[i, j]), abs(fd), 1e-8)
            worst = max(worst, abs(analytic[i, j] - fd) / denom)
    return worst


@dataclass
class TrainConfig:
    m: int = 6
    ranking: RankingPromptSpec = field(default_factory=RankingPromptSpec)
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_pyramids: int = 8
    freeze_text: bool = True
    freeze_image: bool = False
    seed: int = 0
    pair_mode: str = "all_pairs"
    min_ratio: float = 0.5
    patch_side: int = DEFAULT_PATCH_SIDE
    # Keep extracted patch buffers in memory across epochs. Costs roughly
    # m * patch_side^2 * 3 bytes per image; disable for large streams.
    cache_patches: bool = True

    def __post_init__(self) -> None:
        if self.m != self.ranking.n:
            raise ValueError(
                f"pyramid depth m={self.m} must equal ranking class count n={self.ranking.n} "
                "so the similarity matrix is square"
            )
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_pyramids < 1:
            raise ValueError("batch size must be >= 1")
        if self.pair_mode not in PAIR_MODES:
            raise ValueError(f"pair_mode must be one of {PAIR_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    manifest: dict

    def params_blob(self) -> bytes:
        return serialize_params(self.state)


_MAGIC = b"CRNK1\n"


def serialize_params(state: dict[str, np.ndarray]) -> bytes:
    """Deterministic little-endian serialization of a parameter dict."""
    header = []
    blobs = []
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        header.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    head = json.dumps(header, sort_keys=True).encode()
    return struct.pack(">Q", len(head)) + head + b"".join(blobs)


def _deserialize_params(blob: bytes) -> dict[str, np.ndarray]:
    (head_len,) = struct.unpack(">Q", blob[:8])
    header = json.loads(blob[8:8 + head_len].decode())
    out = {}
    offset = 8 + head_len
    for entry in header:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        n = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        out[entry["name"]] = np.frombuffer(blob[offset:offset + n], dtype=dtype).reshape(shape).copy()
        offset += n
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = json.dumps(ckpt.manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(">Q", len(manifest)))
        fh.write(manifest)
        fh.write(ckpt.params_blob())
    return path


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path} is not a crowdrank checkpoint")
    offset = len(_MAGIC)
    (man_len,) = struct.unpack(">Q", blob[offset:offset + 8])
    offset += 8
    manifest = json.loads(blob[offset:offset + man_len].decode())
    state = _deserialize_params(blob[offset + man_len:])
    return Checkpoint(state=state, manifest=manifest)


def build_training_pyramids(refs, m: int = 6, min_ratio: float = 0.5,
                            target_side: int = DEFAULT_PATCH_SIDE,
                            resize_max_long: int | None = None) -> list[PatchPyramid]:
    """Fixed crop geometry per image; images too small for the pyramid are
    skipped with a warning rather than aborting the stream."""
    pyramids = []
    for ref in refs:
        if resize_max_long:
            ref = resize_long_side(ref, resize_max_long)
        try:
            pyramids.append(build_pyramid(ref, m=m, min_ratio=min_ratio, target_side=target_side))
        except (ImageTooSmall, InvalidRatio) as exc:
            logger.warning("skipping %s: %s", ref.path, exc)
    return pyramids


def _chunks(items, size):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def _pyramid_buffers(pyramid: PatchPyramid) -> list[np.ndarray]:
    pixels = load_pixels(pyramid.image)
    return [extract_and_resize(pixels, crop, pyramid.target_side) for crop in pyramid.crops]


def train(pyramids, image_enc: EncoderHandle, text_enc: EncoderHandle, cfg: TrainConfig,
          dataset_name: str | None = None, log_path=None) -> Checkpoint:
    """Fine-tune the image encoder against frozen count-prompt embeddings.

    Each step encodes a batch of pyramids (one similarity matrix per
    pyramid), averages the ranking loss over the batch, and applies an
    RAdam update to whatever parameters are not frozen. With everything
    frozen (or with parameter-free mock encoders) the loop still runs and
    records the loss history, leaving all weights untouched.
    """
    pyramids = list(pyramids)
    if not pyramids:
        raise EmptyInput("training stream contains no pyramids")
    for pyr in pyramids:
        if len(pyr) != cfg.m:
            raise ShapeMismatch(f"pyramid has {len(pyr)} crops, config expects m={cfg.m}")

    torch.manual_seed(cfg.seed)
    prompt_set = build_ranking_prompts(cfg.ranking)

    train_image = image_enc.module is not None and image_enc.trainable and not cfg.freeze_image
    train_text = text_enc.module is not None and text_enc.trainable and not cfg.freeze_text
    params = []
    if train_image:
        params += list(image_enc.module.parameters())
    if train_text:
        params += list(text_enc.module.parameters())
    optimizer = torch.optim.RAdam(params, lr=cfg.learning_rate) if params else None

    text_values = None
    text_inputs = None
    if train_text:
        text_inputs = text_features(prompt_set.texts)
    else:
        text_values = embed_prompt_set(prompt_set, text_enc).values

    buffer_cache: dict[int, list[np.ndarray]] = {}

    def buffers_for(pyramid: PatchPyramid) -> list[np.ndarray]:
        if not cfg.cache_patches:
            return _pyramid_buffers(pyramid)
        key = id(pyramid)
        if key not in buffer_cache:
            buffer_cache[key] = _pyramid_buffers(pyramid)
        return buffer_cache[key]

    def batch_loss(batch) -> tuple[torch.Tensor | float, int]:
        """Mean ranking loss over the batch and its violated-pair count."""
        buffers = [buffers_for(p) for p in batch]
        if train_image or train_text:
            flat = [buf for per_pyr in buffers for buf in per_pyr]
            x = patches_to_tensor(flat)
            if train_image:
                raw = image_enc.module(x)
            elif image_enc.module is not None:
                with torch.no_grad():
                    raw = image_enc.module(x)
            else:
                rows = [encode_images(image_enc, per_pyr).values for per_pyr in buffers]
                raw = torch.from_numpy(np.concatenate(rows).astype(np.float32))
            emb = F.normalize(raw, dim=1).reshape(len(batch), cfg.m, -1)
            if train_text:
                txt = F.normalize(text_enc.module(text_inputs), dim=1)
            else:
                txt = torch.from_numpy(text_values.astype(np.float32))
            sims = emb @ txt.T
            loss = ranking_loss_torch(sims, cfg.pair_mode)
            with torch.no_grad():
                violated = sum(
                    ranking_loss(sims[b].detach().numpy(), cfg.pair_mode).violated_pairs
                    for b in range(len(batch))
                )
            return loss, violated
        # No gradients anywhere: plain numpy evaluation.
        total, violated = 0.0, 0
        for per_pyr in buffers:
            emb = encode_images(image_enc, per_pyr).values
            report = ranking_loss(emb @ text_values.T, cfg.pair_mode)
            total += report.loss
            violated += report.violated_pairs
        return total / len(buffers), violated

    pairs_per_pyramid = ranking_loss(np.zeros((cfg.m, cfg.m)), cfg.pair_mode).total_pairs
    history = []
    step0_loss = None
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            losses = []
            violated_total = 0
            for batch in _chunks(pyramids, cfg.batch_pyramids):
                loss, violated = batch_loss(batch)
                if optimizer is not None:
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                value = float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss)
                if step0_loss is None:
                    step0_loss = value
                losses.append(value)
                violated_total += violated
            record = {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "violated_pair_rate": violated_total / (pairs_per_pyramid * len(pyramids))
                if pairs_per_pyramid else 0.0,
            }
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(
                    {**record, "wall_time": time.perf_counter() - started}, sort_keys=True) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()

    cfg_dict = cfg.to_dict()
    manifest = {
        "format": 1,
        "ranking": asdict(cfg.ranking),
        "epochs_completed": cfg.epochs,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "dataset": dataset_name,
        "optimizer": "RAdam",
        "text_encoder_trained": train_text,
        "step0_loss": step0_loss,
        "loss_history": history,
    }
    return Checkpoint(state=image_enc.state_arrays(), manifest=manifest)
