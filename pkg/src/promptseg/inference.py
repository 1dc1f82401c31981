"""Unified streaming inference.

Both paths decode every tracked target through the prompt stream, feeding
predicted masks back as visual prompts into bounded per-target memory
pools. The category-specified path additionally detects entities with the
learnable stream on frame 0 and every detect_interval frames, suppressing
candidates that overlap live targets and re-identifying the rest against
running ReID means with bi-softmax matching before creating new ids.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecoderOutput, init_prompt_query
from .encoders import FeaturePyramid, PromptTokens, TextPrompt, VisualPrompt, visual_sampler
from .errors import ConfigError, InputError, StateError
from .metrics import region_jaccard
from .model import VideoSegmenter
from .rle import rle_encode
from .seeding import derive_rng
from .tensor import Tensor


@dataclass
class StreamConfig:
    detect_interval: int = 3
    score_thresh: float = 0.4
    nms_iou: float = 0.6
    match_thresh: float = 0.3
    clip_len: int = 3
    pool_capacity: int = 8     # recent feedback entries kept besides the pinned one

    def __post_init__(self):
        if self.detect_interval < 1:
            raise ConfigError("detect_interval must be >= 1")
        for name in ("score_thresh", "nms_iou", "match_thresh"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.clip_len < 1 or self.pool_capacity < 1:
            raise ConfigError("clip_len and pool_capacity must be >= 1")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in
                ("detect_interval", "score_thresh", "nms_iou", "match_thresh",
                 "clip_len", "pool_capacity")}

    @classmethod
    def from_json(cls, obj: dict) -> "StreamConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


class MemoryPool:
    """Bounded per-target store of prompt tokens; the initial entry is pinned."""

    def __init__(self, target_id: int, pinned: PromptTokens, capacity: int):
        self.target_id = target_id
        self.pinned = pinned
        self.entries: deque[PromptTokens] = deque(maxlen=capacity)

    def add(self, tokens: PromptTokens) -> None:
        self.entries.append(tokens)

    def __len__(self) -> int:
        return 1 + len(self.entries)

    def all_rows(self) -> Tensor:
        if self.pinned is None:
            raise StateError("memory pool lost its pinned entry")
        blocks = [self.pinned.tokens] + [e.tokens for e in self.entries]
        return T.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]


def pooled_query(pool: MemoryPool, clip_len: int) -> Tensor:
    """Mean over every stored token row, repeated over the clip: [T, C]."""
    return init_prompt_query(pool.all_rows(), clip_len)


@dataclass
class EntityRecord:
    id: int
    category_id: int | None
    score: float
    pool: MemoryPool
    birth_frame: int
    masks: dict[int, str] = field(default_factory=dict)      # frame -> RLE
    last_seen: int = -1
    reid_sum: np.ndarray | None = None
    reid_count: int = 0
    _mask_arrays: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def reid_embed(self) -> np.ndarray | None:
        if self.reid_count == 0:
            return None
        return self.reid_sum / self.reid_count

    def update_reid(self, emb: np.ndarray) -> None:
        self.reid_sum = emb.copy() if self.reid_sum is None else self.reid_sum + emb
        self.reid_count += 1

    def record_mask(self, frame: int, mask: np.ndarray) -> None:
        self.masks[frame] = rle_encode(mask)
        self._mask_arrays[frame] = mask

    def mask_at(self, frame: int, shape) -> np.ndarray:
        got = self._mask_arrays.get(frame)
        return got if got is not None else np.zeros(shape, dtype=bool)

    def finalize(self, total_frames: int, shape) -> None:
        for frame in range(self.birth_frame, total_frames):
            if frame not in self.masks:
                self.record_mask(frame, np.zeros(shape, dtype=bool))


@dataclass
class Candidate:
    mask: np.ndarray
    category_id: int
    score: float
    reid: np.ndarray


def bilinear_upsample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsample of a 2-D array by an integer factor (half-pixel centres)."""
    h, w = arr.shape
    ys = (np.arange(h * factor) + 0.5) / factor - 0.5
    xs = (np.arange(w * factor) + 0.5) / factor - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - np.floor(ys), 0.0, 1.0)[:, None]
    wx = np.clip(xs - np.floor(xs), 0.0, 1.0)[None, :]
    top = arr[np.ix_(y0, x0)] * (1 - wx) + arr[np.ix_(y0, x1)] * wx
    bot = arr[np.ix_(y1, x0)] * (1 - wx) + arr[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def logits_to_mask(logits: np.ndarray, factor: int = 4) -> np.ndarray:
    """Binarize at probability 0.5 (logit 0) after bilinear upsampling."""
    return bilinear_upsample(logits.astype(np.float64), factor) > 0.0


def detect_entities(det: DecoderOutput, config: StreamConfig,
                    upsample_factor: int = 4) -> list[Candidate]:
    """Learnable-stream candidates for one frame: score threshold then greedy
    mask-IoU NMS keeping higher scores. May return an empty list."""
    n = det.n_learnable
    logits = det.mask_logits.data[:n, 0]
    scores_all = 1.0 / (1.0 + np.exp(-det.class_logits.data[:n].astype(np.float64)))
    best_cls = scores_all.argmax(axis=1)
    best_score = scores_all.max(axis=1)
    order = np.argsort(-best_score)
    kept: list[Candidate] = []
    for i in order:
        if best_score[i] < config.score_thresh:
            break
        mask = logits_to_mask(logits[i], upsample_factor)
        if not mask.any():
            continue
        if any(region_jaccard(mask, k.mask) > config.nms_iou for k in kept):
            continue
        kept.append(Candidate(mask=mask, category_id=int(best_cls[i]),
                              score=float(best_score[i]),
                              reid=det.reid_embed.data[i].copy()))
    return kept


def mask_to_prompt(mask: np.ndarray, f3: Tensor, l_star: int,
                   rng: np.random.Generator, target_id: int,
                   frame: int) -> PromptTokens | None:
    """Predicted mask -> visual prompt tokens; empty mask means skip-update."""
    if not mask.any():
        return None
    prompt = VisualPrompt.from_mask(target_id, mask)
    tokens = visual_sampler(prompt, f3, l_star, rng)
    tokens.source_frame = frame
    return tokens


def bi_softmax_match(new_embeds: np.ndarray, existing_embeds: np.ndarray,
                     match_thresh: float) -> list[tuple[int, int | None]]:
    """Greedy one-to-one assignment on the mean of row- and column-softmaxed
    similarities; scores below the threshold become NEW (None)."""
    m = new_embeds.shape[0]
    if m < 1:
        raise InputError("bi_softmax_match needs at least one candidate")
    n = existing_embeds.shape[0] if existing_embeds.size else 0
    if n == 0:
        return [(i, None) for i in range(m)]
    sim = new_embeds.astype(np.float64) @ existing_embeds.astype(np.float64).T
    exp_r = np.exp(sim - sim.max(axis=1, keepdims=True))
    d2t = exp_r / exp_r.sum(axis=1, keepdims=True)
    exp_c = np.exp(sim - sim.max(axis=0, keepdims=True))
    t2d = exp_c / exp_c.sum(axis=0, keepdims=True)
    score = 0.5 * (d2t + t2d)
    result: dict[int, int | None] = {}
    used_new: set[int] = set()
    used_old: set[int] = set()
    for i, j in sorted(np.ndindex(m, n), key=lambda ij: -score[ij]):
        if i in used_new or j in used_old or score[i, j] < match_thresh:
            continue
        result[i] = j
        used_new.add(i)
        used_old.add(j)
    return [(i, result.get(i)) for i in range(m)]


def _clip_ranges(start: int, total: int, clip_len: int):
    for a in range(start, total, clip_len):
        yield range(a, min(a + clip_len, total))


def _decode_tracked(model: VideoSegmenter, pyramids: list[FeaturePyramid],
                    records: list[EntityRecord]) -> DecoderOutput:
    t_len = len(pyramids)
    inits = [pooled_query(rec.pool, t_len) for rec in records]
    queries = model.make_query_set(t_len, inits, [rec.id for rec in records],
                                   include_learnable=False)
    pools = [rec.pool.all_rows() for rec in records]
    return model.decode(pyramids, queries, pools)


def _track_chunk(model, pyramids, records, chunk, config, seed,
                 skip_feedback_frame0_text: bool) -> None:
    if not records:
        return
    out = _decode_tracked(model, pyramids, records)
    logits = out.mask_logits.data
    reid = out.reid_frames.data
    for local_t, frame in enumerate(chunk):
        for p, rec in enumerate(records):
            mask = logits_to_mask(logits[p, local_t])
            rec.record_mask(frame, mask)
            if not mask.any():
                continue
            rec.update_reid(reid[p, local_t])
            rec.last_seen = frame
            if (skip_feedback_frame0_text and frame == 0
                    and rec.pool.pinned.kind == "text"):
                continue
            rng = derive_rng(seed, "feedback", frame, rec.id)
            tokens = mask_to_prompt(mask, pyramids[local_t].f3,
                                    model.config.prompt_len, rng, rec.id, frame)
            if tokens is not None:
                rec.pool.add(tokens)


def run_prompt_specified(model: VideoSegmenter, frames: np.ndarray,
                         prompts: list[VisualPrompt | TextPrompt],
                         config: StreamConfig, seed: int = 0) -> list[EntityRecord]:
    """Track the prompted targets only; never detects, NMS-es or re-identifies."""
    if not prompts:
        raise InputError("prompt-specified inference needs at least one prompt")
    total = frames.shape[0]
    shape = frames.shape[2:]
    with T.no_grad():
        pyr0 = model.encode_video(frames[0:1])[0]
        records = []
        for prompt in prompts:
            rng = derive_rng(seed, "prompt-seed", prompt.target_id)
            tokens = model.encode_prompt(prompt, pyr0, rng)
            pool = MemoryPool(prompt.target_id, tokens, config.pool_capacity)
            records.append(EntityRecord(id=prompt.target_id, category_id=None,
                                        score=1.0, pool=pool, birth_frame=0))
        for chunk in _clip_ranges(0, total, config.clip_len):
            pyramids = model.encode_video(frames[chunk.start:chunk.stop])
            _track_chunk(model, pyramids, records, chunk, config, seed,
                         skip_feedback_frame0_text=True)
    for rec in records:
        rec.finalize(total, shape)
    return records


def run_category_specified(model: VideoSegmenter, frames: np.ndarray,
                           config: StreamConfig, seed: int = 0
                           ) -> tuple[list[EntityRecord], np.ndarray]:
    """Detect on frame 0, track every live entity via the prompt stream, and
    re-detect every detect_interval frames, birthing only unmatched objects.
    Returns (records, semantic maps [V,H,W] with -1 for void)."""
    if not model.config.categories:
        raise InputError("category-specified inference needs a category set")
    total = frames.shape[0]
    shape = frames.shape[2:]
    ids = itertools.count(1)
    records: list[EntityRecord] = []

    def birth(cand: Candidate, frame: int, pyramid: FeaturePyramid) -> None:
        new_id = next(ids)
        rng = derive_rng(seed, "birth", frame, new_id)
        tokens = mask_to_prompt(cand.mask, pyramid.f3, model.config.prompt_len,
                                rng, new_id, frame)
        if tokens is None:
            return
        pool = MemoryPool(new_id, tokens, config.pool_capacity)
        rec = EntityRecord(id=new_id, category_id=cand.category_id, score=cand.score,
                           pool=pool, birth_frame=frame)
        rec.record_mask(frame, cand.mask)
        rec.update_reid(cand.reid)
        rec.last_seen = frame
        records.append(rec)

    with T.no_grad():
        def detect_at(pyramid: FeaturePyramid) -> list[Candidate]:
            queries = model.make_query_set(1)
            det = model.decode([pyramid], queries, [])
            return detect_entities(det, config)

        pyr0 = model.encode_video(frames[0:1])[0]
        for cand in detect_at(pyr0):
            birth(cand, 0, pyr0)

        for chunk in _clip_ranges(1, total, config.clip_len):
            pyramids = model.encode_video(frames[chunk.start:chunk.stop])
            _track_chunk(model, pyramids, records, chunk, config, seed,
                         skip_feedback_frame0_text=False)
            for local_t, frame in enumerate(chunk):
                if frame % config.detect_interval != 0:
                    continue
                candidates = detect_at(pyramids[local_t])
                fresh = []
                for cand in candidates:
                    overlaps = any(
                        region_jaccard(cand.mask, rec.mask_at(frame, shape)) > config.nms_iou
                        for rec in records if rec.mask_at(frame, shape).any())
                    if not overlaps:
                        fresh.append(cand)
                if not fresh:
                    continue
                existing = [rec for rec in records if rec.reid_embed is not None]
                existing_mat = (np.stack([rec.reid_embed for rec in existing])
                                if existing else np.zeros((0, model.config.channels)))
                new_mat = np.stack([cand.reid for cand in fresh])
                for cand_idx, match in bi_softmax_match(new_mat, existing_mat,
                                                        config.match_thresh):
                    if match is None:
                        birth(fresh[cand_idx], frame, pyramids[local_t])

    for rec in records:
        rec.finalize(total, shape)
    semantic = semantic_maps_from_records(records, total, shape)
    return records, semantic


def semantic_maps_from_records(records: list[EntityRecord], total_frames: int,
                               shape) -> np.ndarray:
    """Per-pixel argmax over entity masks weighted by class score; void = -1."""
    maps = np.full((total_frames, *shape), -1, dtype=np.int32)
    for rec in sorted(records, key=lambda r: r.score):
        if rec.category_id is None:
            continue
        for frame in range(rec.birth_frame, total_frames):
            mask = rec.mask_at(frame, shape)
            maps[frame][mask] = rec.category_id
    return maps


def panoptic_from_records(records: list[EntityRecord], total_frames: int,
                          shape) -> tuple[np.ndarray, np.ndarray]:
    """(class map, id map) per frame with score-ordered overlap resolution."""
    cls_map = np.full((total_frames, *shape), -1, dtype=np.int32)
    id_map = np.zeros((total_frames, *shape), dtype=np.int32)
    for rec in sorted(records, key=lambda r: r.score):
        for frame in range(rec.birth_frame, total_frames):
            mask = rec.mask_at(frame, shape)
            if rec.category_id is not None:
                cls_map[frame][mask] = rec.category_id
            id_map[frame][mask] = rec.id
    return cls_map, id_map
