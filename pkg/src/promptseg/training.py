"""Three-stage training: image-level, short clips, longer clips.

Stage 2 freezes the backbone, stage 3 additionally freezes the pixel
decoder. Batches are drawn from a single synthetic task family at a time;
prompt modality follows the family (text for refvos, mask prompts
otherwise; stuff targets join for vss/vps/pvos). Large-scale jitter
augmentation applies in stage 1 only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import init_prompt_query
from .encoders import TextPrompt, VisualPrompt, visual_sampler
from .errors import ConfigError, InputError, NumericsError, TrainingDivergedError
from .losses import LossWeights, TargetEntity, area_majority_downsample, total_loss
from .model import VideoSegmenter
from .params import Adam
from .seeding import derive_rng
from .synthdata import GroundTruth

TASK_FAMILIES = ("vis", "vss", "vps", "vos", "refvos", "pvos")
_TEXT_FAMILIES = {"refvos"}
_STUFF_FAMILIES = {"vss", "vps", "pvos"}


@dataclass
class StageConfig:
    stage: int
    frames_per_sample: int | tuple[int, int]
    lr: float
    max_steps: int
    frozen: list[str] = field(default_factory=list)
    batch_size: int = 1

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError("stage must be 1, 2 or 3")
        if self.stage >= 2 and "backbone." not in self.frozen:
            self.frozen = list(self.frozen) + ["backbone."]
        if self.stage == 3 and "pixel_decoder." not in self.frozen:
            self.frozen = list(self.frozen) + ["pixel_decoder."]
        if isinstance(self.frames_per_sample, (list, tuple)):
            lo, hi = self.frames_per_sample
            if lo < 1 or hi < lo:
                raise ConfigError("bad frames_per_sample range")
            self.frames_per_sample = (int(lo), int(hi))
        elif self.frames_per_sample < 1:
            raise ConfigError("frames_per_sample must be >= 1")

    def sample_clip_len(self, rng: np.random.Generator) -> int:
        if isinstance(self.frames_per_sample, tuple):
            lo, hi = self.frames_per_sample
            return int(rng.integers(lo, hi + 1))
        return int(self.frames_per_sample)


def default_stages(steps=(300, 800, 300)) -> list[StageConfig]:
    return [
        StageConfig(stage=1, frames_per_sample=1, lr=1e-3, max_steps=steps[0]),
        StageConfig(stage=2, frames_per_sample=3, lr=5e-4, max_steps=steps[1]),
        StageConfig(stage=3, frames_per_sample=(5, 7), lr=5e-4, max_steps=steps[2]),
    ]


@dataclass
class TrainSample:
    frames: np.ndarray                      # [T, 3, H, W] float32
    targets: list[TargetEntity]
    prompts: list[VisualPrompt | TextPrompt]  # aligned with prompt_index
    family: str


def lsj_augment(clip: np.ndarray, masks: list[np.ndarray], rng: np.random.Generator,
                scale_range=(0.5, 4.0)) -> tuple[np.ndarray, list[np.ndarray]]:
    """Random rescale (nearest) then crop or zero-pad back to the input size."""
    t_len, _, h, w = clip.shape
    scale = float(rng.uniform(*scale_range))
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    idx_r = np.minimum((np.arange(nh) / scale).astype(int), h - 1)
    idx_c = np.minimum((np.arange(nw) / scale).astype(int), w - 1)
    big = clip[:, :, idx_r][:, :, :, idx_c]
    big_masks = [m[:, idx_r][:, :, idx_c] for m in masks]

    out = np.zeros_like(clip)
    out_masks = [np.zeros((t_len, h, w), dtype=bool) for _ in masks]
    if nh >= h:
        r0 = int(rng.integers(0, nh - h + 1))
    else:
        r0 = -int(rng.integers(0, h - nh + 1))
    if nw >= w:
        c0 = int(rng.integers(0, nw - w + 1))
    else:
        c0 = -int(rng.integers(0, w - nw + 1))

    src_r = slice(max(r0, 0), max(r0, 0) + min(h, nh))
    src_c = slice(max(c0, 0), max(c0, 0) + min(w, nw))
    dst_r = slice(max(-r0, 0), max(-r0, 0) + min(h, nh))
    dst_c = slice(max(-c0, 0), max(-c0, 0) + min(w, nw))
    out[:, :, dst_r, dst_c] = big[:, :, src_r, src_c]
    for mi, m in enumerate(big_masks):
        out_masks[mi][:, dst_r, dst_c] = m[:, src_r, src_c]
    return out, out_masks


def build_sample(frames: np.ndarray, gt: GroundTruth, family: str, clip_len: int,
                 rng: np.random.Generator, use_lsj: bool = False) -> TrainSample:
    if family not in TASK_FAMILIES:
        raise InputError(f"unknown task family {family!r}")
    v = frames.shape[0]
    clip_len = min(clip_len, v)
    start = int(rng.integers(0, v - clip_len + 1))
    clip = frames[start:start + clip_len].copy()
    entities = [e for e in gt.entities if e.is_thing or family in _STUFF_FAMILIES]
    mask_stacks = [np.stack([gt.entity_mask(e.entity_id, start + t) for t in range(clip_len)])
                   for e in entities]
    if use_lsj:
        clip, mask_stacks = lsj_augment(clip, mask_stacks, rng)

    targets: list[TargetEntity] = []
    prompts: list[VisualPrompt | TextPrompt] = []
    for ent, masks in zip(entities, mask_stacks):
        if not masks.any():
            continue
        masks_q = np.stack([area_majority_downsample(masks[t]) for t in range(clip_len)])
        prompt_index = None
        if family in _TEXT_FAMILIES:
            prompt_index = len(prompts)
            prompts.append(TextPrompt(target_id=ent.entity_id, text=ent.expression))
        elif masks[0].any():
            prompt_index = len(prompts)
            prompts.append(VisualPrompt.from_mask(ent.entity_id, masks[0]))
        targets.append(TargetEntity(entity_id=ent.entity_id, category_id=ent.category_id,
                                    masks_q=masks_q, prompt_index=prompt_index))
    if not targets:
        raise InputError("sampled a clip with no visible targets")
    return TrainSample(frames=clip, targets=targets, prompts=prompts, family=family)


class TaskSampler:
    """Draws batches where every sample comes from one task family."""

    def __init__(self, scenes: list[tuple[np.ndarray, GroundTruth]],
                 families: tuple[str, ...] = TASK_FAMILIES):
        if not scenes:
            raise InputError("sampler needs at least one scene")
        self.scenes = scenes
        self.families = tuple(families)

    def sample_batch(self, rng: np.random.Generator, batch_size: int, clip_len: int,
                     use_lsj: bool) -> list[TrainSample]:
        family = self.families[int(rng.integers(0, len(self.families)))]
        batch = []
        for _ in range(batch_size):
            frames, gt = self.scenes[int(rng.integers(0, len(self.scenes)))]
            batch.append(build_sample(frames, gt, family, clip_len, rng, use_lsj))
        return batch


def forward_sample(model: VideoSegmenter, sample: TrainSample,
                   rng: np.random.Generator, weights: LossWeights):
    pyramids = model.encode_video(sample.frames)
    pools, inits, ids = [], [], []
    for prompt in sample.prompts:
        if isinstance(prompt, VisualPrompt):
            tokens = visual_sampler(prompt, pyramids[0].f3, model.config.prompt_len, rng)
        else:
            tokens = model.encode_prompt(prompt, pyramids[0], rng)
        pools.append(tokens.tokens)
        inits.append(init_prompt_query(tokens.tokens, sample.frames.shape[0]))
        ids.append(prompt.target_id)
    queries = model.make_query_set(sample.frames.shape[0], inits, ids)
    out = model.decode(pyramids, queries, pools)
    return total_loss(out, sample.targets, weights)


def run_stage(model: VideoSegmenter, scenes: list[tuple[np.ndarray, GroundTruth]],
              stage: StageConfig, seed: int, weights: LossWeights | None = None,
              families: tuple[str, ...] = TASK_FAMILIES,
              log_every: int = 0) -> list[dict]:
    """Train one stage; returns one row per step with the loss breakdown."""
    weights = weights or LossWeights()
    model.store.freeze_by_prefix(stage.frozen)
    optimizer = Adam(model.store, lr=stage.lr)
    sampler = TaskSampler(scenes, families)
    rng = derive_rng(seed, "train-stage", stage.stage)
    rows: list[dict] = []
    for step in range(stage.max_steps):
        clip_len = stage.sample_clip_len(rng)
        batch = sampler.sample_batch(rng, stage.batch_size, clip_len,
                                     use_lsj=stage.stage == 1)
        optimizer.zero_grad()
        agg = {"mask": 0.0, "cls": 0.0, "reid": 0.0, "total": 0.0}
        loss_total = None
        try:
            for sample in batch:
                loss, parts = forward_sample(model, sample, rng, weights)
                loss_total = loss if loss_total is None else loss_total + loss
                for key in agg:
                    agg[key] += parts[key] / len(batch)
            loss_total = loss_total * (1.0 / len(batch))
            value = float(loss_total.item())
            if not np.isfinite(value):
                raise NumericsError("loss is non-finite")
            loss_total.backward()
        except NumericsError as err:
            raise TrainingDivergedError(step, str(err)) from err
        optimizer.step()
        rows.append({"step": step, **agg})
        if log_every and step % log_every == 0:
            print(f"stage {stage.stage} step {step}: total {agg['total']:.4f} "
                  f"(mask {agg['mask']:.4f} cls {agg['cls']:.4f} reid {agg['reid']:.4f})")
    return rows
