"""The full segmenter: encoders, decoder and query embeddings in one store."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecoderOutput, MaskDecoder, QuerySet, init_prompt_query
from .encoders import (FeaturePyramid, ImageEncoder, Lang2ImgCA, PromptTokens,
                       TextEmbedder, TextPrompt, VisualPrompt, visual_sampler)
from .errors import ConfigError, InputError
from .params import ParamStore, load_into, save_checkpoint
from .seeding import derive_rng
from .synthdata import DEFAULT_CATEGORIES
from .tensor import Tensor


@dataclass
class ModelConfig:
    channels: int = 32
    text_channels: int | None = None          # default: 2 * channels
    num_queries: int = 16
    prompt_len: int = 8                       # l*
    decoder_layers: int = 9
    ffn_dim: int | None = None                # default: 4 * channels
    categories: tuple[str, ...] = tuple(DEFAULT_CATEGORIES)
    cls_temperature: float = 0.07
    sepsa_mode: str = "per_entity"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.text_channels is None:
            self.text_channels = 2 * self.channels
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.channels
        if self.channels % 4 != 0:
            raise ConfigError("channels must be divisible by 4 (positional encoding)")
        if self.num_queries < 1 or self.prompt_len < 1 or self.decoder_layers < 1:
            raise ConfigError("num_queries, prompt_len and decoder_layers must be >= 1")
        if not self.categories:
            raise ConfigError("at least one category is required")
        self.categories = tuple(self.categories)

    def to_json(self) -> dict:
        return {
            "channels": self.channels, "text_channels": self.text_channels,
            "num_queries": self.num_queries, "prompt_len": self.prompt_len,
            "decoder_layers": self.decoder_layers, "ffn_dim": self.ffn_dim,
            "categories": list(self.categories),
            "cls_temperature": self.cls_temperature, "sepsa_mode": self.sepsa_mode,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: (tuple(v) if k == "categories" else v)
                      for k, v in obj.items() if k in known})


class VideoSegmenter:
    """Prompted video segmentation model over the hand-rolled tensor core."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = ParamStore()
        rng = derive_rng(seed, "model-init")
        c = config.channels
        self.image_encoder = ImageEncoder(self.store, c, rng, dtype)
        self.text_embed = TextEmbedder(self.store, config.text_channels,
                                       config.prompt_len, dtype)
        self.lang2img = Lang2ImgCA(self.store, config.text_channels, c, rng, dtype)
        self.decoder = MaskDecoder(self.store, c, config.decoder_layers, config.ffn_dim,
                                   rng, dtype, config.ln_eps, config.sepsa_mode,
                                   config.cls_temperature)
        self.query_content = self.store.add(
            "queries.content", rng.standard_normal((config.num_queries, c)).astype(dtype))
        self.query_pos = self.store.add(
            "queries.pos", (rng.standard_normal((config.num_queries, c)) * 0.1).astype(dtype))

    # -- encoders ------------------------------------------------------------

    def encode_video(self, frames: np.ndarray) -> list[FeaturePyramid]:
        return self.image_encoder.encode(frames, dtype=self.dtype)

    def encode_prompt(self, prompt: VisualPrompt | TextPrompt,
                      pyramid0: FeaturePyramid, rng: np.random.Generator) -> PromptTokens:
        if isinstance(prompt, VisualPrompt):
            tokens = visual_sampler(prompt, pyramid0.f3, self.config.prompt_len, rng)
            tokens.source_frame = pyramid0.frame_index
            return tokens
        if isinstance(prompt, TextPrompt):
            prompt.tokens = self.text_embed.token_ids(prompt.text)
            emb = self.text_embed.embed(prompt.text)
            return self.lang2img.forward(emb, pyramid0, target_id=prompt.target_id)
        raise InputError(f"unsupported prompt type {type(prompt).__name__}")

    def category_embeddings(self) -> Tensor:
        """[K, C]: mean non-pad stub embedding of each category name, projected."""
        rows = []
        for name in self.config.categories:
            ids = self.text_embed.token_ids(name)
            non_pad = [i for i, tok in enumerate(ids) if tok != self.text_embed.pad_id]
            emb = self.text_embed.embed(name)
            picked = T.index_select(emb, 0, non_pad) if non_pad else emb
            rows.append(T.reduce_mean(picked, axis=0))
        pooled = T.stack(rows, axis=0)
        return self.lang2img.project(pooled)

    # -- query assembly and decoding -----------------------------------------

    def learnable_queries(self, clip_len: int) -> Tensor:
        base = self.query_content.tensor + self.query_pos.tensor
        n, c = base.shape
        return T.broadcast_to(T.reshape(base, (n, 1, c)), (n, clip_len, c))

    def make_query_set(self, clip_len: int, prompt_inits: list[Tensor] | None = None,
                       target_ids: list[int] | None = None,
                       include_learnable: bool = True) -> QuerySet:
        prompt_inits = prompt_inits or []
        target_ids = target_ids or []
        c = self.config.channels
        if include_learnable:
            learnable = self.learnable_queries(clip_len)
        else:
            learnable = Tensor(np.zeros((0, clip_len, c), dtype=self.dtype))
        prompt = (T.stack(prompt_inits, axis=0) if prompt_inits
                  else Tensor(np.zeros((0, clip_len, c), dtype=self.dtype)))
        return QuerySet(learnable=learnable, prompt=prompt,
                        prompt_target_ids=list(target_ids))

    def decode(self, pyramids: list[FeaturePyramid], queries: QuerySet,
               pools: list[Tensor] | None = None, **kwargs) -> DecoderOutput:
        return self.decoder.decode(pyramids, queries, pools,
                                   self.category_embeddings(), **kwargs)

    def prompt_query_from_pool(self, pool_tokens: Tensor, clip_len: int) -> Tensor:
        return init_prompt_query(pool_tokens, clip_len)

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.store)

    def load(self, path) -> None:
        load_into(path, self.store)
