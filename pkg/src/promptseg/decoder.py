"""Unified video mask decoder.

Two query streams (learnable and prompt) run through the same weights; per
layer: prompt cross-attention (prompt stream only, keys strictly from the
target's own token pool), per-frame image cross-attention over a scale
chosen round-robin from the coarsest three, separated self-attention over
time-flattened groups, then an FFN. Every sublayer is residual + post-LN.

Streams are never concatenated before an op, only their outputs are, so the
learnable stream's numbers are bit-identical with and without prompt
queries, and prompt outputs are invariant to other targets' pools.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import FeaturePyramid, PromptTokens, sinusoidal_positions
from .errors import InputError, ShapeError
from .params import ParamStore, xavier_uniform
from .tensor import Tensor

SEPSA_MODES = ("group", "per_entity", "per_entity_plus_learnable")


@dataclass
class QuerySet:
    learnable: Tensor                 # [N, T, C]
    prompt: Tensor                    # [N_p, T, C]
    prompt_target_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.prompt.shape[0] != len(self.prompt_target_ids):
            raise ShapeError("prompt rows must align one-to-one with target ids")
        if self.learnable.shape[1:] != self.prompt.shape[1:]:
            raise ShapeError("learnable and prompt streams disagree on [T, C]")


@dataclass
class LayerOutput:
    mask_logits: Tensor               # [N+N_p, T, H/4, W/4]
    class_logits: Tensor              # [N+N_p, K]
    reid_embed: Tensor                # [N+N_p, C]
    reid_frames: Tensor               # [N+N_p, T, C]


@dataclass
class DecoderOutput:
    mask_logits: Tensor
    class_logits: Tensor
    reid_embed: Tensor
    reid_frames: Tensor
    per_layer_aux: list[LayerOutput]
    n_learnable: int
    prompt_target_ids: list[int]


def init_prompt_query(tokens: PromptTokens | Tensor, clip_len: int) -> Tensor:
    """Mean of the prompt token rows, repeated over the clip: [T, C]."""
    t = tokens.tokens if isinstance(tokens, PromptTokens) else tokens
    if t.ndim != 2 or t.shape[0] < 1:
        raise InputError("prompt token set must be a non-empty [l, C] block")
    mean = T.reduce_mean(t, axis=0, keepdims=True)
    return T.broadcast_to(mean, (clip_len, t.shape[1]))


def proca(q_star: Tensor, pool: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
          ln_gamma: Tensor | None = None, ln_beta: Tensor | None = None,
          eps: float = 1e-5, residual: bool = True) -> Tensor:
    """Entity-wise prompt cross-attention; keys/values are the target's own
    pool only. `residual=False` is a test mode returning the raw attention."""
    if pool.shape[0] < 1:
        raise InputError("prompt cross-attention needs a non-empty pool")
    attn = T.attention(T.matmul(q_star, wq), T.matmul(pool, wk), T.matmul(pool, wv))
    if not residual:
        return attn
    return T.layer_norm(q_star + attn, ln_gamma, ln_beta, eps)


def scale_for_layer(layer_idx: int) -> int:
    """Round-robin over the coarsest three scales: layers 0,1,2 -> F1,F2,F3."""
    return layer_idx % 3


class DecoderLayer:
    def __init__(self, store: ParamStore, prefix: str, channels: int, ffn_dim: int,
                 rng: np.random.Generator, dtype=np.float32, ln_eps: float = 1e-5):
        c = channels
        self.eps = ln_eps

        def attn_block(name):
            block = {}
            for proj in ("wq", "wk", "wv"):
                block[proj] = store.add(f"{prefix}.{name}.{proj}",
                                        xavier_uniform(rng, (c, c), c, c, dtype))
            block["ln_g"] = store.add(f"{prefix}.{name}.ln.g", np.ones(c, dtype=dtype))
            block["ln_b"] = store.add(f"{prefix}.{name}.ln.b", np.zeros(c, dtype=dtype))
            return block

        self.proca = attn_block("proca")
        self.cross = attn_block("cross")
        self.sepsa = attn_block("sepsa")
        self.ffn_w1 = store.add(f"{prefix}.ffn.w1", xavier_uniform(rng, (c, ffn_dim), c, ffn_dim, dtype))
        self.ffn_b1 = store.add(f"{prefix}.ffn.b1", np.zeros(ffn_dim, dtype=dtype))
        self.ffn_w2 = store.add(f"{prefix}.ffn.w2", xavier_uniform(rng, (ffn_dim, c), ffn_dim, c, dtype))
        self.ffn_b2 = store.add(f"{prefix}.ffn.b2", np.zeros(c, dtype=dtype))
        self.ffn_ln_g = store.add(f"{prefix}.ffn.ln.g", np.ones(c, dtype=dtype))
        self.ffn_ln_b = store.add(f"{prefix}.ffn.ln.b", np.zeros(c, dtype=dtype))

    def run_proca(self, prompt: Tensor, pools: list[Tensor]) -> Tensor:
        rows = []
        for i in range(prompt.shape[0]):
            qi = T.reshape(T.index_select(prompt, 0, [i]), prompt.shape[1:])
            rows.append(proca(qi, pools[i], self.proca["wq"].tensor,
                              self.proca["wk"].tensor, self.proca["wv"].tensor,
                              self.proca["ln_g"].tensor, self.proca["ln_b"].tensor,
                              eps=self.eps))
        return T.stack(rows, axis=0)

    def run_cross(self, stream: Tensor, frame_keys: list[tuple[Tensor, Tensor, Tensor]]) -> Tensor:
        """Per-frame cross-attention; frame_keys[t] = (keys_plus_pos, values, _)."""
        m, t_len, c = stream.shape
        per_frame = []
        for t in range(t_len):
            qt = T.reshape(T.index_select(stream, 1, [t]), (m, c))
            keys_in, vals_in = frame_keys[t][0], frame_keys[t][1]
            attn = T.attention(T.matmul(qt, self.cross["wq"].tensor),
                               T.matmul(keys_in, self.cross["wk"].tensor),
                               T.matmul(vals_in, self.cross["wv"].tensor))
            per_frame.append(T.layer_norm(qt + attn, self.cross["ln_g"].tensor,
                                          self.cross["ln_b"].tensor, self.eps))
        return T.stack(per_frame, axis=1)

    def _self_attend(self, flat: Tensor, keys: Tensor, mask: np.ndarray | None) -> Tensor:
        attn = T.attention(T.matmul(flat, self.sepsa["wq"].tensor),
                           T.matmul(keys, self.sepsa["wk"].tensor),
                           T.matmul(keys, self.sepsa["wv"].tensor), mask=mask)
        return T.layer_norm(flat + attn, self.sepsa["ln_g"].tensor,
                            self.sepsa["ln_b"].tensor, self.eps)

    def run_sepsa(self, learnable: Tensor, prompt: Tensor, target_ids: list[int],
                  mode: str) -> tuple[Tensor, Tensor]:
        """Self-attention run independently per group on time-flattened tokens."""
        if mode not in SEPSA_MODES:
            raise InputError(f"unknown SepSA mode {mode!r}")
        n, t_len, c = learnable.shape
        n_p = prompt.shape[0]
        new_learnable = learnable
        if n > 0:
            flat = T.reshape(learnable, (n * t_len, c))
            new_learnable = T.reshape(self._self_attend(flat, flat, None), (n, t_len, c))
        new_prompt = prompt
        if n_p > 0:
            flat_p = T.reshape(prompt, (n_p * t_len, c))
            if mode == "group":
                new_prompt = T.reshape(self._self_attend(flat_p, flat_p, None), (n_p, t_len, c))
            else:
                ids = np.repeat(np.asarray(target_ids), t_len)
                entity_mask = ids[:, None] == ids[None, :]
                if mode == "per_entity":
                    new_prompt = T.reshape(self._self_attend(flat_p, flat_p, entity_mask),
                                           (n_p, t_len, c))
                else:
                    if n == 0:
                        raise InputError("per_entity_plus_learnable needs learnable queries")
                    keys = T.concat([flat_p, T.reshape(learnable, (n * t_len, c))], axis=0)
                    mask = np.concatenate(
                        [entity_mask, np.ones((n_p * t_len, n * t_len), dtype=bool)], axis=1)
                    new_prompt = T.reshape(self._self_attend(flat_p, keys, mask),
                                           (n_p, t_len, c))
        return new_learnable, new_prompt

    def run_ffn(self, stream: Tensor) -> Tensor:
        hidden = T.relu(T.linear(stream, self.ffn_w1.tensor, self.ffn_b1.tensor))
        out = T.linear(hidden, self.ffn_w2.tensor, self.ffn_b2.tensor)
        return T.layer_norm(stream + out, self.ffn_ln_g.tensor, self.ffn_ln_b.tensor, self.eps)


class DecoderHeads:
    """Mask coefficients, cosine classifier and ReID projection."""

    def __init__(self, store: ParamStore, channels: int, rng: np.random.Generator,
                 dtype=np.float32):
        c = channels

        def mlp_params(name, depth, bias=True):
            layers = []
            for i in range(depth):
                w = store.add(f"heads.{name}.w{i + 1}", xavier_uniform(rng, (c, c), c, c, dtype))
                b = store.add(f"heads.{name}.b{i + 1}", np.zeros(c, dtype=dtype)) if bias else None
                layers.append((w, b))
            return layers

        self.f_mask = mlp_params("mask", 3)
        # bias-free so classification is exactly invariant to positive
        # rescaling of the queries (cosine eats the remaining scale)
        self.f_cls = mlp_params("cls", 2, bias=False)
        self.f_reid = mlp_params("reid", 2)

    @staticmethod
    def _run_mlp(x: Tensor, layers) -> Tensor:
        return T.mlp(x, [(w.tensor, b.tensor if b is not None else None) for w, b in layers])

    def mask_logits_from_coeffs(self, coeffs: Tensor, f4_seq: list[Tensor]) -> Tensor:
        """logits[q, t] = coeffs[q, t] . F4^t per pixel: [Q, T, h4, w4]."""
        q, t_len, c = coeffs.shape
        frames = []
        for t in range(t_len):
            f4 = f4_seq[t]
            if f4.shape[0] != c:
                raise ShapeError("mask coefficients and F4 disagree on channels")
            ct = T.reshape(T.index_select(coeffs, 1, [t]), (q, c))
            flat = T.reshape(f4, (c, f4.shape[1] * f4.shape[2]))
            frames.append(T.reshape(T.matmul(ct, flat), (q, f4.shape[1], f4.shape[2])))
        return T.stack(frames, axis=1)

    def predict_masks(self, queries: Tensor, f4_seq: list[Tensor]) -> Tensor:
        return self.mask_logits_from_coeffs(self._run_mlp(queries, self.f_mask), f4_seq)

    def classify(self, queries: Tensor, p_cate: Tensor, temperature: float) -> Tensor:
        """Cosine similarity of f_cls(time-mean query) against category rows, scaled 1/tau."""
        if temperature <= 0:
            raise InputError("classification temperature must be positive")
        qbar = T.reduce_mean(queries, axis=1)
        emb = self._run_mlp(qbar, self.f_cls)
        return T.mul(cosine_matrix(emb, p_cate), Tensor(np.asarray(1.0 / temperature,
                                                                   dtype=emb.data.dtype)))

    def reid(self, queries: Tensor) -> tuple[Tensor, Tensor]:
        """(clip-level [Q, C], per-frame [Q, T, C]) ReID embeddings."""
        per_frame = self._run_mlp(queries, self.f_reid)
        clip = self._run_mlp(T.reduce_mean(queries, axis=1), self.f_reid)
        return clip, per_frame


def cosine_matrix(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise cosine similarity matrix [A, B]; eps guards zero norms."""
    an = T.div(a, T.sqrt(T.reduce_sum(T.mul(a, a), axis=-1, keepdims=True) + eps * eps))
    bn = T.div(b, T.sqrt(T.reduce_sum(T.mul(b, b), axis=-1, keepdims=True) + eps * eps))
    return T.matmul(an, T.transpose(bn, (1, 0)))


class MaskDecoder:
    def __init__(self, store: ParamStore, channels: int, num_layers: int, ffn_dim: int,
                 rng: np.random.Generator, dtype=np.float32, ln_eps: float = 1e-5,
                 sepsa_mode: str = "per_entity", cls_temperature: float = 0.07):
        if sepsa_mode not in SEPSA_MODES:
            raise InputError(f"unknown SepSA mode {sepsa_mode!r}")
        self.channels = channels
        self.sepsa_mode = sepsa_mode
        self.cls_temperature = cls_temperature
        self.layers = [DecoderLayer(store, f"decoder.layer{i}", channels, ffn_dim,
                                    rng, dtype, ln_eps) for i in range(num_layers)]
        self.heads = DecoderHeads(store, channels, rng, dtype)

    def _frame_keys(self, pyramids: list[FeaturePyramid]) -> list[list[tuple]]:
        """frame -> scale -> (keys+pos, values) for the coarsest three scales."""
        prepared = []
        for pyr in pyramids:
            per_scale = []
            for f in (pyr.f1, pyr.f2, pyr.f3):
                c, h, w = f.shape
                flat = T.reshape(T.transpose(f, (1, 2, 0)), (h * w, c))
                pos = Tensor(sinusoidal_positions(h, w, c, dtype=f.data.dtype))
                per_scale.append((flat + pos, flat))
            prepared.append(per_scale)
        return prepared

    def _stream_heads(self, stream: Tensor, f4_seq, p_cate) -> LayerOutput:
        masks = self.heads.predict_masks(stream, f4_seq)
        cls = self.heads.classify(stream, p_cate, self.cls_temperature)
        reid_clip, reid_frames = self.heads.reid(stream)
        return LayerOutput(masks, cls, reid_clip, reid_frames)

    def _layer_output(self, learnable, prompt, f4_seq, p_cate) -> LayerOutput:
        outs = []
        if learnable.shape[0] > 0:
            outs.append(self._stream_heads(learnable, f4_seq, p_cate))
        if prompt.shape[0] > 0:
            outs.append(self._stream_heads(prompt, f4_seq, p_cate))
        if not outs:
            raise ShapeError("decode needs at least one query")
        if len(outs) == 1:
            return outs[0]
        first, second = outs
        return LayerOutput(
            mask_logits=T.concat([first.mask_logits, second.mask_logits], axis=0),
            class_logits=T.concat([first.class_logits, second.class_logits], axis=0),
            reid_embed=T.concat([first.reid_embed, second.reid_embed], axis=0),
            reid_frames=T.concat([first.reid_frames, second.reid_frames], axis=0),
        )

    def decode(self, pyramids: list[FeaturePyramid], queries: QuerySet,
               pools: list[Tensor] | None, p_cate: Tensor, *,
               disable_proca: bool = False, sepsa_mode: str | None = None) -> DecoderOutput:
        n, t_len, _ = queries.learnable.shape
        n_p = queries.prompt.shape[0]
        if len(pyramids) != t_len:
            raise InputError(f"got {len(pyramids)} pyramids for a {t_len}-frame clip")
        if n_p > 0 and not disable_proca:
            if pools is None or len(pools) != n_p:
                raise InputError("decode needs one token pool per prompt query")
            for pool in pools:
                if pool.shape[0] < 1:
                    raise InputError("decode received an empty prompt pool")
        mode = sepsa_mode or self.sepsa_mode
        frame_keys = self._frame_keys(pyramids)
        f4_seq = [pyr.f4 for pyr in pyramids]
        learnable, prompt = queries.learnable, queries.prompt
        aux: list[LayerOutput] = []
        for li, layer in enumerate(self.layers):
            if n_p > 0 and not disable_proca:
                prompt = layer.run_proca(prompt, pools)
            scale = scale_for_layer(li)
            per_frame = [fk[scale] for fk in frame_keys]
            if n > 0:
                learnable = layer.run_cross(learnable, per_frame)
            if n_p > 0:
                prompt = layer.run_cross(prompt, per_frame)
            learnable, prompt = layer.run_sepsa(learnable, prompt,
                                                queries.prompt_target_ids, mode)
            if n > 0:
                learnable = layer.run_ffn(learnable)
            if n_p > 0:
                prompt = layer.run_ffn(prompt)
            aux.append(self._layer_output(learnable, prompt, f4_seq, p_cate))
        final = aux[-1]
        return DecoderOutput(mask_logits=final.mask_logits, class_logits=final.class_logits,
                             reid_embed=final.reid_embed, reid_frames=final.reid_frames,
                             per_layer_aux=aux, n_learnable=n,
                             prompt_target_ids=list(queries.prompt_target_ids))
