"""Image and prompt encoders.

The image encoder is a toy backbone (stride-2 stem plus four stride-2 conv
stages, ReLU) feeding a top-down pixel decoder (1x1 lateral add, nearest 2x
upsample, 3x3 smooth) that emits a four-scale pyramid at 1/32, 1/16, 1/8 and
1/4 of the input. Visual prompts are encoded by sampling point features from
the 1/8 scale; text prompts go through a frozen hash-table embedding stub and
one cross-attention layer onto the flattened 1/32+1/16+1/8 features.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InputError, ShapeError
from .params import ParamStore, he_normal, xavier_uniform
from .tensor import Tensor

STRIDES = (32, 16, 8, 4)  # F1..F4
F3_STRIDE = 8


@dataclass
class FeaturePyramid:
    """Per-frame multi-scale embeddings; f1 is coarsest (1/32), f4 finest (1/4)."""
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    frame_index: int = 0

    def scales(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.f1, self.f2, self.f3, self.f4)

    def validate(self) -> None:
        c = self.f1.shape[0]
        h1, w1 = self.f1.shape[1:]
        for i, f in enumerate(self.scales()):
            factor = 2 ** i
            if f.shape != (c, h1 * factor, w1 * factor):
                raise ShapeError("pyramid scales must double per level with shared channels")


@dataclass
class VisualPrompt:
    target_id: int
    pixels: np.ndarray          # [L, 3] int rows of (row, col, segment_id)
    kind: str = "point"         # point | box | mask | scribble

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 3)
        if len(self.pixels) == 0:
            raise InputError("visual prompt needs at least one pixel")

    @classmethod
    def from_points(cls, target_id: int, points, segment_id: int = 1) -> "VisualPrompt":
        px = [(r, c, segment_id) for r, c in points]
        return cls(target_id, np.asarray(px), kind="point")

    @classmethod
    def from_mask(cls, target_id: int, mask: np.ndarray, segment_id: int = 1,
                  kind: str = "mask") -> "VisualPrompt":
        coords = np.argwhere(np.asarray(mask, dtype=bool))
        if len(coords) == 0:
            raise InputError("visual prompt mask is empty")
        px = np.concatenate([coords, np.full((len(coords), 1), segment_id)], axis=1)
        return cls(target_id, px, kind=kind)

    @classmethod
    def from_box(cls, target_id: int, r0: int, c0: int, r1: int, c1: int,
                 segment_id: int = 1) -> "VisualPrompt":
        if r1 < r0 or c1 < c0:
            raise InputError("box corners are inverted")
        rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        px = np.stack([rr.reshape(-1), cc.reshape(-1),
                       np.full(rr.size, segment_id)], axis=1)
        return cls(target_id, px, kind="box")


@dataclass
class TextPrompt:
    target_id: int
    text: str
    kind: str = "expression"    # category_name | expression
    tokens: list[int] = field(default_factory=list)


@dataclass
class PromptTokens:
    target_id: int
    tokens: Tensor              # [l*, C]
    source_frame: int
    kind: str                   # visual | text


_POS_CACHE: dict = {}


def sinusoidal_positions(h: int, w: int, channels: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sine/cosine position features, [h*w, channels]."""
    key = (h, w, channels, np.dtype(dtype).name)
    cached = _POS_CACHE.get(key)
    if cached is not None:
        return cached
    if channels % 4 != 0:
        raise ShapeError("positional encoding needs channels divisible by 4")
    half = channels // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half // 2) / max(half // 2, 1))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    parts = []
    for grid in (ys, xs):
        ang = grid.reshape(-1, 1) * freqs.reshape(1, -1)
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    pos = np.concatenate(parts, axis=1).astype(dtype)
    _POS_CACHE[key] = pos
    return pos


def _flatten_hw(feat: Tensor) -> Tensor:
    c, h, w = feat.shape
    return T.reshape(T.transpose(feat, (1, 2, 0)), (h * w, c))


class ImageEncoder:
    """Toy backbone + pixel decoder producing the 4-scale pyramid."""

    def __init__(self, store: ParamStore, channels: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.channels = channels
        c = channels
        self.stem_w = store.add("backbone.stem.w", he_normal(rng, (c, 3, 3, 3), 27, dtype))
        self.stem_b = store.add("backbone.stem.b", np.zeros(c, dtype=dtype))
        self.stage_w, self.stage_b = [], []
        for i in range(4):
            self.stage_w.append(store.add(f"backbone.stage{i + 1}.w",
                                          he_normal(rng, (c, c, 3, 3), 9 * c, dtype)))
            self.stage_b.append(store.add(f"backbone.stage{i + 1}.b", np.zeros(c, dtype=dtype)))
        self.lat_w, self.lat_b, self.smooth_w, self.smooth_b = [], [], [], []
        for i in range(4):  # 1 = coarsest (1/32) .. 4 = finest (1/4)
            self.lat_w.append(store.add(f"pixel_decoder.lateral{i + 1}.w",
                                        xavier_uniform(rng, (c, c, 1, 1), c, c, dtype)))
            self.lat_b.append(store.add(f"pixel_decoder.lateral{i + 1}.b", np.zeros(c, dtype=dtype)))
            self.smooth_w.append(store.add(f"pixel_decoder.smooth{i + 1}.w",
                                           xavier_uniform(rng, (c, c, 3, 3), 9 * c, 9 * c, dtype)))
            self.smooth_b.append(store.add(f"pixel_decoder.smooth{i + 1}.b", np.zeros(c, dtype=dtype)))

    def encode(self, frames: np.ndarray | Tensor, dtype=np.float32) -> list[FeaturePyramid]:
        """frames: [T, 3, H, W] with H, W multiples of 32 -> one pyramid per frame."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=dtype))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError("encode expects [T, 3, H, W] frames")
        t_frames, _, h, w = x.shape
        if h % 32 or w % 32:
            raise ShapeError(f"frame size {h}x{w} is not a multiple of 32")
        x = T.relu(T.conv2d(x, self.stem_w.tensor, self.stem_b.tensor, stride=2, padding=1))
        taps = []
        for wgt, bias in zip(self.stage_w, self.stage_b):
            x = T.relu(T.conv2d(x, wgt.tensor, bias.tensor, stride=2, padding=1))
            taps.append(x)  # strides 4, 8, 16, 32
        laterals = []
        for i, tap in enumerate(reversed(taps)):  # coarsest first
            laterals.append(T.conv2d(tap, self.lat_w[i].tensor, self.lat_b[i].tensor))
        tops = [laterals[0]]
        for i in range(1, 4):
            tops.append(laterals[i] + T.upsample_nearest2(tops[-1]))
        outs = [T.conv2d(top, self.smooth_w[i].tensor, self.smooth_b[i].tensor, padding=1)
                for i, top in enumerate(tops)]
        pyramids = []
        for t in range(t_frames):
            per_frame = [T.reshape(T.index_select(o, 0, [t]), o.shape[1:]) for o in outs]
            pyramids.append(FeaturePyramid(*per_frame, frame_index=t))
        return pyramids


def visual_sampler(prompt: VisualPrompt, f3: Tensor, l_star: int,
                   rng: np.random.Generator, stride: int = F3_STRIDE) -> PromptTokens:
    """Sample l* prompt pixels uniformly with replacement and gather their
    1/8-scale features; segment ids ride along but do not bias sampling."""
    if l_star < 1:
        raise InputError("l_star must be >= 1")
    c, h3, w3 = f3.shape
    rows, cols = prompt.pixels[:, 0], prompt.pixels[:, 1]
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= h3 * stride or cols.max() >= w3 * stride:
        raise InputError("prompt pixel outside the image bounds")
    picks = rng.integers(0, len(prompt.pixels), size=l_star)
    grid = (rows[picks] // stride) * w3 + (cols[picks] // stride)
    tokens = T.index_select(_flatten_hw(f3), 0, grid)
    return PromptTokens(target_id=prompt.target_id, tokens=tokens,
                        source_frame=0, kind="visual")


class TextEmbedder:
    """Frozen deterministic text stub: crc32 token hashing into a fixed table."""

    VOCAB_SIZE = 4099  # prime, collision-free over the toy vocabulary
    _TABLE_SEED = 0x7E57AB1E  # independent of the run seed: same stub everywhere

    def __init__(self, store: ParamStore, text_channels: int, l_star: int,
                 dtype=np.float32):
        self.text_channels = text_channels
        self.l_star = l_star
        rng = np.random.default_rng(self._TABLE_SEED)
        table = rng.standard_normal((self.VOCAB_SIZE + 1, text_channels)).astype(dtype)
        self.table = store.add("text_embed.table", table, always_frozen=True)

    @property
    def pad_id(self) -> int:
        return self.VOCAB_SIZE

    def token_ids(self, text: str) -> list[int]:
        ids = [zlib.crc32(tok.encode("utf-8")) % self.VOCAB_SIZE
               for tok in text.split()]
        ids = ids[:self.l_star]
        ids += [self.pad_id] * (self.l_star - len(ids))
        return ids

    def embed(self, text: str) -> Tensor:
        return T.index_select(self.table.tensor, 0, self.token_ids(text))


class Lang2ImgCA:
    """One cross-attention layer from projected text tokens onto image features."""

    def __init__(self, store: ParamStore, text_channels: int, channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        c = channels
        self.t2v = store.add("lang2img.t2v.w",
                             xavier_uniform(rng, (text_channels, c), text_channels, c, dtype))
        self.wq = store.add("lang2img.wq", xavier_uniform(rng, (c, c), c, c, dtype))
        self.wk = store.add("lang2img.wk", xavier_uniform(rng, (c, c), c, c, dtype))
        self.wv = store.add("lang2img.wv", xavier_uniform(rng, (c, c), c, c, dtype))

    def project(self, text_emb: Tensor) -> Tensor:
        return T.matmul(text_emb, self.t2v.tensor)

    def forward(self, text_emb: Tensor, pyramid: FeaturePyramid,
                target_id: int = 0) -> PromptTokens:
        """Project text to the visual width then attend over scales 1-3 (never F4)."""
        q0 = self.project(text_emb)
        feats, pos = [], []
        for f in (pyramid.f1, pyramid.f2, pyramid.f3):
            c, h, w = f.shape
            feats.append(_flatten_hw(f))
            pos.append(sinusoidal_positions(h, w, c, dtype=f.data.dtype))
        keys_in = T.concat(feats, 0)
        pos_all = Tensor(np.concatenate(pos, axis=0))
        attn = T.attention(T.matmul(q0, self.wq.tensor),
                           T.matmul(keys_in + pos_all, self.wk.tensor),
                           T.matmul(keys_in, self.wv.tensor))
        out = q0 + attn
        return PromptTokens(target_id=target_id, tokens=out, source_frame=pyramid.frame_index,
                            kind="text")
