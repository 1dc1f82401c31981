"""Shared fixtures-in-plain-functions for model-level tests."""

import numpy as np

from promptseg.model import ModelConfig, VideoSegmenter
from promptseg.synthdata import SceneSpec, ShapeSpec, generate_scene


def tiny_config(**overrides) -> ModelConfig:
    base = dict(channels=16, num_queries=4, prompt_len=4, decoder_layers=2,
                categories=("circle", "square", "triangle", "sky", "grass"))
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=np.float32, **overrides) -> VideoSegmenter:
    return VideoSegmenter(tiny_config(**overrides), seed=seed, dtype=dtype)


def tiny_scene(frames=3, seed=11) -> tuple[np.ndarray, object]:
    spec = SceneSpec(seed=seed, frames=frames, height=64, width=64, shapes=[
        ShapeSpec(kind="circle", color="red", size=12, start=(24.0, 20.0), velocity=(0.5, 1.0)),
        ShapeSpec(kind="square", color="blue", size=10, start=(42.0, 44.0), velocity=(-0.5, -1.0)),
    ])
    return generate_scene(spec)


def constant_pyramid(channels, h1, value, dtype=np.float64):
    """A FeaturePyramid whose every feature vector equals `value` [C]."""
    from promptseg.encoders import FeaturePyramid
    from promptseg.tensor import Tensor
    value = np.asarray(value, dtype=dtype)
    scales = []
    for i in range(4):
        h = h1 * (2 ** i)
        feat = np.broadcast_to(value[:, None, None], (channels, h, h)).copy()
        scales.append(Tensor(feat))
    return FeaturePyramid(*scales)
