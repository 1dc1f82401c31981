import numpy as np
import pytest

from promptseg import inference as inf
from promptseg.decoder import DecoderOutput, init_prompt_query
from promptseg.encoders import PromptTokens, TextPrompt, VisualPrompt
from promptseg.errors import ConfigError, InputError
from promptseg.inference import (Candidate, EntityRecord, MemoryPool, StreamConfig,
                                 bi_softmax_match, bilinear_upsample, detect_entities,
                                 mask_to_prompt, pooled_query, run_category_specified,
                                 run_prompt_specified)
from promptseg.rle import rle_decode
from promptseg.tensor import Tensor

from helpers import tiny_model, tiny_scene


def _tokens(target, rows, frame=0, kind="visual"):
    return PromptTokens(target_id=target, tokens=Tensor(np.asarray(rows, dtype=np.float64)),
                        source_frame=frame, kind=kind)


def test_stream_config_validation():
    StreamConfig()
    with pytest.raises(ConfigError):
        StreamConfig(detect_interval=0)
    with pytest.raises(ConfigError):
        StreamConfig(score_thresh=1.5)


def test_memory_pool_bounded_and_pinned():
    pool = MemoryPool(1, _tokens(1, [[1.0, 0.0]]), capacity=3)
    for i in range(6):
        pool.add(_tokens(1, [[float(i + 2), 0.0]], frame=i + 1))
    assert len(pool) == 4  # pinned + capacity
    rows = pool.all_rows().data
    np.testing.assert_array_equal(rows[0], [1.0, 0.0])  # pinned survives
    np.testing.assert_array_equal(rows[1], [5.0, 0.0])  # oldest non-pinned evicted


def test_pooled_query_arithmetic():
    pool = MemoryPool(1, _tokens(1, [[2.0, 0.0]]), capacity=4)
    q1 = pooled_query(pool, 3)
    np.testing.assert_allclose(q1.data, np.broadcast_to([2.0, 0.0], (3, 2)))
    pool.add(_tokens(1, [[0.0, 2.0]]))
    q2 = pooled_query(pool, 1)
    np.testing.assert_allclose(q2.data, [[1.0, 1.0]])


def test_pool_replay_restores_query():
    pool = MemoryPool(1, _tokens(1, [[1.0, 1.0]]), capacity=1)
    before = pooled_query(pool, 2).data.copy()
    pool.add(_tokens(1, [[3.0, 5.0]]))
    pool.add(_tokens(1, [[1.0, 1.0]]))  # evicts the previous entry
    after_evict = pooled_query(pool, 2).data
    np.testing.assert_allclose(after_evict, before)


def test_bi_softmax_trivial_cases():
    one = np.array([[1.0, 0.0]])
    assert bi_softmax_match(one, one, 0.99) == [(0, 0)]
    assert bi_softmax_match(one, np.zeros((0, 2)), 0.3) == [(0, None)]
    with pytest.raises(InputError):
        bi_softmax_match(np.zeros((0, 2)), one, 0.3)


def test_bi_softmax_planted_permutation():
    rng = np.random.default_rng(0)
    base = np.eye(4) * 5.0
    perm = rng.permutation(4)
    new = base[perm]
    matches = bi_softmax_match(new, base, 0.3)
    assert matches == [(i, int(perm[i])) for i in range(4)]


def _fake_detection(masks, scores, reids=None):
    n, h, w = masks.shape
    k = 3
    logits = np.where(masks[:, None, :, :] > 0, 30.0, -30.0).astype(np.float32)
    cls = np.full((n, k), -30.0, dtype=np.float32)
    for i, s in enumerate(scores):
        cls[i, 0] = np.log(s / (1 - s))
    reids = reids if reids is not None else np.eye(n, 4, dtype=np.float32)
    return DecoderOutput(
        mask_logits=Tensor(logits), class_logits=Tensor(cls),
        reid_embed=Tensor(reids), reid_frames=Tensor(reids[:, None, :]),
        per_layer_aux=[], n_learnable=n, prompt_target_ids=[])


def test_detect_entities_nms_and_threshold():
    sq = np.zeros((8, 8), dtype=np.float32)
    sq[2:6, 2:6] = 1
    other = np.zeros((8, 8), dtype=np.float32)
    other[0:2, 6:8] = 1
    det = _fake_detection(np.stack([sq, sq, other]), [0.9, 0.8, 0.7])
    config = StreamConfig(score_thresh=0.4, nms_iou=0.5)
    kept = detect_entities(det, config, upsample_factor=1)
    assert len(kept) == 2
    assert kept[0].score == pytest.approx(0.9, abs=1e-5)
    # all below threshold -> empty
    low = _fake_detection(np.stack([sq]), [0.2])
    assert detect_entities(low, config, upsample_factor=1) == []


def test_mask_to_prompt_contract():
    f3 = Tensor(np.random.default_rng(0).standard_normal((4, 8, 8)).astype(np.float32))
    empty = np.zeros((64, 64), dtype=bool)
    assert mask_to_prompt(empty, f3, 4, np.random.default_rng(0), 1, 0) is None
    one_px = empty.copy()
    one_px[9, 17] = True
    tokens = mask_to_prompt(one_px, f3, 4, np.random.default_rng(0), 1, 0)
    for row in tokens.tokens.data:
        np.testing.assert_array_equal(row, f3.data[:, 1, 2])
    full = np.ones((64, 64), dtype=bool)
    tokens_full = mask_to_prompt(full, f3, 32, np.random.default_rng(1), 1, 0)
    allowed = {tuple(f3.data[:, r, c]) for r in range(8) for c in range(8)}
    for row in tokens_full.tokens.data:
        assert tuple(row) in allowed


def test_bilinear_upsample_matches_constant_and_shape():
    arr = np.full((4, 4), 2.5)
    up = bilinear_upsample(arr, 4)
    assert up.shape == (16, 16)
    np.testing.assert_allclose(up, 2.5)


def test_prompt_specified_single_frame_contract():
    model = tiny_model(seed=40)
    frames, gt = tiny_scene(frames=1)
    prompt = VisualPrompt.from_mask(1, gt.entity_mask(1, 0))
    records = run_prompt_specified(model, frames, [prompt],
                                   StreamConfig(clip_len=3), seed=7)
    rec = records[0]
    assert set(rec.masks) == {0}
    assert len(rec.pool) == 2  # pinned + frame-0 feedback


def test_prompt_specified_deterministic_and_multi_target():
    model = tiny_model(seed=41)
    frames, gt = tiny_scene(frames=4)
    prompts = [VisualPrompt.from_mask(e.entity_id, gt.entity_mask(e.entity_id, 0))
               for e in gt.entities if e.is_thing]
    config = StreamConfig(clip_len=2)
    recs_a = run_prompt_specified(model, frames, prompts, config, seed=9)
    recs_b = run_prompt_specified(model, frames, prompts, config, seed=9)
    for a, b in zip(recs_a, recs_b):
        assert a.masks == b.masks
    for rec in recs_a:
        assert set(rec.masks) == {0, 1, 2, 3}


def test_prompt_specified_never_detects(monkeypatch):
    model = tiny_model(seed=42)
    frames, gt = tiny_scene(frames=2)

    def boom(*args, **kwargs):
        raise AssertionError("prompt path must not invoke detection machinery")

    monkeypatch.setattr(inf, "detect_entities", boom)
    monkeypatch.setattr(inf, "bi_softmax_match", boom)
    prompt = VisualPrompt.from_mask(1, gt.entity_mask(1, 0))
    run_prompt_specified(model, frames, [prompt], StreamConfig(clip_len=2), seed=1)


def test_prompt_specified_text_prompt_runs():
    model = tiny_model(seed=43)
    frames, gt = tiny_scene(frames=2)
    ent = next(e for e in gt.entities if e.is_thing)
    records = run_prompt_specified(model, frames,
                                   [TextPrompt(target_id=ent.entity_id, text=ent.expression)],
                                   StreamConfig(clip_len=2), seed=2)
    assert records[0].pool.pinned.kind == "text"
    assert set(records[0].masks) == {0, 1}


def test_category_specified_ids_unique_and_redetect_noop():
    model = tiny_model(seed=44)
    frames, _ = tiny_scene(frames=5)
    permissive = StreamConfig(score_thresh=0.05, nms_iou=0.6, clip_len=2,
                              detect_interval=100)
    records, semantic = run_category_specified(model, frames, permissive, seed=3)
    ids = [r.id for r in records]
    assert len(ids) == len(set(ids))
    births = {r.birth_frame for r in records}
    assert births <= {0}  # re-detection disabled: every id from frame 0
    assert semantic.shape == frames.shape[:1] + frames.shape[2:]
    for rec in records:
        assert set(rec.masks) == set(range(5))
        for frame, rle in rec.masks.items():
            assert rle_decode(rle).shape == frames.shape[2:]


def test_entity_record_finalize_fills_empty():
    pool = MemoryPool(3, _tokens(3, [[1.0, 1.0]]), 2)
    rec = EntityRecord(id=3, category_id=0, score=0.5, pool=pool, birth_frame=2)
    rec.record_mask(2, np.ones((4, 4), dtype=bool))
    rec.finalize(5, (4, 4))
    assert set(rec.masks) == {2, 3, 4}
    assert rle_decode(rec.masks[4]).sum() == 0
