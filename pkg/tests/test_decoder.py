import numpy as np
import pytest

from promptseg import tensor as T
from promptseg.decoder import (DecoderLayer, init_prompt_query, proca,
                               scale_for_layer)
from promptseg.errors import InputError
from promptseg.gradcheck import grad_check
from promptseg.params import ParamStore
from promptseg.tensor import Tensor

from helpers import tiny_model, tiny_scene


def _decode_setup(model, frames, n_prompts=2, clip=None, rng_seed=0):
    pyramids = model.encode_video(frames)
    rng = np.random.default_rng(rng_seed)
    clip = clip or len(pyramids)
    pools, inits, ids = [], [], []
    c = model.config.channels
    for i in range(n_prompts):
        pool = Tensor(rng.standard_normal((3 + i, c)).astype(model.dtype))
        pools.append(pool)
        inits.append(init_prompt_query(pool, clip))
        ids.append(100 + i)
    queries = model.make_query_set(clip, inits, ids)
    return pyramids, queries, pools


def test_init_prompt_query_examples():
    single = Tensor(np.array([[1.0, 2.0, 3.0]]))
    q = init_prompt_query(single, clip_len=4)
    assert q.shape == (4, 3)
    for row in q.data:
        np.testing.assert_allclose(row, [1.0, 2.0, 3.0])
    two = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(init_prompt_query(two, 2).data,
                               np.full((2, 2), 0.5))
    perm = Tensor(two.data[::-1].copy())
    np.testing.assert_allclose(init_prompt_query(perm, 2).data,
                               init_prompt_query(two, 2).data)
    with pytest.raises(InputError):
        init_prompt_query(Tensor(np.zeros((0, 3))), 2)


def test_proca_singleton_identity_no_residual():
    eye = Tensor(np.eye(3))
    q = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
    pool = Tensor(np.array([[5.0, -1.0, 2.0]]))
    out = proca(q, pool, eye, eye, eye, residual=False)
    for row in out.data:
        np.testing.assert_allclose(row, pool.data[0], atol=1e-6)


def test_proca_large_magnitude_stable():
    eye = Tensor(np.eye(3))
    q = Tensor(np.full((2, 3), 1e3))
    pool = Tensor(np.full((4, 3), 1e3))
    out = proca(q, pool, eye, eye, eye, residual=False)
    assert np.isfinite(out.data).all()


def test_proca_empty_pool_rejected():
    eye = Tensor(np.eye(3))
    with pytest.raises(InputError):
        proca(Tensor(np.zeros((2, 3))), Tensor(np.zeros((0, 3))), eye, eye, eye)


def test_scale_round_robin():
    assert [scale_for_layer(i) for i in range(9)] == [0, 1, 2, 0, 1, 2, 0, 1, 2]
    assert scale_for_layer(0) == scale_for_layer(3)


def test_image_cross_attention_per_frame_independence():
    store = ParamStore()
    rng = np.random.default_rng(1)
    layer = DecoderLayer(store, "layer", channels=8, ffn_dim=16, rng=rng, dtype=np.float64)
    stream = Tensor(rng.standard_normal((3, 2, 8)))
    keys0 = Tensor(rng.standard_normal((5, 8)))
    keys1 = Tensor(rng.standard_normal((5, 8)))
    out_a = layer.run_cross(stream, [(keys0, keys0), (keys1, keys1)]).data
    keys1_perturbed = Tensor(keys1.data + 3.0)
    out_b = layer.run_cross(stream, [(keys0, keys0), (keys1_perturbed, keys1_perturbed)]).data
    np.testing.assert_array_equal(out_a[:, 0], out_b[:, 0])
    assert np.abs(out_a[:, 1] - out_b[:, 1]).max() > 1e-6


def test_sepsa_empty_prompt_bitwise_plain_sa():
    store = ParamStore()
    rng = np.random.default_rng(2)
    layer = DecoderLayer(store, "layer", channels=8, ffn_dim=16, rng=rng, dtype=np.float64)
    q = Tensor(rng.standard_normal((4, 3, 8)))
    empty = Tensor(np.zeros((0, 3, 8)))
    out, _ = layer.run_sepsa(q, empty, [], "per_entity")
    flat = T.reshape(Tensor(q.data.copy()), (12, 8))
    manual = T.reshape(layer._self_attend(flat, flat, None), (4, 3, 8))
    assert out.data.tobytes() == manual.data.tobytes()


def test_sepsa_learnable_invariant_to_prompt_presence():
    store = ParamStore()
    rng = np.random.default_rng(3)
    layer = DecoderLayer(store, "layer", channels=8, ffn_dim=16, rng=rng, dtype=np.float64)
    q = Tensor(rng.standard_normal((4, 2, 8)))
    prompt = Tensor(rng.standard_normal((3, 2, 8)))
    out_with, _ = layer.run_sepsa(q, prompt, [7, 7, 9], "per_entity")
    out_without, _ = layer.run_sepsa(q, Tensor(np.zeros((0, 2, 8))), [], "per_entity")
    assert out_with.data.tobytes() == out_without.data.tobytes()


def test_sepsa_flattening_spans_time():
    store = ParamStore()
    rng = np.random.default_rng(4)
    layer = DecoderLayer(store, "layer", channels=8, ffn_dim=16, rng=rng, dtype=np.float64)
    prompt = Tensor(rng.standard_normal((2, 2, 8)))
    flat = T.reshape(prompt, (4, 8))
    ids = np.repeat([5, 6], 2)
    mask = ids[:, None] == ids[None, :]
    _, weights = T.attention(T.matmul(flat, layer.sepsa["wq"].tensor),
                             T.matmul(flat, layer.sepsa["wk"].tensor),
                             T.matmul(flat, layer.sepsa["wv"].tensor),
                             mask=mask, return_weights=True)
    assert weights[0, 1] > 0.0  # token (target 0, frame 0) attends (target 0, frame 1)
    assert weights[0, 2] == 0.0 and weights[0, 3] == 0.0  # never across targets


def test_decode_row_order_and_prompt_only():
    model = tiny_model(seed=7)
    frames, _ = tiny_scene()
    pyramids, queries, pools = _decode_setup(model, frames)
    out = model.decode(pyramids, queries, pools)
    n, n_p = model.config.num_queries, 2
    assert out.mask_logits.shape[0] == n + n_p
    assert out.n_learnable == n
    assert out.class_logits.shape == (n + n_p, len(model.config.categories))
    assert len(out.per_layer_aux) == model.config.decoder_layers
    # prompt-only decode
    q_only = model.make_query_set(len(pyramids),
                                  [init_prompt_query(p, len(pyramids)) for p in pools],
                                  [100, 101], include_learnable=False)
    out_p = model.decode(pyramids, q_only, pools)
    assert out_p.mask_logits.shape[0] == 2 and out_p.n_learnable == 0
    # learnable-only decode (N_p = 0)
    out_l = model.decode(pyramids, model.make_query_set(len(pyramids)), [])
    assert out_l.mask_logits.shape[0] == n


def test_learnable_stream_bitwise_invariant_to_prompts():
    model = tiny_model(seed=8, dtype=np.float64)
    frames, _ = tiny_scene()
    pyramids, queries, pools = _decode_setup(model, frames)
    with_p = model.decode(pyramids, queries, pools)
    without_p = model.decode(pyramids, model.make_query_set(len(pyramids)), [])
    n = model.config.num_queries
    assert (with_p.mask_logits.data[:n].tobytes()
            == without_p.mask_logits.data.tobytes())
    assert (with_p.class_logits.data[:n].tobytes()
            == without_p.class_logits.data.tobytes())


def test_prompt_outputs_invariant_to_other_pools():
    model = tiny_model(seed=9, dtype=np.float64)
    frames, _ = tiny_scene()
    pyramids, queries, pools = _decode_setup(model, frames)
    out_a = model.decode(pyramids, queries, pools)
    pools_b = [pools[0], Tensor(pools[1].data + 2.5)]
    out_b = model.decode(pyramids, queries, pools_b)
    n = model.config.num_queries
    base_a = out_a.mask_logits.data[n]
    base_b = out_b.mask_logits.data[n]
    assert np.abs(base_a - base_b).max() < 1e-10
    assert np.abs(out_a.mask_logits.data[n + 1] - out_b.mask_logits.data[n + 1]).max() > 1e-8


def test_stream_weight_sharing_via_disabled_proca():
    # a prompt query with the same initial value as the (single) learnable
    # query undergoes the identical transform when ProCA is disabled
    model = tiny_model(seed=10, dtype=np.float64, num_queries=1)
    frames, _ = tiny_scene()
    pyramids = model.encode_video(frames)
    t_len = len(pyramids)
    learn_init = model.learnable_queries(t_len)
    prompt_init = Tensor(learn_init.data.copy()[0])
    queries = model.make_query_set(t_len, [prompt_init], [55])
    out = model.decode(pyramids, queries, None, disable_proca=True)
    learn_masks = out.mask_logits.data[0]
    prompt_masks = out.mask_logits.data[1]
    np.testing.assert_allclose(prompt_masks, learn_masks, atol=1e-12)


def test_prompt_permutation_equivariance():
    model = tiny_model(seed=11, dtype=np.float64)
    frames, _ = tiny_scene()
    pyramids, queries, pools = _decode_setup(model, frames, n_prompts=3)
    out = model.decode(pyramids, queries, pools)
    perm = [2, 0, 1]
    inits_p = [T.reshape(T.index_select(queries.prompt, 0, [i]), queries.prompt.shape[1:])
               for i in perm]
    queries_p = model.make_query_set(queries.prompt.shape[1], inits_p,
                                     [queries.prompt_target_ids[i] for i in perm])
    out_p = model.decode(pyramids, queries_p, [pools[i] for i in perm])
    n = model.config.num_queries
    for new_idx, old_idx in enumerate(perm):
        np.testing.assert_allclose(out_p.mask_logits.data[n + new_idx],
                                   out.mask_logits.data[n + old_idx], atol=1e-12)


def test_classify_cosine_examples():
    model = tiny_model(seed=12, dtype=np.float64)
    heads = model.decoder.heads
    c = model.config.channels
    eye = np.eye(c)
    for i, (w, b) in enumerate(heads.f_cls):
        w.tensor.data = eye.copy()
    p_cate = Tensor(eye[:3].copy())
    q = Tensor(np.broadcast_to(eye[1], (1, 2, c)).copy())  # f_cls(q) = e_1
    logits = heads.classify(q, p_cate, temperature=1.0)
    np.testing.assert_allclose(logits.data, [[0.0, 1.0, 0.0]], atol=1e-6)
    logits_tau = heads.classify(q, p_cate, temperature=0.07)
    np.testing.assert_allclose(logits_tau.data, logits.data / 0.07, atol=1e-5)
    logits_scaled = heads.classify(Tensor(q.data * 7.3), p_cate, temperature=1.0)
    np.testing.assert_allclose(logits_scaled.data, logits.data, atol=1e-9)


def test_classify_rejects_bad_temperature():
    model = tiny_model(seed=13)
    with pytest.raises(InputError):
        model.decoder.heads.classify(Tensor(np.ones((1, 1, 16))),
                                     Tensor(np.ones((2, 16))), temperature=0.0)


def test_predict_masks_linear_combination():
    model = tiny_model(seed=14, dtype=np.float64)
    heads = model.decoder.heads
    c = model.config.channels
    f4 = Tensor(np.random.default_rng(0).standard_normal((c, 4, 4)))
    zero_coeffs = Tensor(np.zeros((2, 1, c)))
    logits = heads.mask_logits_from_coeffs(zero_coeffs, [f4])
    np.testing.assert_array_equal(logits.data, np.zeros((2, 1, 4, 4)))
    e2 = np.zeros((1, 1, c))
    e2[..., 2] = 1.0
    one_hot = heads.mask_logits_from_coeffs(Tensor(e2), [f4])
    np.testing.assert_allclose(one_hot.data[0, 0], f4.data[2], atol=1e-12)
    doubled = heads.mask_logits_from_coeffs(Tensor(2 * e2), [f4])
    np.testing.assert_allclose(doubled.data, 2 * one_hot.data, atol=1e-12)


def test_decode_deterministic():
    model = tiny_model(seed=15)
    frames, _ = tiny_scene()
    pyramids, queries, pools = _decode_setup(model, frames)
    out_a = model.decode(pyramids, queries, pools)
    pyramids_b, queries_b, pools_b = _decode_setup(model, frames)
    out_b = model.decode(pyramids_b, queries_b, pools_b)
    assert out_a.mask_logits.data.tobytes() == out_b.mask_logits.data.tobytes()


def test_decode_wiring_gradients():
    # spot-check reverse-mode through the whole decode on a few parameters
    model = tiny_model(seed=16, dtype=np.float64, channels=8, num_queries=2,
                       decoder_layers=2, prompt_len=2)
    frames = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float64)
    coeff = np.random.default_rng(1).standard_normal((3, 2, 8, 8))

    pyramids = model.encode_video(frames)
    rng = np.random.default_rng(2)
    pool_data = rng.standard_normal((3, 8))

    def objective():
        pyrs = model.encode_video(frames)
        pool = Tensor(pool_data)
        queries = model.make_query_set(2, [init_prompt_query(pool, 2)], [9])
        out = model.decode(pyrs, queries, [pool])
        return T.reduce_sum(T.mul(out.mask_logits, Tensor(coeff))) + T.reduce_sum(out.class_logits)

    picked = [model.store.get(n) for n in [
        "backbone.stem.w", "pixel_decoder.smooth4.w", "decoder.layer0.proca.wq",
        "decoder.layer1.sepsa.wv", "decoder.layer0.cross.wk", "heads.mask.w1",
        "queries.content", "lang2img.t2v.w", "decoder.layer0.ffn.w1",
    ]]
    report = grad_check(objective, picked, eps=1e-5)
    assert max(report.values()) < 1e-3, report
