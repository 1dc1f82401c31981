import numpy as np
import pytest

from promptseg.errors import InputError
from promptseg.metrics import (Tube, boundary_f, boundary_pixels, miou,
                               mvc_k, region_jaccard, vpq_k)

from oracles import (bf_boundary_f, bf_jaccard, bf_miou, bf_mvc, bf_vpq,
                     random_panoptic_tubes)


def test_jaccard_trivial_cases():
    a = np.zeros((4, 4), dtype=bool)
    assert region_jaccard(a, a) == 1.0
    b = a.copy()
    b[0, 0] = True
    c = a.copy()
    c[3, 3] = True
    assert region_jaccard(b, c) == 0.0
    pred = np.zeros((2, 2), dtype=bool)
    pred[0, 0] = True
    gt = np.zeros((2, 2), dtype=bool)
    gt[0, 0] = gt[0, 1] = True
    # direct count: intersection 1, union 2
    assert region_jaccard(pred, gt) == pytest.approx(bf_jaccard(pred, gt))
    assert region_jaccard(pred, gt) == pytest.approx(1 / 2)


def test_boundary_f_trivial_and_shifted():
    sq = np.zeros((12, 12), dtype=bool)
    sq[3:8, 3:8] = True
    assert boundary_f(sq, sq, 1) == 1.0
    # a 2x2 square shifted by 2 px shares no boundary pixel at tolerance 0
    small = np.zeros((12, 12), dtype=bool)
    small[3:5, 3:5] = True
    shifted = np.roll(small, 2, axis=1)
    assert boundary_f(shifted, small, 0) == bf_boundary_f(shifted, small, 0) == 0.0
    assert boundary_f(shifted, small, 2) == bf_boundary_f(shifted, small, 2) == 1.0


def test_boundary_pixels_of_solid_square():
    sq = np.zeros((6, 6), dtype=bool)
    sq[1:5, 1:5] = True
    b = boundary_pixels(sq)
    assert b.sum() == 12  # 4x4 block has 12 edge pixels
    assert not b[2:4, 2:4].any()


def test_miou_perfect_and_exclusions():
    gt = np.zeros((2, 4, 4), dtype=np.int64)
    gt[:, 2:] = 1
    assert miou(gt, gt, 3) == 1.0  # class 2 absent from both: excluded
    pred = gt.copy()
    pred[0, 0, :] = 1  # flip 4 pixels of class 0 to class 1
    expected_c0 = 12 / 16
    expected_c1 = 16 / 20
    assert miou(pred, gt, 3) == pytest.approx((expected_c0 + expected_c1) / 2)


def test_miou_unknown_pred_label_errors():
    gt = np.zeros((1, 2, 2), dtype=np.int64)
    pred = gt.copy()
    pred[0, 0, 0] = 7
    with pytest.raises(InputError):
        miou(pred, gt, 3)


def test_mvc_single_frame_is_accuracy():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 3, size=(1, 6, 6))
    pred = gt.copy()
    pred[0, 0, 0] = (gt[0, 0, 0] + 1) % 3
    assert mvc_k(pred, gt, 1) == pytest.approx(35 / 36)


def test_mvc_flickering_pixel():
    gt = np.zeros((2, 2, 2), dtype=np.int64)
    pred = gt.copy()
    pred[1, 0, 0] = 1  # one pixel wrong in frame 1 only
    assert mvc_k(pred, gt, 2) == pytest.approx(3 / 4)
    assert mvc_k(pred, gt, 2) == pytest.approx(bf_mvc(pred, gt, 2))


def test_mvc_k_too_large_errors():
    gt = np.zeros((2, 2, 2), dtype=np.int64)
    with pytest.raises(InputError):
        mvc_k(gt, gt, 3)


def test_vpq_perfect_and_pure_fn():
    masks = np.zeros((3, 6, 6), dtype=bool)
    masks[:, 1:4, 1:4] = True
    gt = [Tube(0, 1, masks)]
    assert vpq_k(gt, gt, 2) == 1.0
    assert vpq_k([], gt, 2) == 0.0


def test_vpq_overlapping_pred_rejected():
    masks = np.zeros((2, 4, 4), dtype=bool)
    masks[:, :2, :2] = True
    with pytest.raises(InputError):
        vpq_k([Tube(0, 1, masks), Tube(0, 2, masks)], [Tube(0, 1, masks)], 1)


def test_vpq_id_swap_matches_bruteforce():
    # two gt tubes; prediction swaps ids mid-window
    gt_a = np.zeros((4, 6, 6), dtype=bool)
    gt_a[:, :3, :3] = True
    gt_b = np.zeros((4, 6, 6), dtype=bool)
    gt_b[:, 3:, 3:] = True
    pr_a = gt_a.copy()
    pr_b = gt_b.copy()
    pr_a[2:], pr_b[2:] = gt_b[2:].copy(), gt_a[2:].copy()
    pred = [Tube(0, 10, pr_a), Tube(0, 11, pr_b)]
    gt = [Tube(0, 1, gt_a), Tube(0, 2, gt_b)]
    for k in (1, 2, 3, 4):
        ours = vpq_k(pred, gt, k)
        ref = bf_vpq([(t.category_id, t.masks) for t in pred],
                     [(t.category_id, t.masks) for t in gt], k)
        assert ours == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("seed", range(12))
def test_random_instances_match_bruteforce(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    v = int(rng.integers(1, 5))
    pred_mask = rng.random((h, w)) < 0.5
    gt_mask = rng.random((h, w)) < 0.5
    assert region_jaccard(pred_mask, gt_mask) == pytest.approx(bf_jaccard(pred_mask, gt_mask), abs=1e-12)
    tol = int(rng.integers(0, 3))
    assert boundary_f(pred_mask, gt_mask, tol) == pytest.approx(bf_boundary_f(pred_mask, gt_mask, tol), abs=1e-12)
    n_cls = int(rng.integers(2, 5))
    gt_maps = rng.integers(-1, n_cls, size=(v, h, w))
    pred_maps = rng.integers(0, n_cls, size=(v, h, w))
    assert miou(pred_maps, gt_maps, n_cls) == pytest.approx(bf_miou(pred_maps, gt_maps, n_cls), abs=1e-12)
    k = int(rng.integers(1, v + 1))
    assert mvc_k(pred_maps, gt_maps, k) == pytest.approx(bf_mvc(pred_maps, gt_maps, k), abs=1e-12)
    pred_tubes_raw = random_panoptic_tubes(rng, v, h, w, int(rng.integers(1, 4)), n_cls)
    gt_tubes_raw = random_panoptic_tubes(rng, v, h, w, int(rng.integers(1, 4)), n_cls)
    pred_tubes = [Tube(c, i, m) for i, (c, m) in enumerate(pred_tubes_raw)]
    gt_tubes = [Tube(c, i, m) for i, (c, m) in enumerate(gt_tubes_raw)]
    assert vpq_k(pred_tubes, gt_tubes, k) == pytest.approx(bf_vpq(pred_tubes_raw, gt_tubes_raw, k), abs=1e-12)


def test_metrics_symmetric_under_spatial_permutation():
    rng = np.random.default_rng(5)
    pred = rng.random((7, 7)) < 0.4
    gt = rng.random((7, 7)) < 0.4
    perm = rng.permutation(49)

    def permute(m):
        return m.reshape(-1)[perm].reshape(7, 7)

    assert region_jaccard(permute(pred), permute(gt)) == pytest.approx(region_jaccard(pred, gt))
