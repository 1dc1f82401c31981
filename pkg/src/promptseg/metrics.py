"""Segmentation quality metrics: J, boundary F, mIoU, mVC_k and VPQ_k.

Conventions baked into the definitions (the test-side brute-force twins use
the same ones):
  * region jaccard of two empty masks is 1;
  * a boundary pixel is a foreground pixel with a 4-neighbour background
    pixel, the image border counting as background; F is 1 when both
    boundaries are empty and 0 when exactly one is;
  * gt label -1 means void and is excluded everywhere;
  * mVC_k / VPQ_k slide stride-1 windows of k frames, truncating nothing
    (k must not exceed the video length); windows with an empty denominator
    are skipped, and the metric is 1 if every window was skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError


def region_jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; both empty -> 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """4-connected boundary: foreground with a background 4-neighbour (border = background)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _dilate_chebyshev(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    padded = np.pad(mask, radius, constant_values=False)
    out = np.zeros_like(mask)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            out |= padded[radius + dr:radius + dr + h, radius + dc:radius + dc + w]
    return out


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance_px: int = 1) -> float:
    """Boundary precision/recall F-measure with a Chebyshev match radius."""
    if tolerance_px < 0:
        raise InputError("tolerance_px must be >= 0")
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    n_pb, n_gb = int(pb.sum()), int(gb.sum())
    if n_pb == 0 and n_gb == 0:
        return 1.0
    if n_pb == 0 or n_gb == 0:
        return 0.0
    gb_zone = _dilate_chebyshev(gb, tolerance_px)
    pb_zone = _dilate_chebyshev(pb, tolerance_px)
    precision = float((pb & gb_zone).sum() / n_pb)
    recall = float((gb & pb_zone).sum() / n_gb)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _check_label_maps(pred_maps: np.ndarray, gt_maps: np.ndarray, num_classes: int):
    pred_maps = np.asarray(pred_maps)
    gt_maps = np.asarray(gt_maps)
    if pred_maps.shape != gt_maps.shape:
        raise ShapeError("prediction and gt map stacks differ in shape")
    if pred_maps.max(initial=-1) >= num_classes or pred_maps.min(initial=0) < -1:
        raise InputError("prediction contains labels outside [-1, num_classes)")
    return pred_maps, gt_maps


def miou(pred_maps: np.ndarray, gt_maps: np.ndarray, num_classes: int) -> float:
    """Per-class IoU pooled over all frames, averaged over classes present in gt."""
    pred_maps, gt_maps = _check_label_maps(pred_maps, gt_maps, num_classes)
    valid = gt_maps != -1
    ious = []
    for cls in range(num_classes):
        gt_cls = (gt_maps == cls) & valid
        if not gt_cls.any():
            continue
        pred_cls = (pred_maps == cls) & valid
        inter = np.logical_and(pred_cls, gt_cls).sum()
        union = np.logical_or(pred_cls, gt_cls).sum()
        ious.append(inter / union)
    if not ious:
        return 1.0
    return float(np.mean(ious))


def mvc_k(pred_maps: np.ndarray, gt_maps: np.ndarray, k: int) -> float:
    """Category consistency over k-frame windows.

    Per window: the fraction of pixels whose (non-void) gt class is constant
    across the window that are predicted correctly in every frame of it.
    """
    pred_maps = np.asarray(pred_maps)
    gt_maps = np.asarray(gt_maps)
    v = gt_maps.shape[0]
    if k < 1 or k > v:
        raise InputError(f"window size {k} not in [1, {v}]")
    scores = []
    for t0 in range(v - k + 1):
        gt_win = gt_maps[t0:t0 + k]
        pred_win = pred_maps[t0:t0 + k]
        consistent = np.all(gt_win == gt_win[0], axis=0) & np.all(gt_win != -1, axis=0)
        denom = consistent.sum()
        if denom == 0:
            continue
        correct_all = np.all(pred_win == gt_win, axis=0) & consistent
        scores.append(correct_all.sum() / denom)
    if not scores:
        return 1.0
    return float(np.mean(scores))


@dataclass
class Tube:
    """A tracked segment: one (class, id) with a full-length mask stack."""
    category_id: int
    tube_id: int
    masks: np.ndarray  # [V,H,W] bool

    def window(self, t0: int, k: int) -> np.ndarray:
        return self.masks[t0:t0 + k]


def _check_tube_overlap(tubes: list[Tube], label: str) -> None:
    if not tubes:
        return
    total = np.zeros(tubes[0].masks.shape, dtype=np.int32)
    for tube in tubes:
        total += tube.masks.astype(np.int32)
    if (total > 1).any():
        raise InputError(f"{label} tubes overlap within a frame")


def vpq_k(pred_tubes: list[Tube], gt_tubes: list[Tube], k: int) -> float:
    """Windowed panoptic quality: tube IoU matching at 0.5 over k frames.

    PQ per class per window is sum(IoU of TPs) / (|TP| + |FP|/2 + |FN|/2);
    classes present in neither prediction nor gt are skipped, window scores
    average class scores, and the result averages over windows.
    """
    if not gt_tubes and not pred_tubes:
        return 1.0
    some = (gt_tubes or pred_tubes)[0]
    v = some.masks.shape[0]
    if k < 1 or k > v:
        raise InputError(f"window size {k} not in [1, {v}]")
    _check_tube_overlap(pred_tubes, "prediction")
    _check_tube_overlap(gt_tubes, "gt")
    window_scores = []
    for t0 in range(v - k + 1):
        class_ids = sorted({t.category_id for t in pred_tubes} |
                           {t.category_id for t in gt_tubes})
        class_scores = []
        for cls in class_ids:
            preds = [t for t in pred_tubes if t.category_id == cls and t.window(t0, k).any()]
            gts = [t for t in gt_tubes if t.category_id == cls and t.window(t0, k).any()]
            if not preds and not gts:
                continue
            tp_iou = 0.0
            matched_pred: set[int] = set()
            matched_gt: set[int] = set()
            for gi, gt_tube in enumerate(gts):
                g = gt_tube.window(t0, k)
                for pi, pred_tube in enumerate(preds):
                    if pi in matched_pred:
                        continue
                    p = pred_tube.window(t0, k)
                    union = np.logical_or(p, g).sum()
                    iou = np.logical_and(p, g).sum() / union if union else 0.0
                    if iou > 0.5:
                        tp_iou += iou
                        matched_pred.add(pi)
                        matched_gt.add(gi)
                        break
            tp = len(matched_gt)
            fp = len(preds) - len(matched_pred)
            fn = len(gts) - tp
            class_scores.append(tp_iou / (tp + 0.5 * fp + 0.5 * fn))
        if class_scores:
            window_scores.append(float(np.mean(class_scores)))
    if not window_scores:
        return 1.0
    return float(np.mean(window_scores))
