"""Training losses: dice+BCE mask loss, sigmoid focal classification,
quasi-dense contrastive ReID with a squared-cosine auxiliary, Hungarian
matching for the learnable stream and the weighted total with deep
supervision.

Aggregation conventions (frozen by tests): dice is per-frame with 1e-6
smoothing, BCE is the per-pixel mean, a mask pair sums dice+BCE over
frames; focal sums over classes and averages over query rows, with alpha
weighting the positive terms only; matching happens per aux layer on
detached values; the reported breakdown is float64 so the weighted total
equals the hand-weighted sum of its terms exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .decoder import DecoderOutput, LayerOutput, cosine_matrix
from .errors import InputError, ShapeError
from .tensor import Tensor

DICE_EPS = 1e-6


@dataclass
class LossWeights:
    lambda_mask: float = 5.0
    lambda_cls: float = 3.0
    lambda_reid: float = 0.5

    def __post_init__(self):
        if min(self.lambda_mask, self.lambda_cls, self.lambda_reid) < 0:
            raise InputError("loss weights must be non-negative")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]          # (query_index, gt_index)
    unmatched_queries: list[int]


@dataclass
class TargetEntity:
    """One ground-truth entity prepared for a clip."""
    entity_id: int
    category_id: int
    masks_q: np.ndarray                   # [T, H/4, W/4] float in {0,1}
    prompt_index: int | None = None       # row in the prompt stream, if any


def area_majority_downsample(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    """Binary majority vote over factor x factor blocks -> float {0,1} map."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask {h}x{w} not divisible by {factor}")
    frac = mask.astype(np.float64).reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return (frac > 0.5).astype(np.float32)


def dice_loss(logits: Tensor, gt: Tensor) -> Tensor:
    """1 - 2|P.G|/(|P|+|G|) with +eps smoothing (empty-vs-empty -> 0)."""
    p = T.sigmoid(logits)
    inter = T.reduce_sum(T.mul(p, gt))
    denom = T.reduce_sum(p) + T.reduce_sum(gt)
    return 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def bce_loss(logits: Tensor, gt: Tensor) -> Tensor:
    """Per-pixel mean binary cross-entropy on logits."""
    loss = T.mul(gt, T.softplus(T.neg(logits))) + T.mul(1.0 - gt, T.softplus(logits))
    return T.reduce_mean(loss)


def _mask_loss_nd(pred_logits: Tensor, gt: Tensor) -> Tensor:
    """Sum over leading dims of per-frame dice+bce; spatial axes are the last two."""
    axes = (pred_logits.ndim - 2, pred_logits.ndim - 1)
    pixels = pred_logits.shape[-1] * pred_logits.shape[-2]
    p = T.sigmoid(pred_logits)
    inter = T.reduce_sum(T.mul(p, gt), axis=axes)
    denom = T.reduce_sum(p, axis=axes) + T.reduce_sum(gt, axis=axes)
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    bce_el = T.mul(gt, T.softplus(T.neg(pred_logits))) + T.mul(1.0 - gt, T.softplus(pred_logits))
    bce = T.reduce_sum(bce_el, axis=axes) * (1.0 / pixels)
    return T.reduce_sum(dice + bce)


def mask_loss(pred_logits: Tensor, gt_mask: Tensor | np.ndarray) -> Tensor:
    """dice + bce per frame, summed over the clip, for one (pred, gt) pair."""
    gt = gt_mask if isinstance(gt_mask, Tensor) else Tensor(np.asarray(gt_mask, dtype=pred_logits.data.dtype))
    if pred_logits.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred_logits.shape} vs {gt.shape}")
    return _mask_loss_nd(pred_logits, gt)


def focal_cls_loss(class_logits: Tensor, labels, gamma: float = 2.0,
                   alpha: float = 0.25) -> Tensor:
    """Sigmoid focal loss; label -1 marks no-object (all classes supervised to 0).

    alpha scales the positive-class terms only, so gamma=0, alpha=1 is plain
    BCE. Sums over classes, averages over query rows.
    """
    labels = np.asarray(labels, dtype=np.int64)
    q, k = class_logits.shape
    if labels.shape != (q,):
        raise InputError("one label per query row required")
    if labels.max(initial=-1) >= k:
        raise InputError(f"label out of range for {k} classes")
    if labels.min(initial=0) < -1:
        raise InputError("labels must be >= -1")
    onehot = np.zeros((q, k), dtype=class_logits.data.dtype)
    rows = np.arange(q)[labels >= 0]
    onehot[rows, labels[labels >= 0]] = 1.0
    target = Tensor(onehot)
    p = T.sigmoid(class_logits)
    pos = T.mul(T.power(1.0 - p, gamma), T.softplus(T.neg(class_logits))) * alpha
    neg = T.mul(T.power(p, gamma), T.softplus(class_logits))
    loss = T.mul(target, pos) + T.mul(1.0 - target, neg)
    return T.reduce_mean(T.reduce_sum(loss, axis=1))


def reid_stream_term(anchors: list[tuple[int, int, Tensor]],
                     keys: list[tuple[int, int, Tensor]]) -> tuple[Tensor | float, Tensor | float]:
    """(contrastive, auxiliary) for one ordered stream pair.

    Entries are (element_uid, identity, embedding[C]); element_uid marks
    physically identical embeddings so self-pairs are excluded. Contrastive:
    log(1 + sum_pos sum_neg exp(a.k- - a.k+)) averaged over anchors that
    have a positive; auxiliary: mean (cosine - same_id)^2 over valid pairs.
    """
    if not anchors or not keys:
        return 0.0, 0.0
    a_mat = T.stack([e[2] for e in anchors], axis=0)
    k_mat = T.stack([e[2] for e in keys], axis=0)
    dots = T.matmul(a_mat, T.transpose(k_mat, (1, 0)))
    cos = cosine_matrix(a_mat, k_mat)
    a_ids = np.array([e[1] for e in anchors])
    k_ids = np.array([e[1] for e in keys])
    a_uid = np.array([e[0] for e in anchors])
    k_uid = np.array([e[0] for e in keys])
    same_id = a_ids[:, None] == k_ids[None, :]
    valid = a_uid[:, None] != k_uid[None, :]

    contrast_terms = []
    for i in range(len(anchors)):
        pos_idx = np.flatnonzero(same_id[i] & valid[i])
        neg_idx = np.flatnonzero(~same_id[i] & valid[i])
        if pos_idx.size == 0 or neg_idx.size == 0:
            if pos_idx.size == 0:
                continue
            contrast_terms.append(Tensor(np.zeros((), dtype=dots.data.dtype)))
            continue
        row = T.reshape(T.index_select(dots, 0, [i]), (len(keys),))
        pos = T.reshape(T.index_select(row, 0, pos_idx), (pos_idx.size, 1))
        neg = T.reshape(T.index_select(row, 0, neg_idx), (1, neg_idx.size))
        diff = T.reshape(T.sub(neg, pos), (pos_idx.size * neg_idx.size,))
        contrast_terms.append(T.softplus(T.logsumexp(diff, axis=0)))
    contrastive = (sum(contrast_terms[1:], contrast_terms[0]) * (1.0 / len(contrast_terms))
                   if contrast_terms else 0.0)

    if valid.any():
        target = Tensor(same_id.astype(cos.data.dtype))
        sq = T.power(T.sub(cos, target), 2.0)
        picked = T.mul(sq, Tensor(valid.astype(cos.data.dtype)))
        aux = T.reduce_sum(picked) * (1.0 / valid.sum())
    else:
        aux = 0.0
    return contrastive, aux


def reid_loss(entries: list[tuple[str, int, Tensor]]) -> Tensor | float:
    """Three-term ReID loss over (stream, identity, embedding) entries.

    Streams are 'learnable' and 'prompt'; terms are (L,L), (L,P), (P,P),
    each contrastive + auxiliary. Zero when no identity has two embeddings.
    """
    tagged = [(uid, stream, ident, emb) for uid, (stream, ident, emb) in enumerate(entries)]
    by_stream = {"learnable": [], "prompt": []}
    for uid, stream, ident, emb in tagged:
        if stream not in by_stream:
            raise InputError(f"unknown reid stream {stream!r}")
        by_stream[stream].append((uid, ident, emb))
    all_ids = [ident for _, _, ident, _ in tagged]
    has_positive = len(all_ids) != len(set(all_ids))
    if not has_positive:
        return 0.0
    total = None
    for sa, sb in (("learnable", "learnable"), ("learnable", "prompt"), ("prompt", "prompt")):
        contrastive, aux = reid_stream_term(by_stream[sa], by_stream[sb])
        for part in (contrastive, aux):
            if isinstance(part, Tensor):
                total = part if total is None else total + part
            elif total is None:
                total = part
            else:
                total = total + part
    return 0.0 if total is None else total


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimal-cost injective assignment of every gt column to a query row."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InputError("cost must be a 2-D matrix")
    n, g = cost.shape
    if g > n:
        raise InputError(f"more ground-truth entities ({g}) than queries ({n})")
    if not np.isfinite(cost).all():
        raise InputError("matching costs must be finite")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])
    matched = {r for r, _ in pairs}
    return MatchResult(pairs=[(int(r), int(c)) for r, c in pairs],
                       unmatched_queries=[i for i in range(n) if i not in matched])


def _pair_mask_cost(logits: np.ndarray, gt: np.ndarray) -> float:
    """Numpy twin of mask_loss for match costs (no graph)."""
    return float(_mask_cost_matrix(logits[None], gt[None])[0, 0])


def _mask_cost_matrix(logits: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """dice+bce summed over frames for every (query, gt) pair: [N, G]."""
    x = logits.astype(np.float64)
    g = gts.astype(np.float64)
    pixels = x.shape[-1] * x.shape[-2]
    p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    inter = np.einsum("nthw,gthw->ngt", p, g)
    psum = p.sum(axis=(2, 3))
    gsum = g.sum(axis=(2, 3))
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (psum[:, None, :] + gsum[None, :, :] + DICE_EPS)
    sp_neg = np.logaddexp(0, -x)
    sp_pos = np.logaddexp(0, x)
    bce_pos = np.einsum("nthw,gthw->ngt", sp_neg, g)
    bce_neg = sp_pos.sum(axis=(2, 3))[:, None, :] - np.einsum("nthw,gthw->ngt", sp_pos, g)
    bce = (bce_pos + bce_neg) / pixels
    return (dice + bce).sum(axis=2)


def match_layer(layer: LayerOutput, n_learnable: int, targets: list[TargetEntity],
                weights: LossWeights) -> MatchResult:
    """Hungarian matching of learnable queries to gt on detached outputs."""
    logits = layer.mask_logits.data[:n_learnable]
    scores = 1.0 / (1.0 + np.exp(-layer.class_logits.data[:n_learnable].astype(np.float64)))
    gts = np.stack([t.masks_q for t in targets])
    cost = weights.lambda_mask * _mask_cost_matrix(logits, gts)
    for g, target in enumerate(targets):
        cost[:, g] -= weights.lambda_cls * scores[:, target.category_id]
    return hungarian_match(cost)


def _slice_rows(t: Tensor, idx: int) -> Tensor:
    return T.reshape(T.index_select(t, 0, [idx]), t.shape[1:])


def total_loss(output: DecoderOutput, targets: list[TargetEntity],
               weights: LossWeights) -> tuple[Tensor, dict]:
    """Deep-supervised weighted loss plus a float64 breakdown.

    Prompt rows are aligned to their targets by construction; learnable rows
    are Hungarian-matched per aux layer; ReID applies to the final layer.
    breakdown['total'] always equals the hand-weighted sum of the parts.
    """
    if not targets:
        raise InputError("total_loss needs at least one target entity")
    n = output.n_learnable
    dtype = output.mask_logits.data.dtype
    mask_terms: list[Tensor] = []
    cls_terms: list[Tensor] = []
    for layer in output.per_layer_aux:
        match = match_layer(layer, n, targets, weights) if n else MatchResult([], [])
        labels = np.full(layer.class_logits.shape[0], -1, dtype=np.int64)
        rows: list[int] = []
        gt_stack: list[np.ndarray] = []
        for qi, gi in match.pairs:
            labels[qi] = targets[gi].category_id
            rows.append(qi)
            gt_stack.append(targets[gi].masks_q)
        for target in targets:
            if target.prompt_index is None:
                continue
            row = n + target.prompt_index
            labels[row] = target.category_id
            rows.append(row)
            gt_stack.append(target.masks_q)
        if rows:
            picked = T.index_select(layer.mask_logits, 0, rows)
            gt = Tensor(np.stack(gt_stack).astype(dtype))
            mask_terms.append(_mask_loss_nd(picked, gt) * (1.0 / len(targets)))
        cls_terms.append(focal_cls_loss(layer.class_logits, labels))

    final = output.per_layer_aux[-1]
    final_match = match_layer(final, n, targets, weights) if n else MatchResult([], [])
    entries: list[tuple[str, int, Tensor]] = []
    t_len = final.reid_frames.shape[1]
    for qi, gi in final_match.pairs:
        for t in range(t_len):
            emb = T.reshape(T.index_select(_slice_rows(final.reid_frames, qi), 0, [t]),
                            (final.reid_frames.shape[2],))
            entries.append(("learnable", targets[gi].entity_id, emb))
    for target in targets:
        if target.prompt_index is None:
            continue
        row_t = _slice_rows(final.reid_frames, n + target.prompt_index)
        for t in range(t_len):
            emb = T.reshape(T.index_select(row_t, 0, [t]), (final.reid_frames.shape[2],))
            entries.append(("prompt", target.entity_id, emb))
    reid_term = reid_loss(entries)

    def _combine(terms):
        if not terms:
            return Tensor(np.zeros((), dtype=dtype))
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total

    mask_sum = _combine(mask_terms)
    cls_sum = _combine(cls_terms)
    reid_sum = reid_term if isinstance(reid_term, Tensor) else Tensor(np.zeros((), dtype=dtype))
    loss = (mask_sum * weights.lambda_mask + cls_sum * weights.lambda_cls
            + reid_sum * weights.lambda_reid)
    parts = {"mask": float(mask_sum.item()), "cls": float(cls_sum.item()),
             "reid": float(reid_sum.item())}
    parts["total"] = (weights.lambda_mask * parts["mask"]
                      + weights.lambda_cls * parts["cls"]
                      + weights.lambda_reid * parts["reid"])
    return loss, parts
