"""Circle loss over positive/negative descriptor pairs, the coarse and fine
supervision builders on top of it, and total-loss assembly.

The per-pair weights are self-paced: proportional to how far a pair sits on
the wrong side of its margin, clamped at zero and detached, so satisfied
pairs stop producing gradient. Evaluation is stabilized with per-anchor
log-sum-exp plus a softplus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericalAbort, UsageError


@dataclass(frozen=True)
class CircleLossParams:
    delta_p: float = 0.1
    delta_n: float = 1.4
    gamma: float = 10.0
    lambda_p: float = 1.0
    lambda_n: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.delta_p < self.delta_n:
            raise UsageError("margins must satisfy 0 < delta_p < delta_n")
        if self.gamma <= 0.0:
            raise UsageError("gamma must be positive")


@dataclass
class PairSets:
    """Flat positive/negative distance lists with per-pair anchor ids.

    ``pos_dist``/``neg_dist`` are tensors so gradients reach the features
    that produced the distances; anchors with no entries on a side simply
    do not appear in the corresponding id array.
    """

    pos_dist: ad.Tensor
    pos_anchor: np.ndarray
    neg_dist: ad.Tensor
    neg_anchor: np.ndarray
    n_anchors: int


def circle_loss(pairs, params):
    """Mean per-anchor circle loss.

    Per anchor: (1/gamma) * log[1 + (sum_p e^(b_p (d - dp))) *
    (sum_n e^(b_n (dn - d)))] with b_p = gamma*lambda_p*max(0, d - dp) and
    b_n = gamma*lambda_n*max(0, dn - d), both detached. An anchor whose
    positive or negative side is empty contributes exactly 0.
    """
    if pairs.n_anchors < 1:
        raise UsageError("circle_loss needs at least one anchor")
    if pairs.pos_dist.data.size == 0 and pairs.neg_dist.data.size == 0:
        raise UsageError("every anchor has empty positive and negative sets")

    beta_p = params.gamma * params.lambda_p * np.maximum(
        0.0, pairs.pos_dist.data - params.delta_p
    )
    beta_n = params.gamma * params.lambda_n * np.maximum(
        0.0, params.delta_n - pairs.neg_dist.data
    )

    exp_p = ad.mul(ad.constant(beta_p), ad.sub(pairs.pos_dist, params.delta_p))
    exp_n = ad.mul(ad.constant(beta_n), ad.sub(params.delta_n, pairs.neg_dist))
    lse_p = ad.segment_logsumexp(exp_p, pairs.pos_anchor, pairs.n_anchors)
    lse_n = ad.segment_logsumexp(exp_n, pairs.neg_anchor, pairs.n_anchors)
    per_anchor = ad.softplus(ad.add(lse_p, lse_n))
    return ad.mul(ad.mean(per_anchor), 1.0 / params.gamma)


def _hardest_negatives(dist_rows, allowed, counts, neg_ratio):
    """Lowest-distance allowed negatives per row, up to neg_ratio * count."""
    rows = []
    cols = []
    for i in range(dist_rows.shape[0]):
        if counts[i] == 0:
            continue  # empty positive side contributes 0 regardless
        budget = int(neg_ratio * counts[i])
        cand = np.nonzero(allowed[i])[0]
        if cand.size == 0 or budget == 0:
            continue
        order = np.lexsort((cand, dist_rows[i, cand]))
        pick = cand[order[:budget]]
        rows.extend([i] * pick.size)
        cols.extend(pick.tolist())
    return np.array(rows, dtype=np.intp), np.array(cols, dtype=np.intp)


def mine_pair_sets(anchor_feats, item_feats, pos_pairs, allowed_neg, neg_ratio=4):
    """Build PairSets from features and supervision.

    ``pos_pairs`` is (K, 2) of (anchor, item); ``allowed_neg`` is an
    (A, B) bool mask of admissible negatives. Negatives are the hardest
    (smallest distance) admissible items, up to ``neg_ratio`` times the
    anchor's positive count, chosen deterministically.
    """
    n_anchors = anchor_feats.data.shape[0]
    dist = ad.pairwise_dist(anchor_feats, item_feats)
    pos_pairs = np.asarray(pos_pairs, dtype=np.intp).reshape(-1, 2)
    counts = np.bincount(pos_pairs[:, 0], minlength=n_anchors)
    neg_rows, neg_cols = _hardest_negatives(dist.data, allowed_neg, counts, neg_ratio)
    return PairSets(
        pos_dist=ad.gather_pairs(dist, pos_pairs[:, 0], pos_pairs[:, 1]),
        pos_anchor=pos_pairs[:, 0].copy(),
        neg_dist=ad.gather_pairs(dist, neg_rows, neg_cols),
        neg_anchor=neg_rows,
        n_anchors=n_anchors,
    )


@dataclass
class LossDiagnostics:
    anchors_total: int = 0
    anchors_without_positives: int = 0
    pairs_pos: int = 0
    pairs_neg: int = 0
    skipped_scales: list = field(default_factory=list)


def coarse_loss(node_feats, patch_feats, overlap_fracs, params, overlap_min=0.3,
                neg_ratio=4):
    """Circle loss over node/patch descriptor pairs, averaged over scales.

    Positives are patches holding at least ``overlap_min`` of a node's
    points; negatives are patches with zero overlap. The band in between is
    ignored. Scales without a single positive contribute nothing and are
    recorded in the diagnostics.
    """
    diags = LossDiagnostics()
    per_scale = []
    for scale_idx, (nodes, patches, frac) in enumerate(
        zip(node_feats, patch_feats, overlap_fracs)
    ):
        pos = np.argwhere(frac >= overlap_min)
        diags.anchors_total += frac.shape[0]
        diags.anchors_without_positives += int(
            np.sum(~np.any(frac >= overlap_min, axis=1))
        )
        if pos.size == 0:
            diags.skipped_scales.append(scale_idx + 1)
            continue
        pairs = mine_pair_sets(
            ad.row_normalize(nodes),
            ad.row_normalize(patches),
            pos,
            allowed_neg=frac == 0.0,
            neg_ratio=neg_ratio,
        )
        diags.pairs_pos += pairs.pos_dist.data.size
        diags.pairs_neg += pairs.neg_dist.data.size
        per_scale.append(circle_loss(pairs, params))
    if not per_scale:
        return ad.constant(0.0), diags
    total = per_scale[0]
    for term in per_scale[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(per_scale)), diags


def fine_loss(point_feats, pixel_feats, gt_fine, params, neg_ratio=4,
              max_anchors=128, rng=None):
    """Circle loss over point/pixel descriptor pairs from ground truth.

    Anchors are points with at least one ground-truth pixel. When there are
    more than ``max_anchors`` such points, a seeded subsample keeps the step
    cost bounded; pass ``rng`` for reproducibility.
    """
    diags = LossDiagnostics()
    gt_fine = np.asarray(gt_fine, dtype=np.intp).reshape(-1, 2)
    if gt_fine.shape[0] == 0:
        diags.skipped_scales.append(0)
        return ad.constant(0.0), diags

    anchor_points = np.unique(gt_fine[:, 1])
    if anchor_points.size > max_anchors:
        if rng is None:
            rng = np.random.default_rng(0)
        anchor_points = np.sort(
            rng.choice(anchor_points, size=max_anchors, replace=False)
        )
    remap = {int(p): i for i, p in enumerate(anchor_points)}
    keep = np.isin(gt_fine[:, 1], anchor_points)
    pairs_sel = gt_fine[keep]
    pos = np.stack(
        [np.array([remap[int(p)] for p in pairs_sel[:, 1]]), pairs_sel[:, 0]], axis=1
    )

    n_pixels = pixel_feats.data.shape[0]
    allowed = np.ones((anchor_points.size, n_pixels), dtype=bool)
    allowed[pos[:, 0], pos[:, 1]] = False

    pairs = mine_pair_sets(
        ad.row_normalize(ad.take_rows(point_feats, anchor_points)),
        ad.row_normalize(pixel_feats),
        pos,
        allowed_neg=allowed,
        neg_ratio=neg_ratio,
    )
    diags.anchors_total = anchor_points.size
    diags.pairs_pos = pairs.pos_dist.data.size
    diags.pairs_neg = pairs.neg_dist.data.size
    return circle_loss(pairs, params), diags


def total_loss(l_coarse, l_fine, l_sig, l_d, weights=(1.0, 1.0, 1.0, 1.0)):
    """Unweighted sum of the four terms (weights exposed, defaulting to 1).

    A non-finite term aborts training naming the offender.
    """
    terms = {"coarse": l_coarse, "fine": l_fine, "sig": l_sig, "domain": l_d}
    for name, term in terms.items():
        value = term.item() if isinstance(term, ad.Tensor) else float(term)
        if not np.isfinite(value):
            raise NumericalAbort(name, value)
    total = ad.mul(_as_tensor_term(l_coarse), weights[0])
    for w, term in zip(weights[1:], (l_fine, l_sig, l_d)):
        total = ad.add(total, ad.mul(_as_tensor_term(term), w))
    return total


def _as_tensor_term(term):
    return term if isinstance(term, ad.Tensor) else ad.constant(float(term))
