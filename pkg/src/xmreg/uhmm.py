"""Uncertainty-aware hierarchical matching.

The image side is a three-scale patch pyramid (2x2 average pooling plus a
learnable linear map and nonlinearity per stage). Each scale gets a
Gaussian uncertainty head: a mean map, a variance map through softplus with
a floor, a reparameterized sample, and a scalar entropy. Node features
cross-attend to the sampled patch features, per-scale cosine score maps are
fused by an elementwise max over aligned cells, and correspondences come
from mutual top-k selection, coarse to fine, with duplicate removal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, UsageError
from .geometry import CorrespondenceSet, patch_index_map
from .layers import Linear, Mlp, collect_params

TWO_PI_E = 2.0 * np.pi * np.e
VARIANCE_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# patch pyramid


@dataclass
class PatchPyramid:
    """Per-scale patch features plus patch-grid bookkeeping.

    ``feats[x]`` is an (h_x * w_x, c) tensor; ``grids[x]`` the (h_x, w_x)
    patch-grid dims; ``pixel_maps[x]`` maps every flat pixel to its patch at
    that scale, covering each pixel exactly once.
    """

    feats: list
    grids: list
    pixel_maps: list

    @property
    def n_patches(self):
        return [f.data.shape[0] for f in self.feats]


class PyramidNet:
    """Learnable three-stage pyramid: pool, project, tanh at each stage."""

    def __init__(self, rng, d_in, d_out, name="pyramid"):
        self.lin = [
            Linear(rng, d_in, d_out, f"{name}.scale1"),
            Linear(rng, d_out, d_out, f"{name}.scale2"),
            Linear(rng, d_out, d_out, f"{name}.scale3"),
        ]

    def params(self):
        return collect_params(*self.lin)

    def __call__(self, image_feats, height, width):
        return build_pyramid(image_feats, height, width, self.lin)


def build_pyramid(image_feats, height, width, linear_maps):
    """Three-scale pyramid from a flattened (H*W, C) feature grid.

    Scale 1 is 2x2 average pooling followed by a learnable map and tanh;
    scales 2 and 3 each pool the previous scale's output once more.
    """
    if height % 8 or width % 8:
        raise UsageError(f"grid {height}x{width} must be divisible by 8")
    feats, grids, pixel_maps = [], [], []
    current = image_feats
    h, w = height, width
    for scale, lin in enumerate(linear_maps, start=1):
        pooled = ad.avg_pool_2x2(current, h, w)
        h, w = h // 2, w // 2
        out = ad.tanh(lin(pooled))
        feats.append(out)
        grids.append((h, w))
        pixel_maps.append(patch_index_map(height, width, scale))
        current = out
    return PatchPyramid(feats=feats, grids=grids, pixel_maps=pixel_maps)


# ---------------------------------------------------------------------------
# uncertainty estimation


@dataclass
class UncertainScale:
    mu: ad.Tensor
    sigma: ad.Tensor  # standard deviation, strictly positive
    sample: ad.Tensor
    entropy: ad.Tensor  # scalar q for this scale


@dataclass
class UncertainFeatures:
    scales: list  # one UncertainScale per pyramid level

    @property
    def entropies(self):
        return [s.entropy for s in self.scales]

    @property
    def samples(self):
        return [s.sample for s in self.scales]


class UncertaintyHead:
    """Mean map plus softplus variance head for one pyramid scale.

    The mean map starts at identity (the pooled features already are local
    averages); the variance bias starts low so early samples stay close to
    the mean.
    """

    def __init__(self, rng, dim, name, init_var=1e-5, variance_floor=VARIANCE_FLOOR):
        self.mu_map = Linear(rng, dim, dim, f"{name}.mu", init="identity")
        self.var_map = Linear(rng, dim, dim, f"{name}.var")
        # start near-deterministic: the variance budget pulls entropy up to
        # its target without ever flooding the features with sample noise
        self.var_map.b.data[...] = np.log(np.expm1(init_var))  # softplus inverse
        self.variance_floor = variance_floor
        self.name = name

    def params(self):
        return collect_params(self.mu_map, self.var_map)

    def __call__(self, patch_feats, eps):
        return uncertainty_layer(
            patch_feats, eps, self.mu_map, self.var_map, self.variance_floor
        )


def uncertainty_layer(patch_feats, eps, mu_map, var_map, variance_floor):
    """Gaussian reconstruction of patch features.

    mu from a learnable map, sigma^2 = softplus(map) + floor, sample by the
    reparameterization trick, entropy averaged over patches. The variance
    branch reads the features without feeding gradient back into them: the
    entropy budget must allocate variance across patches, not remodel the
    features every other loss depends on (a constant-direction drag that an
    adaptive optimizer would amplify).
    """
    mu = mu_map(patch_feats)
    var_input = ad.constant(patch_feats.data)
    sigma_sq = ad.add(ad.softplus(var_map(var_input)), variance_floor)
    sigma = ad.sqrt(sigma_sq)
    sample = ad.reparam_sample(mu, sigma, eps)
    return UncertainScale(
        mu=mu, sigma=sigma, sample=sample, entropy=gaussian_entropy(sigma_sq)
    )


def gaussian_entropy(sigma_sq):
    """Mean differential entropy over patches of a diagonal Gaussian.

    Per patch: 0.5 * sum_dims log(2 pi e sigma^2); equals half the
    log-determinant of 2 pi e Sigma for diagonal Sigma.
    """
    n_patches = sigma_sq.data.shape[0]
    return ad.mul(
        ad.tsum(ad.log(ad.mul(sigma_sq, TWO_PI_E))), 0.5 / n_patches
    )


def l_sig(q1, q2, q3, gamma):
    """Variance budget hinge: max(0, gamma - (q1 + q2 + q3)).

    While the hinge is active the gradient into each entropy is exactly -1.
    """
    total = ad.add(ad.add(q1, q2), q3)
    return ad.relu(ad.sub(gamma, total))


# ---------------------------------------------------------------------------
# interaction stage


class InteractionStage:
    """Cross-attention from nodes to sampled patch features with a shallow
    projection and residual connection."""

    def __init__(self, rng, dim, name):
        from .layers import glorot

        self.w_q = ad.param(glorot(rng, dim, dim))
        self.w_k = ad.param(glorot(rng, dim, dim))
        self.w_v = ad.param(glorot(rng, dim, dim))
        self.proj = Mlp(rng, [dim, dim, dim], f"{name}.proj")
        self.name = name
        self.dim = dim

    def params(self):
        out = {
            f"{self.name}.wq": self.w_q,
            f"{self.name}.wk": self.w_k,
            f"{self.name}.wv": self.w_v,
        }
        out.update(self.proj.params())
        return out

    def __call__(self, node_feats, patch_feats):
        return interaction_stage(
            node_feats, patch_feats, self.w_q, self.w_k, self.w_v, self.proj
        )


def interaction_stage(node_feats, patch_feats, w_q, w_k, w_v, proj):
    """softmax(Q K^T / sqrt(d_k)) V, projected, added back to the nodes."""
    if node_feats.data.shape[1] != patch_feats.data.shape[1]:
        raise ShapeError(
            f"channel mismatch: nodes {node_feats.data.shape} vs "
            f"patches {patch_feats.data.shape}"
        )
    d_k = w_k.data.shape[1]
    q = ad.matmul(node_feats, w_q)
    k = ad.matmul(patch_feats, w_k)
    v = ad.matmul(patch_feats, w_v)
    attn = ad.softmax_rows(ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k)))
    return ad.add(node_feats, proj(ad.matmul(attn, v))), attn


# ---------------------------------------------------------------------------
# score maps and matching


@dataclass
class ScoreMapSet:
    """Per-scale cosine score maps plus their max-fused combination.

    ``fused`` lives on the scale-1 patch grid; coarser scales are broadcast
    to their descendant cells before the elementwise max. ``source_scale``
    records the winning scale (1-based) per cell, with ties taken by the
    lowest scale. ``zero_norm_count`` flags feature rows whose cosine was
    pinned to 0.
    """

    maps: list
    fused: ad.Tensor
    source_scale: np.ndarray
    parent_maps: list
    zero_norm_count: int = 0


def _parents_of_scale1(grids):
    """Column index maps lifting each coarser scale onto scale-1 cells."""
    h1, w1 = grids[0]
    r1, c1 = np.divmod(np.arange(h1 * w1), w1)
    parents = []
    for h, w in grids[1:]:
        factor = h1 // h
        parents.append((r1 // factor) * w + (c1 // factor))
    return parents


def score_maps(node_feat_list, pyramid, normalize=True):
    """Cosine score maps between per-scale node features and patch features,
    fused by elementwise max over aligned scale-1 cells."""
    if len(node_feat_list) != len(pyramid.feats):
        raise UsageError("need one node-feature block per pyramid scale")
    zero_rows = 0
    maps = []
    for nodes, patches in zip(node_feat_list, pyramid.feats):
        if normalize:
            zero_rows += int(
                np.sum(np.linalg.norm(nodes.data, axis=1) == 0.0)
                + np.sum(np.linalg.norm(patches.data, axis=1) == 0.0)
            )
            nodes = ad.row_normalize(nodes)
            patches = ad.row_normalize(patches)
        maps.append(ad.matmul(nodes, ad.transpose(patches)))

    parents = _parents_of_scale1(pyramid.grids)
    aligned = [maps[0]]
    for sub_map, parent in zip(maps[1:], parents):
        aligned.append(ad.take_columns(sub_map, parent))
    fused, winner = ad.elementwise_max(aligned)
    return ScoreMapSet(
        maps=maps,
        fused=fused,
        source_scale=winner + 1,
        parent_maps=parents,
        zero_norm_count=zero_rows,
    )


def mutual_topk(scores, k):
    """Pairs (i, j) where j is in row i's top-k and i is in column j's top-k.

    Score ties break to the lower index; pairs come back sorted by
    descending score (then indices). ``k`` larger than a dimension is
    clamped with a warning.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    n_rows, n_cols = scores.shape
    if k > n_rows or k > n_cols:
        warnings.warn(
            f"k={k} exceeds score-map dims {scores.shape}; clamping",
            stacklevel=2,
        )
    k_row = min(k, n_cols)
    k_col = min(k, n_rows)

    col_idx = np.arange(n_cols)
    row_top = np.zeros(scores.shape, dtype=bool)
    for i in range(n_rows):
        order = np.lexsort((col_idx, -scores[i]))
        row_top[i, order[:k_row]] = True
    row_idx = np.arange(n_rows)
    col_top = np.zeros(scores.shape, dtype=bool)
    for j in range(n_cols):
        order = np.lexsort((row_idx, -scores[:, j]))
        col_top[order[:k_col], j] = True

    pairs = np.argwhere(row_top & col_top)
    vals = scores[pairs[:, 0], pairs[:, 1]]
    order = np.lexsort((pairs[:, 1], pairs[:, 0], -vals))
    return pairs[order], vals[order]


@dataclass
class CoarseMatches:
    """Mutual top-k cells of the fused map, with their source scale.

    ``cells`` are scale-1 column indices (for mutuality checks); ``patches``
    are the indices at the winning scale (for fine refinement).
    """

    nodes: np.ndarray
    cells: np.ndarray
    patches: np.ndarray
    scales: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return self.nodes.shape[0]


def coarse_match(score_set, k):
    """Mutual top-k over the fused score map, attributed to source scales."""
    pairs, vals = mutual_topk(score_set.fused.data, k)
    scales = score_set.source_scale[pairs[:, 0], pairs[:, 1]]
    patches = np.empty(len(pairs), dtype=np.intp)
    for i, (cell, scale) in enumerate(zip(pairs[:, 1], scales)):
        patches[i] = (
            cell if scale == 1 else score_set.parent_maps[scale - 2][cell]
        )
    return CoarseMatches(
        nodes=pairs[:, 0].astype(np.intp),
        cells=pairs[:, 1].astype(np.intp),
        patches=patches,
        scales=scales.astype(np.intp),
        scores=vals,
    )


def fine_match(coarse, pixel_feats, point_feats, node_assignment, height, width,
               k_f):
    """Dense pixel-point matches inside each coarse region.

    Features are unit-normalized, cosine similarity is scanned with mutual
    top-k_f per region, and duplicate (pixel, point) pairs arising from
    overlapping scales keep their highest-scoring instance.
    """
    pixel_feats = np.asarray(pixel_feats, dtype=np.float64)
    point_feats = np.asarray(point_feats, dtype=np.float64)
    fi = _unit_rows(pixel_feats)
    fp = _unit_rows(point_feats)
    node_assignment = np.asarray(node_assignment, dtype=np.intp)
    pixel_maps = {s: patch_index_map(height, width, s) for s in (1, 2, 3)}

    skipped = 0
    raw_pairs = []
    raw_scores = []
    regions = {
        (int(n), int(p), int(s))
        for n, p, s in zip(coarse.nodes, coarse.patches, coarse.scales)
    }
    for node, patch, scale in sorted(regions):
        pixels = np.nonzero(pixel_maps[scale] == patch)[0]
        points = np.nonzero(node_assignment == node)[0]
        if pixels.size == 0 or points.size == 0:
            skipped += 1
            continue
        local = fi[pixels] @ fp[points].T
        pairs, vals = mutual_topk(local, k_f)
        for (pi, pj), val in zip(pairs, vals):
            raw_pairs.append((int(pixels[pi]), int(points[pj])))
            raw_scores.append(float(val))

    fine, scores = dedup_matches(raw_pairs, raw_scores)
    return CorrespondenceSet(fine=fine, fine_scores=scores), skipped


def dedup_matches(pairs, scores):
    """Drop duplicate (pixel, point) pairs, keeping the highest score.

    Output is sorted by descending score, then pixel, then point.
    """
    seen = {}
    for key, val in zip(map(tuple, pairs), scores):
        if key not in seen or val > seen[key]:
            seen[key] = val
    if not seen:
        return np.zeros((0, 2), dtype=np.intp), np.zeros(0)
    items = sorted(seen.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    return (
        np.array([key for key, _ in items], dtype=np.intp),
        np.array([val for _, val in items]),
    )


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), 0.0)
