"""The full registration model: per-modality encoder stubs, the hierarchical
uncertainty-aware matcher, adversarial alignment hooks, and inference-time
correspondence extraction.

The ablation flags reproduce the module grid: baseline is encoders plus
per-scale cosine matching; interaction adds cross-attention; uncertainty
adds the Gaussian heads and the variance budget; the adversarial branch only
ever exists in the training graph, so inference is bit-identical with it on
or off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .amam import DomainBatch, DomainClassifier, domain_loss, mmd
from .errors import UsageError
from .geometry import (
    farthest_point_sample,
    gt_correspondences,
    patch_index_map,
    patch_overlap_matrix,
    point_to_node_partition,
)
from .layers import Linear, Mlp, collect_params
from .losses import coarse_loss, fine_loss, total_loss
from .uhmm import (
    InteractionStage,
    PatchPyramid,
    PyramidNet,
    UncertaintyHead,
    coarse_match,
    fine_match,
    l_sig,
    score_maps,
)


@dataclass
class ScenePrep:
    """Pure-geometry precomputation for one scene (cacheable)."""

    node_indices: np.ndarray
    assignment: np.ndarray
    gt_fine: np.ndarray  # (M, 2) ground-truth (pixel, point)
    overlap_fracs: list  # per scale (n_nodes, n_patches)
    patch_occlusion: np.ndarray  # scale-1 patches: fraction of occluded pixels


def prep_scene(sample, cfg):
    h, w = sample.depth.shape
    n_points = len(sample.cloud)
    n_nodes = min(cfg.n_nodes, n_points)
    node_indices = farthest_point_sample(sample.cloud.points, n_nodes)
    assignment = point_to_node_partition(
        sample.cloud, sample.cloud.points[node_indices]
    )
    gt = gt_correspondences(sample, dist_thresh=cfg.dist_thresh)
    overlaps = [
        patch_overlap_matrix(gt.fine, assignment, n_nodes, h, w, scale)
        for scale in (1, 2, 3)
    ]
    pix_to_patch = patch_index_map(h, w, 1)
    occ = sample.occlusion_mask.reshape(-1).astype(np.float64)
    n_patches = pix_to_patch.max() + 1
    patch_occ = np.zeros(n_patches)
    np.add.at(patch_occ, pix_to_patch, occ)
    patch_occ /= np.bincount(pix_to_patch, minlength=n_patches)
    return ScenePrep(
        node_indices=node_indices,
        assignment=assignment,
        gt_fine=gt.fine,
        overlap_fracs=overlaps,
        patch_occlusion=patch_occ,
    )


@dataclass
class ForwardState:
    pixel_feats: ad.Tensor  # (H*W, c) full-resolution image features
    point_feats: ad.Tensor  # (N, c)
    pyramid: PatchPyramid
    uncertain: object  # UncertainFeatures or None
    node_feats: list  # [f_p1, f_p2, f_p3]
    score_set: object
    grid: tuple


class RegistrationModel:
    """All learnable blocks, keyed by stable parameter names."""

    def __init__(self, in_channels, cfg):
        rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
        c = cfg.feat_dim
        self.cfg = cfg
        self.in_channels = in_channels
        self.img_enc = Mlp(rng, [in_channels, cfg.hidden_dim, c], "img_enc")
        self.pt_enc = Mlp(rng, [in_channels, cfg.hidden_dim, c], "pt_enc")
        self.pyramid_net = PyramidNet(rng, c, c)
        self.node_proj = Linear(rng, c, c, "node_proj")
        self.unc_heads = [
            UncertaintyHead(rng, c, f"unc{x}", variance_floor=cfg.variance_floor)
            for x in (1, 2, 3)
        ]
        self.stages = [
            InteractionStage(rng, c, "inter2"),
            InteractionStage(rng, c, "inter3"),
        ]
        self.classifier = DomainClassifier(rng, c)

    def params(self):
        return collect_params(
            self.img_enc,
            self.pt_enc,
            self.pyramid_net,
            self.node_proj,
            *self.unc_heads,
            *self.stages,
            self.classifier,
        )

    def load_param_arrays(self, arrays):
        params = self.params()
        missing = set(params) ^ set(arrays)
        if missing:
            raise UsageError(f"parameter names do not match checkpoint: {missing}")
        for name, tensor in params.items():
            if tensor.data.shape != arrays[name].shape:
                raise UsageError(f"shape mismatch for {name}")
            tensor.data[...] = arrays[name]

    # ------------------------------------------------------------------
    # forward

    def forward(self, sample, prep, eps_rng=None):
        """Run the matching stack; eps_rng None means inference (eps = 0)."""
        cfg = self.cfg
        h, w, cin = sample.image_features.shape
        if cin != self.in_channels:
            raise UsageError(
                f"sample has {cin} channels, model expects {self.in_channels}"
            )
        pixel_feats = self.img_enc(
            ad.constant(sample.image_features.reshape(-1, cin))
        )
        point_feats = self.pt_enc(ad.constant(sample.cloud.descriptors))
        pyramid = self.pyramid_net(pixel_feats, h, w)

        uncertain = None
        if cfg.enable_uncertainty:
            scales = []
            for head, feats in zip(self.unc_heads, pyramid.feats):
                shape = feats.data.shape
                eps = (
                    eps_rng.normal(size=shape) if eps_rng is not None
                    else np.zeros(shape)
                )
                scales.append(head(feats, eps))
            from .uhmm import UncertainFeatures

            uncertain = UncertainFeatures(scales=scales)
            matched_feats = [s.sample for s in scales]
        else:
            matched_feats = pyramid.feats

        pooled = ad.segment_mean(
            point_feats, prep.assignment, len(prep.node_indices)
        )
        f_p1 = ad.tanh(self.node_proj(pooled))
        if cfg.enable_interaction:
            f_p2, _ = self.stages[0](f_p1, matched_feats[0])
            f_p3, _ = self.stages[1](f_p2, matched_feats[1])
        else:
            f_p2 = f_p3 = f_p1

        match_pyramid = PatchPyramid(
            feats=matched_feats, grids=pyramid.grids, pixel_maps=pyramid.pixel_maps
        )
        score_set = score_maps([f_p1, f_p2, f_p3], match_pyramid)
        return ForwardState(
            pixel_feats=pixel_feats,
            point_feats=point_feats,
            pyramid=pyramid,
            uncertain=uncertain,
            node_feats=[f_p1, f_p2, f_p3],
            score_set=score_set,
            grid=(h, w),
        )

    # ------------------------------------------------------------------
    # training losses

    def train_losses(self, sample, prep, step_rng, gamma_sig):
        cfg = self.cfg
        state = self.forward(sample, prep, eps_rng=step_rng)
        circle = cfg.circle_params()

        matched_feats = (
            [s.sample for s in state.uncertain.scales]
            if state.uncertain is not None
            else state.pyramid.feats
        )
        l_coarse, coarse_diag = coarse_loss(
            state.node_feats,
            matched_feats,
            prep.overlap_fracs,
            circle,
            overlap_min=cfg.overlap_min,
            neg_ratio=cfg.neg_ratio,
        )
        l_fine, fine_diag = fine_loss(
            state.point_feats,
            state.pixel_feats,
            prep.gt_fine,
            circle,
            neg_ratio=cfg.neg_ratio,
            max_anchors=cfg.max_fine_anchors,
            rng=step_rng,
        )
        if state.uncertain is not None:
            l_sig_term = l_sig(*state.uncertain.entropies, gamma_sig)
        else:
            l_sig_term = ad.constant(0.0)
        if cfg.enable_amam:
            l_d = self._domain_term(state, prep, step_rng)
        else:
            l_d = ad.constant(0.0)

        total = total_loss(l_coarse, l_fine, l_sig_term, l_d, cfg.loss_weights)
        parts = {
            "coarse": l_coarse.item(),
            "fine": l_fine.item(),
            "sig": l_sig_term.item(),
            "domain": l_d.item(),
            "total": total.item(),
        }
        diags = {"coarse": coarse_diag, "fine": fine_diag}
        return total, parts, diags

    def _pooled_modalities(self, state, prep):
        """Patch-pooled image rows and node-pooled point rows (pre-UHMM)."""
        h, w = state.grid
        img_pool = ad.avg_pool_2x2(state.pixel_feats, h, w)
        pt_pool = ad.segment_mean(
            state.point_feats, prep.assignment, len(prep.node_indices)
        )
        return img_pool, pt_pool

    def _domain_term(self, state, prep, step_rng):
        img_pool, pt_pool = self._pooled_modalities(state, prep)
        n = min(img_pool.data.shape[0], pt_pool.data.shape[0])
        img_sel = np.sort(
            step_rng.choice(img_pool.data.shape[0], size=n, replace=False)
        )
        pt_sel = np.sort(
            step_rng.choice(pt_pool.data.shape[0], size=n, replace=False)
        )
        feats = ad.concat(
            [ad.take_rows(img_pool, img_sel), ad.take_rows(pt_pool, pt_sel)], axis=0
        )
        labels = np.concatenate([np.ones(n), np.zeros(n)])
        return domain_loss(
            DomainBatch(feats, labels), self.classifier, self.cfg.lambda_grl
        )

    def modality_mmd(self, sample, prep):
        """MMD between pooled image and point features (inference path)."""
        state = self.forward(sample, prep, eps_rng=None)
        img_pool, pt_pool = self._pooled_modalities(state, prep)
        return mmd(img_pool.data, pt_pool.data)

    def initial_entropy_sum(self, sample, prep):
        """Sum of per-scale entropies at eps = 0; seeds the gamma default."""
        state = self.forward(sample, prep, eps_rng=None)
        if state.uncertain is None:
            raise UsageError("uncertainty module is disabled")
        return float(sum(q.item() for q in state.uncertain.entropies))

    # ------------------------------------------------------------------
    # inference

    def match(self, sample, prep):
        """Deterministic correspondence extraction (eps = 0, no AMAM)."""
        state = self.forward(sample, prep, eps_rng=None)
        coarse = coarse_match(state.score_set, self.cfg.k)
        h, w = state.grid
        fine, skipped = fine_match(
            coarse,
            state.pixel_feats.data,
            state.point_feats.data,
            prep.assignment,
            h,
            w,
            self.cfg.k_f,
        )
        info = {
            "n_coarse": len(coarse),
            "n_fine": len(fine),
            "skipped_regions": skipped,
            "zero_norm_rows": state.score_set.zero_norm_count,
        }
        return fine, coarse, info

    def sigma_stats(self, sample, prep):
        """Scale-1 per-patch mean variance with occlusion labels."""
        if not self.cfg.enable_uncertainty:
            raise UsageError("uncertainty module is disabled")
        state = self.forward(sample, prep, eps_rng=None)
        sigma = state.uncertain.scales[0].sigma.data
        return (sigma**2).mean(axis=1), prep.patch_occlusion
