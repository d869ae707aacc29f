"""Adversarial modal alignment: a domain classifier behind a gradient
reversal layer, plus an MMD diagnostic for the modality gap.

The classifier learns to tell image features (label 1) from point-cloud
features (label 0); the reversed gradient pushes the feature extractors to
erase that distinction. At inference none of this runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .errors import ConfigError, UsageError
from .layers import Mlp

PROB_CLAMP = 1e-7


class DomainClassifier:
    """Three fully connected layers (128, 64, 2) with a softmax head."""

    def __init__(self, rng, d_in, dims=(128, 64, 2), name="domain_clf"):
        self.mlp = Mlp(rng, [d_in, *dims], name)

    def params(self):
        return self.mlp.params()

    def __call__(self, feats):
        """Per-sample probabilities on the 2-simplex (rows sum to 1)."""
        return ad.softmax_rows(self.mlp(feats))


@dataclass
class DomainBatch:
    """Feature rows with domain labels: 1 = image, 0 = point cloud."""

    features: ad.Tensor
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape[0] != self.features.data.shape[0]:
            raise UsageError("one label per feature row required")
        object.__setattr__(self, "labels", labels.astype(np.float64))


def domain_loss(batch, classifier, lam):
    """Cross-entropy of the domain classifier behind grl(lambda).

    The classifier itself receives the plain gradient; the reversal applies
    only upstream of the features. Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the logs.
    """
    labels = batch.labels
    if labels.min() == labels.max():
        raise ConfigError("domain batch must contain both modalities")
    probs = classifier(ad.grl(batch.features, lam))
    d = ad.clip(ad.take_columns(probs, [1]), PROB_CLAMP, 1.0 - PROB_CLAMP)
    lbl = ad.constant(labels[:, None])
    per_sample = ad.add(
        ad.mul(lbl, ad.log(d)),
        ad.mul(ad.sub(1.0, lbl), ad.log(ad.sub(1.0, d))),
    )
    return ad.neg(ad.mean(per_sample))


def median_heuristic_bandwidths(x, y, factors=(0.5, 1.0, 2.0)):
    """Median pairwise distance of the pooled sample, scaled by factors."""
    pooled = np.vstack([x, y])
    dists = cdist(pooled, pooled)
    med = np.median(dists[np.triu_indices_from(dists, k=1)])
    if not np.isfinite(med) or med <= 0.0:
        med = 1.0
    return tuple(med * f for f in factors)


def mmd(x, y, bandwidths=None, unbiased=True):
    """Squared maximum mean discrepancy with a Gaussian-kernel mixture.

    The unbiased estimator excludes self-pairs; for equal sample counts the
    paired form also excludes matched cross-pairs, so identical samples give
    exactly zero. Diagnostic only; returns a plain float.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise UsageError("mmd needs at least two samples per side")
    if bandwidths is None:
        bandwidths = median_heuristic_bandwidths(x, y)

    dxx = cdist(x, x, "sqeuclidean")
    dyy = cdist(y, y, "sqeuclidean")
    dxy = cdist(x, y, "sqeuclidean")

    total = 0.0
    for h in bandwidths:
        kxx = np.exp(-dxx / (2.0 * h * h))
        kyy = np.exp(-dyy / (2.0 * h * h))
        kxy = np.exp(-dxy / (2.0 * h * h))
        if not unbiased:
            total += kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
            continue
        term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        if m == n:
            cross = 2.0 * (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
        else:
            cross = 2.0 * kxy.mean()
        total += term_x + term_y - cross
    return total / len(bandwidths)
