"""Adversarial alignment tests: cross-entropy closed forms, the identity-GRL
comparison oracle, the adversarial sign test, and MMD against a double-loop
kernel sum."""

import numpy as np
import pytest

from xmreg import autodiff as ad
from xmreg.amam import (
    DomainBatch,
    DomainClassifier,
    domain_loss,
    median_heuristic_bandwidths,
    mmd,
)
from xmreg.errors import ConfigError, UsageError


def make_batch(rng, n_img=6, n_pt=6, c=5):
    feats = rng.normal(size=(n_img + n_pt, c))
    labels = np.concatenate([np.ones(n_img), np.zeros(n_pt)])
    return feats, labels


class TestDomainClassifier:
    def test_output_on_simplex(self, rng):
        clf = DomainClassifier(rng, d_in=5)
        probs = clf(ad.constant(rng.normal(size=(7, 5))))
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs.data > 0)

    def test_layer_dims(self, rng):
        clf = DomainClassifier(rng, d_in=9)
        dims = [layer.w.data.shape for layer in clf.mlp.layers]
        assert dims == [(9, 128), (128, 64), (64, 2)]


class TestDomainLoss:
    def test_uniform_predictions_closed_form(self, rng):
        """Zeroed final layer yields exact 0.5 probabilities, so ln 2."""
        clf = DomainClassifier(rng, d_in=4)
        clf.mlp.layers[-1].w.data[...] = 0.0
        clf.mlp.layers[-1].b.data[...] = 0.0
        feats, labels = make_batch(rng, c=4)
        loss = domain_loss(DomainBatch(ad.constant(feats), labels), clf, 0.01)
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_perfect_predictions_near_zero(self, rng):
        """Saturated logits produce post-clamp loss below 1e-6."""
        clf = DomainClassifier(rng, d_in=2)
        for layer in clf.mlp.layers:
            layer.w.data[...] = 0.0
            layer.b.data[...] = 0.0
        # single saturated path: x0 -> hidden0 -> hidden0 -> logits (-40, 40)
        clf.mlp.layers[0].w.data[0, 0] = 50.0
        clf.mlp.layers[1].w.data[0, 0] = 50.0
        clf.mlp.layers[2].w.data[0, 1] = 40.0
        clf.mlp.layers[2].w.data[0, 0] = -40.0
        feats = np.array([[1.0, 0.0], [-1.0, 0.0]] * 3)
        labels = np.array([1.0, 0.0] * 3)
        loss = domain_loss(DomainBatch(ad.constant(feats), labels), clf, 0.01)
        assert 0.0 <= loss.item() <= 1e-6

    def test_single_domain_batch_rejected(self, rng):
        clf = DomainClassifier(rng, d_in=3)
        with pytest.raises(ConfigError):
            domain_loss(
                DomainBatch(ad.constant(rng.normal(size=(4, 3))), np.ones(4)),
                clf,
                0.01,
            )

    @pytest.mark.parametrize("lam", [0.001, 0.01, 0.1])
    def test_feature_gradient_is_minus_lambda_times_identity_path(self, rng, lam):
        """Identity-GRL comparison oracle: swap grl for the identity and the
        feature gradient must flip sign and scale by lambda, to 1e-10."""
        clf = DomainClassifier(rng, d_in=5)
        raw, labels = make_batch(rng, c=5)

        feats = ad.param(raw)
        with ad.Tape():
            ad.backward(domain_loss(DomainBatch(feats, labels), clf, lam))
        grad_grl = feats.grad.copy()
        for p in clf.params().values():
            p.zero_grad()

        ident = ad.param(raw)
        with ad.Tape():
            probs = clf(ident)  # identity path: no grl
            d = ad.clip(ad.take_columns(probs, [1]), 1e-7, 1 - 1e-7)
            lbl = ad.constant(labels[:, None])
            loss = ad.neg(
                ad.mean(
                    ad.add(
                        ad.mul(lbl, ad.log(d)),
                        ad.mul(ad.sub(1.0, lbl), ad.log(ad.sub(1.0, d))),
                    )
                )
            )
            ad.backward(loss)
        rel = np.max(np.abs(grad_grl - (-lam) * ident.grad)) / np.max(
            np.abs(ident.grad)
        )
        assert rel <= 1e-10

    def test_classifier_receives_unflipped_gradient(self, rng):
        """A descent step on the classifier params must decrease the loss."""
        clf = DomainClassifier(rng, d_in=4)
        raw, labels = make_batch(rng, c=4)
        batch = DomainBatch(ad.constant(raw), labels)
        with ad.Tape():
            loss0 = domain_loss(batch, clf, 0.01)
            ad.backward(loss0)
        for p in clf.params().values():
            p.data -= 0.05 * p.grad
            p.zero_grad()
        loss1 = domain_loss(batch, clf, 0.01)
        assert loss1.item() < loss0.item()

    def test_adversarial_sign_on_linear_extractor(self, rng):
        """One descent step on a linear feature extractor through the GRL
        must not decrease the frozen classifier's loss."""
        clf = DomainClassifier(rng, d_in=4)
        x = rng.normal(size=(16, 6))
        labels = np.concatenate([np.ones(8), np.zeros(8)])
        w = ad.param(rng.normal(size=(6, 4)) * 0.5)

        def loss_value():
            return domain_loss(
                DomainBatch(ad.matmul(ad.constant(x), w), labels), clf, 0.05
            )

        with ad.Tape():
            before = loss_value()
            ad.backward(before)
        w.data -= 0.1 * w.grad  # descent step through the reversed gradient
        after = loss_value()
        assert after.item() >= before.item() - 1e-12


class TestMmd:
    def test_identical_samples_near_zero(self, rng):
        x = rng.normal(size=(12, 3))
        assert mmd(x, x.copy(), unbiased=False) == pytest.approx(0.0, abs=1e-15)
        assert abs(mmd(x, x.copy())) <= 1e-12

    def test_separated_blobs_large(self, rng):
        x = rng.normal(size=(20, 3)) * 0.05
        y = rng.normal(size=(20, 3)) * 0.05 + 50.0
        assert mmd(x, y) > 0.5

    def test_matches_double_loop_oracle(self, rng):
        x = rng.normal(size=(9, 4))
        y = rng.normal(size=(7, 4)) + 0.5
        bandwidths = median_heuristic_bandwidths(x, y)
        got = mmd(x, y, bandwidths)

        total = 0.0
        for h in bandwidths:
            def k(a, b):
                return np.exp(-np.sum((a - b) ** 2) / (2.0 * h * h))

            xx = sum(
                k(x[i], x[j]) for i in range(9) for j in range(9) if i != j
            ) / (9 * 8)
            yy = sum(
                k(y[i], y[j]) for i in range(7) for j in range(7) if i != j
            ) / (7 * 6)
            xy = sum(k(x[i], y[j]) for i in range(9) for j in range(7)) / (9 * 7)
            total += xx + yy - 2 * xy
        assert got == pytest.approx(total / 3.0, abs=1e-12)

    def test_too_few_samples_rejected(self, rng):
        with pytest.raises(UsageError):
            mmd(rng.normal(size=(1, 3)), rng.normal(size=(5, 3)))
