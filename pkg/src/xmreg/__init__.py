"""Cross-modal image-to-point-cloud registration, desk scale and trainable.

Subpackages by responsibility:

* :mod:`xmreg.autodiff` — tape-based reverse-mode differentiation
* :mod:`xmreg.geometry` — camera model, rigid transforms, partitions
* :mod:`xmreg.scenegen` — deterministic synthetic scene factory and dataset IO
* :mod:`xmreg.uhmm` — uncertainty-aware hierarchical matching
* :mod:`xmreg.amam` — adversarial modal alignment and the MMD diagnostic
* :mod:`xmreg.losses` — circle loss and total-loss assembly
* :mod:`xmreg.pose` — PnP + RANSAC pose regression and pose errors
* :mod:`xmreg.model` / :mod:`xmreg.harness` — full pipeline, trainer,
  evaluator, ablations, checkpoints
* :mod:`xmreg.cli` — the ``xmreg`` command line
"""

__version__ = "0.1.0"
