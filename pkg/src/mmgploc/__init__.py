"""Semi-supervised acoustic source localization toolkit.

Implements multiple-manifold Gaussian process regression over relative
transfer function features, a rectangular-room acoustics simulator, maximum
likelihood hyperparameter learning, streaming model adaptation, and
reference localization baselines.
"""

__version__ = "0.1.0"
