"""Adversarially augmented training for a tiny single-stage detector.

Clean images and one-step adversarial images are routed through separate
batch-norm branches of a shared network; the auxiliary branches are dropped
for inference.
"""

__version__ = "0.1.0"
