"""Multi-modal fine-grained face-forgery detection.

Richest-patch SRM noise extraction, dual vision/language transformer
encoders trained from scratch, gated sample-pair contrastive alignment, and
a composite cross-entropy + KL + contrastive objective, with a training and
evaluation harness.
"""

__version__ = "0.1.0"
