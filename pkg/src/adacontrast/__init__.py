"""Semi-supervised contrastive segmentation at desk scale.

Unit-sphere class centers placed by uniformity descent, adaptive
center-to-class allocation, temperature schedules, contrastive losses with
hand-derived gradients, a small numpy encoder-decoder, synthetic long-tailed
scenes, and the training pipeline tying them together.
"""

__version__ = "0.1.0"
