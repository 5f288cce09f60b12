"""Per-joint hand inflammation detection pipeline.

Synthetic data generation, global/local dual-encoder modeling,
self-distillation pretraining, focal-loss fine-tuning, and
imbalance-aware cross-validated evaluation.
"""

__version__ = "0.1.0"
