"""Two-head noisy-label training with dynamic sample reweighting,
self-distillation, and label-noise detection."""

__version__ = "0.1.0"
