"""Few-shot sequence labeling with label-prompted token-level contrastive learning."""

__version__ = "0.1.0"
