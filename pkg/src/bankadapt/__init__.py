"""Classifier adaptation by retrieving task-related records from a frozen
image-text embedding bank and training on them with pseudo-label and
image-text contrastive objectives alongside the supervised loss."""

__version__ = "0.1.0"
