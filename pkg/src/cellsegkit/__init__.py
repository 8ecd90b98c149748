"""Framework-free toolkit for cell segmentation under extreme class imbalance."""

__version__ = "0.1.0"
