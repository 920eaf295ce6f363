"""Cross-modal contrastive ECG representation learning in NumPy."""

__version__ = "0.1.0"
