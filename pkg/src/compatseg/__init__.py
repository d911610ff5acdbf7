"""Compatible learning for partially supervised multi-structure segmentation."""

__version__ = "0.1.0"
