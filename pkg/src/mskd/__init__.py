"""Multi-teacher single-student distillation for multi-organ segmentation."""

__version__ = "0.1.0"
