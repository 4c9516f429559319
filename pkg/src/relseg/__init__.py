"""Relation U-Net segmentation with confidence from paired inputs.

A small numpy autodiff engine, the two-input U-Net, a synthetic ellipse
corpus and the train/infer/evaluate pipeline built on them.
"""

__version__ = "0.1.0"
