"""Class-aware calibration and adaptive confidence thresholding for pseudo-label segmentation."""

__version__ = "0.1.0"
