"""Stereo-pair gesture recognition engine.

Pipeline: decode stereo images, resize, run both through a shared
convolutional backbone, fuse the flattened features, and classify with a
tree of fully-connected softmax heads.  Includes the evaluation suite
(per-class measures, box statistics, k-fold cross-validation) and seeded
synthetic datasets for desk-scale verification.
"""

__version__ = "0.1.0"
