"""Few-shot RGB camera relocalization toolkit.

Pipeline stages: a view-insensitive patch feature encoder (trained with a
triplet loss across scenes), an on-the-spot one-to-many coordinate
regression tree, and a preemptive PnP-based RANSAC pose estimator, plus
synthetic-scene and dataset harnesses.
"""

__version__ = "0.1.0"

from .geometry import Intrinsics, Pose  # noqa: F401
