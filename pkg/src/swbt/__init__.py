"""Similarity-weighted behavior transformer for offline imitation learning.

Pipeline: masked self-supervised pretraining of a multi-modal trajectory
transformer on expert plus imperfect demonstrations, nearest-expert
similarity scoring of imperfect segments, then quality-weighted behavior
cloning.
"""
from ._accel import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
