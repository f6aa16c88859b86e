"""Vertical federated learning: split neural networks with PSI-based data linkage.

Data owners hold disjoint feature slices keyed by shared IDs; a data
scientist holds the labels. Parties privately align their rows with a
Diffie-Hellman PSI protocol (Bloom-filter compressed), then train a split
network in lock step: owner activations flow to the scientist, gradient
slices flow back.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .data import FeaturePartition, LabeledSet
from .errors import VflkitError
from .linkage import GlobalIntersection, owner_link, scientist_link
from .nn import ModelSegment, SegmentSpec, init_segment, softmax_cross_entropy
from .simulate import simulate_run
from .training import EpochMetrics, OwnerState, TrainingConfig, run_owner, run_scientist

__all__ = [
    "__version__",
    "RunConfig",
    "FeaturePartition",
    "LabeledSet",
    "VflkitError",
    "GlobalIntersection",
    "owner_link",
    "scientist_link",
    "ModelSegment",
    "SegmentSpec",
    "init_segment",
    "softmax_cross_entropy",
    "simulate_run",
    "EpochMetrics",
    "OwnerState",
    "TrainingConfig",
    "run_owner",
    "run_scientist",
]
