"""Two-stage malware family classifier with a spherical-boundary z-score OOD gate.

Pipeline: featurize raw bytes -> train an embedding MLP -> fit per-family
spherical Gaussian boundaries -> gate samples by multi-centroid z-scores ->
fuse gate verdict, stage-1 probabilities, and raw features in a second
network for the final (K+1)-way prediction.
"""

from oodgate.seeding import sub_seed

__all__ = ["sub_seed"]
__version__ = "0.1.0"
