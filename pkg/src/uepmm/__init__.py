"""Coded distributed matrix multiplication with unequal error protection.

Sub-products ``C_np = A_n B_p`` of a block-partitioned product are protected
by random linear codes whose windows follow the norm-based importance of the
row and column blocks (NOW-UEP and EW-UEP), and compared against MDS,
uncoded and block-repetition baselines under exponential straggling.
"""

__version__ = "0.1.0"

from uepmm.blockmat import (
    BlockPartition,
    ClassProfile,
    DimensionMismatchError,
    build_class_profile,
    classify_by_norm,
    norm_permutation,
    partition,
)
from uepmm.coding import CodedTask, WindowDistribution
from uepmm.decode import DecodeReport, ReceivedSet, decode, loss, normalized_loss
from uepmm.latency import ExponentialLatency, arrival_pmf, sample_arrivals

__all__ = [
    "BlockPartition",
    "ClassProfile",
    "CodedTask",
    "DecodeReport",
    "DimensionMismatchError",
    "ExponentialLatency",
    "ReceivedSet",
    "WindowDistribution",
    "arrival_pmf",
    "build_class_profile",
    "classify_by_norm",
    "decode",
    "loss",
    "norm_permutation",
    "normalized_loss",
    "partition",
    "sample_arrivals",
]
