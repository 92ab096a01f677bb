"""Merge-and-run convolutional networks: blocks, path analysis, exact
rewrites, and a desk-scale training harness."""

from .blocks import (
    BlockKind,
    Branch,
    BranchSpec,
    MergeMapping,
    idempotence_check,
    inception_like_forward,
    k_branch_forward,
    merge_and_run_forward,
    merge_matrix,
    residual_forward,
    unrolled_flow_check,
)
from .data import LabeledImageSet, load_cifar10, synthetic_set
from .estimator import MergeRunClassifier
from .netbuilder import (
    NetworkSpec,
    build_long_branch_resnet,
    build_network,
    count_parameters,
)
from .paths import PathLengthDistribution, average_length, distribution_report, enumerate_paths
from .tensor import DimensionError, NumericError, Tensor
from .train import TrainConfig, he_init, lr_at, sgd_nesterov_step, train_loop
from .transforms import certify, lower_merge_and_run, widen_parallel_branches

__version__ = "0.1.0"

__all__ = [
    "BlockKind",
    "Branch",
    "BranchSpec",
    "DimensionError",
    "LabeledImageSet",
    "MergeMapping",
    "MergeRunClassifier",
    "NetworkSpec",
    "NumericError",
    "PathLengthDistribution",
    "Tensor",
    "TrainConfig",
    "average_length",
    "build_long_branch_resnet",
    "build_network",
    "certify",
    "count_parameters",
    "distribution_report",
    "enumerate_paths",
    "he_init",
    "idempotence_check",
    "inception_like_forward",
    "k_branch_forward",
    "load_cifar10",
    "lower_merge_and_run",
    "lr_at",
    "merge_and_run_forward",
    "merge_matrix",
    "residual_forward",
    "sgd_nesterov_step",
    "synthetic_set",
    "train_loop",
    "unrolled_flow_check",
    "widen_parallel_branches",
]
