"""Stripe-wise filter pruning with learnable filter skeletons, in numpy."""

from .engine import StripeModel, export_model, run_model, stripe_conv_forward
from .layers import FilterSkeleton, FsConvLayer, fs_conv_backward, fs_conv_forward, merge_skeleton
from .prune import StripeLayer, count_flops, count_params, extract_stripes
from .sparsity import SparsityConfig, apply_threshold
from .train import TrainConfig

__all__ = ["FilterSkeleton", "FsConvLayer", "SparsityConfig", "StripeLayer", "StripeModel", "TrainConfig",
           "apply_threshold", "count_flops", "count_params", "export_model", "extract_stripes",
           "fs_conv_backward", "fs_conv_forward", "merge_skeleton", "run_model", "stripe_conv_forward"]
__version__ = "0.1.0"
