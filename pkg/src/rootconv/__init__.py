"""Grouped-convolution ("root module") networks: kernels, architectures, cost model,
training and covariance analysis."""
from .arch import (GroupingSchedule, LayerSpec, NetSpec, NetSpecError, TransformError, apply_root_transform,
                   make_arch, make_googlenet, make_nin, make_resnet50, make_resnet200, make_schedule,
                   make_tiny_convnet)
from .cost import CostReport, compare, conv_cost, net_cost
from .tensor import count_macs, gemm, gemm_batched, set_threads

__version__ = "0.1.0"

__all__ = [
    "GroupingSchedule",
    "LayerSpec",
    "NetSpec",
    "NetSpecError",
    "TransformError",
    "apply_root_transform",
    "make_arch",
    "make_googlenet",
    "make_nin",
    "make_resnet50",
    "make_resnet200",
    "make_schedule",
    "make_tiny_convnet",
    "CostReport",
    "compare",
    "conv_cost",
    "net_cost",
    "count_macs",
    "gemm",
    "gemm_batched",
    "set_threads",
]
