"""Depthwise channel-expansion CNN blocks with an analytic cost model.

Building blocks (PSD, DPD and their ResNet / MobileNetV2 baselines), the
network architectures built from them, parameter / MAC counting, and a
numpy training pipeline.
"""
from .analysis import (CostReport, CountingPolicy, compare_networks, count_network, dwc_cost,
                       expansion_ratio, pwc_cost)
from .arch import (NetworkSpec, builtin_spec, build_network, emit_spec, network_backward,
                   network_forward, parse_spec)
from .blocks import BlockSpec, block_backward, block_forward, build_block
from .data import Dataset, augment_batch, load_cifar, synth_dataset
from .estimator import DPDNetClassifier
from .tensor import he_normal_init, make_rng, tensor_new
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BlockSpec", "CostReport", "CountingPolicy", "DPDNetClassifier", "Dataset", "NetworkSpec",
    "TrainConfig", "augment_batch", "block_backward", "block_forward", "build_block",
    "build_network", "builtin_spec", "compare_networks", "count_network", "dwc_cost",
    "emit_spec", "expansion_ratio", "he_normal_init", "load_cifar", "make_rng",
    "network_backward", "network_forward", "parse_spec", "pwc_cost", "synth_dataset",
    "tensor_new", "train",
]
