"""Channel-count search for convolutional networks guided by FLOPs utilization."""

__version__ = "0.1.0"

from .adjuster import AdjusterConfig, AdjustmentTrace, NetworkAdjuster, run
from .fur_probe import FurReport, ProbePlan, build_probe_plan, estimate_fur
from .io import dump_channel_config, load_channel_config, load_topology
from .mini_engine import CNNEvaluator, ConvNetClassifier, SurrogateLogEvaluator, SyntheticDatasetSpec
from .oracle import exhaustive_search
from .topology import ChannelConfig, LayerSpec, NetworkTopology, dflops_dc, flops, scale_to_budget

__all__ = [
    "AdjusterConfig",
    "AdjustmentTrace",
    "CNNEvaluator",
    "ChannelConfig",
    "ConvNetClassifier",
    "FurReport",
    "LayerSpec",
    "NetworkAdjuster",
    "NetworkTopology",
    "ProbePlan",
    "SurrogateLogEvaluator",
    "SyntheticDatasetSpec",
    "build_probe_plan",
    "dflops_dc",
    "dump_channel_config",
    "estimate_fur",
    "exhaustive_search",
    "flops",
    "load_channel_config",
    "load_topology",
    "run",
    "scale_to_budget",
]
