"""Windowed-attention camera/lidar BEV fusion with an adaptive pixel-wise gate.

Every op records an explicit backward rule on a static tape, so the whole
pipeline trains and gradient-checks without an external autodiff library.
"""

from .aggregation import (
    FusionConfig,
    PhiFuseParams,
    PipelineParams,
    PipelineResult,
    aggregate,
    forward_pipeline,
    load_state_dict,
    residual_out,
    state_dict,
)
from .attention import MhaParams, SaeBlockParams, count_macs, cross_attend, mha, sae_block, sae_enhance
from .autodiff import OptimConfig, ParamStore, adam_step, backward, gradcheck
from .degradation_sim import (
    AblationConfig,
    CorruptionSpec,
    SceneSpec,
    corrupt,
    gate_alignment,
    gen_scene,
    run_ablation,
)
from .errors import ContractError, WeightsMismatch, WindowSizeError
from .gated_fusion import GateMap, GateNetParams, compute_gate, conv_fuser_baseline, fixed_gate, fuse_gated
from .tape import Tape, no_tape
from .tensor_core import BevMap, Modality, Tensor
from .tensor_io import FormatError, read_tensor, read_weights, write_tensor, write_weights
from .windowing import WindowSet, merge, partition

__version__ = "0.1.0"

__all__ = [
    "AblationConfig", "BevMap", "ContractError", "CorruptionSpec", "FormatError", "FusionConfig",
    "GateMap", "GateNetParams", "MhaParams", "Modality", "OptimConfig", "ParamStore", "PhiFuseParams",
    "PipelineParams", "PipelineResult", "SaeBlockParams", "SceneSpec", "Tape", "Tensor",
    "WeightsMismatch", "WindowSet", "WindowSizeError", "adam_step", "aggregate", "backward",
    "compute_gate", "conv_fuser_baseline", "corrupt", "count_macs", "cross_attend", "fixed_gate",
    "forward_pipeline", "fuse_gated", "gate_alignment", "gen_scene", "gradcheck", "load_state_dict",
    "mha", "merge", "no_tape", "partition", "read_tensor", "read_weights", "residual_out",
    "run_ablation", "sae_block", "sae_enhance", "state_dict", "write_tensor", "write_weights",
]
