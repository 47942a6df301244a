"""Shared builders for tests: random maps and fully randomized pipeline parameters."""

import numpy as np

from agfusion.aggregation import FusionConfig, PipelineParams
from agfusion.autodiff import named_tensors
from agfusion.tensor_core import BevMap


def bev_pair(seed, shape=(8, 8, 8), nonneg=False):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=shape), rng.normal(size=shape)
    if nonneg:
        a, b = np.abs(a), np.abs(b)
    return BevMap(a, "camera"), BevMap(b, "lidar")


def random_params(cfg: FusionConfig, seed: int) -> PipelineParams:
    """Every tensor random, including biases, norm affines, gate output and BN statistics."""
    rng = np.random.default_rng([seed, 99])
    p = PipelineParams.init(cfg, rng)
    for name, t in named_tensors(p).items():
        if t.ndim == 1:
            t.data[:] = rng.normal(0.0, 0.3, t.shape) + (1.0 if name.endswith("gamma") else 0.0)
    p.gate.w2.data[:] = rng.normal(0.0, 0.5, p.gate.w2.shape)
    p.phi.bn.running_mean[:] = rng.normal(0.0, 0.3, cfg.channels)
    p.phi.bn.running_var[:] = rng.uniform(0.5, 2.0, cfg.channels)
    return p
