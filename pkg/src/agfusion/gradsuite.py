"""Finite-difference checks of every differentiable op and of the full pipeline.

Each case builds fresh random inputs, so cases are independent and the
suite is reproducible from one seed. Inputs that put a ReLU pre-activation
within ``KINK_MARGIN`` of zero are redrawn: the central difference would
straddle the kink and measure a secant, not a derivative.

The perturbed forward passes run in extended precision (see
:func:`agfusion.autodiff.gradcheck`), so the oracle's own rounding sits
orders of magnitude below the 1e-6 tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .aggregation import FusionConfig, PipelineParams, aggregate, forward_pipeline
from .attention import MhaParams, SaeBlockParams, cross_attend, mha, sae_block
from .autodiff import GradcheckReport, gradcheck, named_tensors
from .gated_fusion import GateMap, GateNetParams, compute_gate, fuse_gated
from .tape import Tape, inject_fault, no_tape
from .tensor_core import BatchNormParams, BevMap, NormParams, Tensor
from .windowing import partition

KINK_MARGIN = 1e-3
MAX_REDRAWS = 50

# geometry of the pipeline cases
PIPE_H = PIPE_W = 4
PIPE_CFG = dict(channels=4, window=2, num_heads=2)


@dataclass
class Case:
    fn: Callable[[], Tensor]
    tensors: dict[str, Tensor]
    weighted: bool = True


def _t(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        # keep magnitudes away from zero (kinks, divisions)
        x = np.sign(x) * (lo + np.abs(x))
    return Tensor(x)


def _bevs(rng, h, w, c):
    return BevMap(rng.normal(size=(h, w, c)), "camera"), BevMap(rng.normal(size=(h, w, c)), "lidar")


def _mha_params(rng, c, heads):
    p = MhaParams.init(c, heads, rng)
    for b in (p.b_q, p.b_v, p.b_o):
        b.data[:] = rng.normal(0.0, 0.5, b.shape)
    return p


def _sae_params(rng, c, heads):
    p = SaeBlockParams.init(c, heads, rng)
    for name, t in named_tensors(p).items():
        if t.ndim == 1:
            t.data[:] = rng.normal(0.0, 0.5, t.shape) + (1.0 if name.endswith("gamma") else 0.0)
    p.mha.b_q.data[:] = rng.normal(0.0, 0.5, p.mha.b_q.shape)
    return p


def _pipeline_params(rng, cfg):
    p = PipelineParams.init(cfg, rng)
    for name, t in named_tensors(p).items():
        if t.ndim == 1:
            t.data[:] = rng.normal(0.0, 0.5, t.shape) + (1.0 if name.endswith("gamma") else 0.0)
    p.gate.w2.data[:] = rng.normal(0.0, 0.5, p.gate.w2.shape)
    p.phi.bn.running_mean[:] = rng.normal(0.0, 0.3, cfg.channels)
    p.phi.bn.running_var[:] = rng.uniform(0.5, 2.0, cfg.channels)
    return p


def _case_elementwise(op):
    def build(rng):
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        return Case(lambda: op(a, b), {"a": a, "b": b})
    return build


def _case_mul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4)            # broadcast over leading axes
    return Case(lambda: tc.mul(a, b), {"a": a, "b": b})


def _case_unary(op):
    def build(rng):
        x = _t(rng, 3, 5)
        return Case(lambda: op(x), {"x": x})
    return build


def _case_relu(rng):
    x = _t(rng, 4, 5, lo=0.05)
    return Case(lambda: tc.relu(x), {"x": x})


def _case_reshape(rng):
    x = _t(rng, 2, 6)
    return Case(lambda: tc.reshape(x, (3, 4)), {"x": x})


def _case_transpose(rng):
    x = _t(rng, 2, 3, 4)
    return Case(lambda: tc.transpose(x, (2, 0, 1)), {"x": x})


def _case_sum_all(rng):
    x = _t(rng, 3, 4)
    return Case(lambda: tc.sum_all(x), {"x": x}, weighted=False)


def _case_weighted_sum(rng):
    x, w = _t(rng, 3, 4), rng.normal(size=(3, 4))
    return Case(lambda: tc.weighted_sum(x, w), {"x": x}, weighted=False)


def _case_mse(rng):
    x, target = _t(rng, 3, 4), rng.normal(size=(3, 4))
    return Case(lambda: tc.mse(x, target), {"x": x}, weighted=False)


def _case_concat(rng):
    a, b, c = _t(rng, 2, 3, 2), _t(rng, 2, 3, 4), _t(rng, 2, 3, 1)
    return Case(lambda: tc.concat_channels([a, b, c]), {"a": a, "b": b, "c": c})


def _case_softmax(rng):
    x = _t(rng, 3, 5)
    return Case(lambda: tc.softmax(x, axis=-1), {"x": x})


def _case_layer_norm(rng):
    x = _t(rng, 3, 6)
    p = NormParams(rng.normal(1.0, 0.3, 6), rng.normal(0.0, 0.3, 6))
    return Case(lambda: tc.layer_norm(x, p), {"x": x, "gamma": p.gamma, "beta": p.beta})


def _case_batch_norm(mode):
    def build(rng):
        x = _t(rng, 3, 4, 5)
        p = BatchNormParams(rng.normal(1.0, 0.3, 5), rng.normal(0.0, 0.3, 5),
                            rng.normal(0.0, 0.3, 5), rng.uniform(0.5, 2.0, 5))
        return Case(lambda: tc.batch_norm(x, p, mode), {"x": x, "gamma": p.gamma, "beta": p.beta})
    return build


def _case_affine(rng):
    x, w, b = _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)
    return Case(lambda: tc.affine(x, w, b), {"x": x, "w": w, "b": b})


def _case_conv1x1(rng):
    x, w, b = _t(rng, 3, 3, 4), _t(rng, 4, 2), _t(rng, 2)
    return Case(lambda: tc.conv1x1(x, w, b), {"F": x, "w": w, "b": b})


def _case_attention_core(rng):
    q, k, v = _t(rng, 2, 3, 4), _t(rng, 2, 5, 4), _t(rng, 2, 5, 4)
    return Case(lambda: tc.attention_core(q, k, v, 0.5), {"q": q, "k": k, "v": v})


def _case_mha(rng):
    q, kv = _t(rng, 2, 4, 4), _t(rng, 2, 3, 4)
    p = _mha_params(rng, 4, 2)
    return Case(lambda: mha(q, kv, p), {"q": q, "kv": kv, **named_tensors(p, "mha")})


def _case_sae_block(rng):
    x = _t(rng, 2, 4, 4)
    p = _sae_params(rng, 4, 2)
    return Case(lambda: sae_block(x, p), {"x": x, **named_tensors(p, "sae")})


def _case_cross_attend(rng):
    cam, lidar = _bevs(rng, 4, 4, 4)
    p1, p2 = _mha_params(rng, 4, 2), _mha_params(rng, 4, 2)

    def fn():
        a, b = cross_attend(partition(cam, 2), partition(lidar, 2), p1, p2)
        return tc.concat_channels([a.tokens, b.tokens])

    return Case(fn, {"cam": cam.tensor, "lidar": lidar.tensor,
                     **named_tensors(p1, "c2l"), **named_tensors(p2, "l2c")})


def _case_compute_gate(rng):
    a, b = _bevs(rng, 3, 3, 4)
    p = GateNetParams.init(4, 3, rng)
    p.b1.data[:] = rng.normal(0.0, 0.5, 3)
    p.w2.data[:] = rng.normal(0.0, 1.0, (3, 1))
    return Case(lambda: compute_gate(a, b, p).tensor,
                {"a_c2l": a.tensor, "a_l2c": b.tensor, **named_tensors(p, "gate")})


def _case_fuse_gated(rng):
    a, b = _bevs(rng, 3, 3, 4)
    g = Tensor(rng.uniform(0.1, 0.9, (3, 3, 1)))
    return Case(lambda: fuse_gated(a, b, GateMap(g)).tensor,
                {"a_c2l": a.tensor, "a_l2c": b.tensor, "G": g})


def _case_aggregate(mode):
    def build(rng):
        maps = [BevMap(rng.normal(size=(4, 4, 4)), "fused") for _ in range(3)]
        cfg = FusionConfig(**PIPE_CFG)
        p = _pipeline_params(rng, cfg).phi
        tensors = {f"in{i}": m.tensor for i, m in enumerate(maps)}
        tensors.update(named_tensors(p, "phi"))
        if mode == "train":
            # batch statistics absorb any per-channel constant: zero gradient by construction
            tensors.pop("phi.conv_b")
        return Case(lambda: aggregate(*(partition(m, 2) for m in maps), p, mode).tensor, tensors)
    return build


def _case_pipeline(strategy, mode):
    def build(rng):
        cfg = FusionConfig(**PIPE_CFG)
        cam, lidar = _bevs(rng, PIPE_H, PIPE_W, cfg.channels)
        p = _pipeline_params(rng, cfg)
        tensors = {k: v for k, v in named_tensors(p).items()
                   if k.split(".", 1)[0] in p.used_groups(strategy)}
        if mode == "train":
            tensors.pop("phi.conv_b")
        tensors["F_cam"], tensors["F_lidar"] = cam.tensor, lidar.tensor
        return Case(lambda: forward_pipeline(cam, lidar, cfg, p, mode, strategy).Y.tensor, tensors)
    return build


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _case_elementwise(tc.add),
    "sub": _case_elementwise(tc.sub),
    "mul": _case_mul,
    "scale": _case_unary(lambda x: tc.scale(x, -1.7)),
    "one_minus": _case_unary(tc.one_minus),
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "sum_all": _case_sum_all,
    "weighted_sum": _case_weighted_sum,
    "mse": _case_mse,
    "relu": _case_relu,
    "sigmoid": _case_unary(tc.sigmoid),
    "concat_channels": _case_concat,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "batch_norm[train]": _case_batch_norm("train"),
    "batch_norm[eval]": _case_batch_norm("eval"),
    "affine": _case_affine,
    "conv1x1": _case_conv1x1,
    "attention_core": _case_attention_core,
    "mha": _case_mha,
    "sae_block": _case_sae_block,
    "cross_attend": _case_cross_attend,
    "compute_gate": _case_compute_gate,
    "fuse_gated": _case_fuse_gated,
    "aggregate[train]": _case_aggregate("train"),
    "aggregate[eval]": _case_aggregate("eval"),
    "pipeline[adaptive,train]": _case_pipeline("adaptive", "train"),
    "pipeline[adaptive,eval]": _case_pipeline("adaptive", "eval"),
    "pipeline[fixed:0.3,eval]": _case_pipeline("fixed:0.3", "eval"),
    "pipeline[conv_fuser,eval]": _case_pipeline("conv_fuser", "eval"),
}


def _usable(case: Case) -> bool:
    """No ReLU input within KINK_MARGIN of zero and no ReLU layer entirely off.

    A dead layer makes everything upstream of it a zero-gradient direction,
    which says nothing about the backward rules being checked.
    """
    with Tape() as tape:
        case.fn()
    for n in tape.nodes:
        if n.op != "relu" or not n.inputs[0].data.size:
            continue
        z = n.inputs[0].data
        if np.abs(z).min() < KINK_MARGIN or not (z > 0).any():
            return False
    return True


def build_case(name: str, seed: int = 0) -> Case:
    rng = np.random.default_rng([seed, sum(name.encode())])
    for _ in range(MAX_REDRAWS):
        case = CASES[name](rng)
        if _usable(case):
            return case
    raise RuntimeError(f"{name}: no usable draw in {MAX_REDRAWS} attempts")


def check_case(name: str, seed: int = 0, tol: float = 1e-6, step: float = 1e-6) -> GradcheckReport:
    case = build_case(name, seed)
    weights = None
    if case.weighted:
        # random loss weights: a plain sum hides errors that cancel (softmax, norms)
        with no_tape():
            shape = case.fn().shape
        weights = np.random.default_rng([seed, 7, sum(name.encode())]).normal(size=shape)
    return gradcheck(case.fn, case.tensors, tol=tol, step=step, name=name, weights=weights)


def run_suite(names=None, seed: int = 0, tol: float = 1e-6, fault: tuple[str, float] | None = None,
              progress: Callable[[GradcheckReport, float], None] | None = None) -> list[GradcheckReport]:
    """Check every case (or ``names``). ``fault`` = (op, factor) corrupts that op's backward."""
    reports = []
    for name in names or CASES:
        t0 = time.perf_counter()
        if fault is not None:
            with inject_fault(*fault):
                r = check_case(name, seed, tol)
        else:
            r = check_case(name, seed, tol)
        reports.append(r)
        if progress is not None:
            progress(r, time.perf_counter() - t0)
    return reports
