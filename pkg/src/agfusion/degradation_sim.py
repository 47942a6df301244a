"""Synthetic paired camera/lidar BEV scenes with controllable sensor corruption,
and the fusion-strategy ablation trained on them."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import rng
from .aggregation import FusionConfig, PipelineParams, forward_pipeline, parse_strategy
from .autodiff import OptimConfig, ParamStore, adam_step, backward
from .errors import ContractError
from .gated_fusion import GateMap
from .tape import Tape, no_tape
from .tensor_core import BevMap, Modality, mse

# stream labels for the counter-based generator
_BLOB_STREAM, _CAM_STREAM, _LIDAR_STREAM, _REGION_STREAM, _CORRUPT_STREAM = 1, 2, 3, 4, 5


@dataclass
class SceneSpec:
    height: int = 16
    width: int = 16
    channels: int = 16
    num_blobs: int = 6
    seed: int = 0
    amp_min: float = 0.5
    amp_max: float = 1.5
    radius_min: float = 1.0
    radius_max: float = 3.0
    noise_sigma: float = 0.1

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1 or self.num_blobs < 0:
            raise ContractError("scene dimensions must be positive and num_blobs >= 0")
        if self.amp_min > self.amp_max or self.radius_min <= 0 or self.radius_min > self.radius_max:
            raise ContractError("blob amplitude/radius ranges are invalid")
        if self.noise_sigma < 0:
            raise ContractError("noise sigma must be nonnegative")


@dataclass
class Blob:
    cy: float
    cx: float
    radius: float
    amplitude: np.ndarray


def scene_blobs(spec: SceneSpec) -> list[Blob]:
    c = spec.channels
    u = rng.uniform(spec.seed, _BLOB_STREAM, spec.num_blobs * (3 + c))
    blobs = []
    for b in range(spec.num_blobs):
        row = u[b * (3 + c):(b + 1) * (3 + c)]
        blobs.append(Blob(
            cy=row[0] * spec.height,
            cx=row[1] * spec.width,
            radius=spec.radius_min + row[2] * (spec.radius_max - spec.radius_min),
            amplitude=spec.amp_min + row[3:] * (spec.amp_max - spec.amp_min),
        ))
    return blobs


def render_blobs(blobs: list[Blob], height: int, width: int, channels: int) -> np.ndarray:
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    out = np.zeros((height, width, channels))
    for b in blobs:
        w = np.exp(-((ys - b.cy) ** 2 + (xs - b.cx) ** 2) / (2.0 * b.radius ** 2))
        out += w[:, :, None] * b.amplitude
    return out


def gen_scene(spec: SceneSpec) -> tuple[BevMap, BevMap, BevMap]:
    """(camera, lidar, target): target is the blob field, each sensor adds its own noise."""
    H, W, C = spec.height, spec.width, spec.channels
    target = render_blobs(scene_blobs(spec), H, W, C)
    n = H * W * C
    cam = target + spec.noise_sigma * rng.normal(spec.seed, _CAM_STREAM, n).reshape(H, W, C)
    lidar = target + spec.noise_sigma * rng.normal(spec.seed, _LIDAR_STREAM, n).reshape(H, W, C)
    return BevMap(cam, Modality.CAMERA), BevMap(lidar, Modality.LIDAR), BevMap(target, Modality.FUSED)


@dataclass
class CorruptionSpec:
    """Degrade one modality inside the half-open rectangle [y0, y1) x [x0, x1)."""

    modality: str = "lidar"
    region: tuple[int, int, int, int] = (0, 0, 0, 0)
    kind: str = "dropout"
    sigma: float = 0.0
    radius: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.modality not in ("camera", "lidar"):
            raise ContractError(f"corruption modality must be camera or lidar, got {self.modality!r}")
        if self.kind not in ("dropout", "gaussian_noise", "blur"):
            raise ContractError(f"unknown corruption kind {self.kind!r}")
        self.region = tuple(int(v) for v in self.region)
        if len(self.region) != 4:
            raise ContractError("region must be (y0, x0, y1, x1)")

    def mask(self, height: int, width: int) -> np.ndarray:
        y0, x0, y1, x1 = self.region
        if not (0 <= y0 <= y1 <= height and 0 <= x0 <= x1 <= width):
            raise ContractError(f"region {self.region} outside a {height}x{width} map")
        m = np.zeros((height, width), dtype=bool)
        m[y0:y1, x0:x1] = True
        return m


def corrupt(F: BevMap, c: CorruptionSpec) -> BevMap:
    """Apply the corruption in-region; pixels outside are copied bit-for-bit."""
    H, W, C = F.shape
    mask = c.mask(H, W)
    src = F.tensor.data
    out = src.copy()
    y0, x0, y1, x1 = c.region
    if c.kind == "dropout":
        out[mask] = 0.0
    elif c.kind == "gaussian_noise":
        if c.sigma:
            n = int(mask.sum()) * C
            noise = c.sigma * rng.normal(c.seed, _CORRUPT_STREAM, n).reshape(-1, C)
            out[mask] = src[mask] + noise
    else:
        r = c.radius
        for y in range(y0, y1):
            for x in range(x0, x1):
                patch = src[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
                out[y, x] = patch.reshape(-1, C).mean(axis=0)
    return BevMap(out, F.modality)


@dataclass
class GateAlignment:
    inside: float
    outside: float

    @property
    def separation(self) -> float:
        return self.inside - self.outside


def gate_alignment(G: GateMap, c: CorruptionSpec, clean_side: str = "gate") -> GateAlignment:
    """Mean weight given to the clean modality inside and outside the corrupted region.

    ``clean_side`` names the gate endpoint that selects the clean modality:
    ``"gate"`` when the clean stream is multiplied by G, ``"complement"``
    when it is multiplied by 1 - G. Empty sides report NaN.
    """
    if clean_side not in ("gate", "complement"):
        raise ContractError(f"clean_side must be 'gate' or 'complement', got {clean_side!r}")
    g = G.values
    weight = g if clean_side == "gate" else 1.0 - g
    mask = c.mask(*g.shape)
    inside = float(weight[mask].mean()) if mask.any() else math.nan
    outside = float(weight[~mask].mean()) if (~mask).any() else math.nan
    return GateAlignment(inside, outside)


# -- ablation -----------------------------------------------------------------


@dataclass
class AblationConfig:
    """Degradation benchmark: lidar dropout in a random rectangle per scene."""

    seed: int = 0
    steps: int = 1500
    holdout_scenes: int = 16
    scene: SceneSpec = field(default_factory=lambda: SceneSpec())
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(channels=16, window=4, num_heads=4))
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-3, cosine=True, total_steps=1500))
    corrupt_modality: str = "lidar"
    corrupt_kind: str = "dropout"
    region_min: int = 4
    region_max: int = 10
    target_gain: float = 2.0

    def __post_init__(self):
        if self.fusion.channels != self.scene.channels:
            raise ContractError("fusion channels must equal scene channels")
        self.fusion.validate_map(self.scene.height, self.scene.width, self.scene.channels)
        if not 1 <= self.region_min <= self.region_max <= min(self.scene.height, self.scene.width):
            raise ContractError("corruption region size range is invalid")


@dataclass
class Sample:
    cam: BevMap
    lidar: BevMap
    target: np.ndarray
    corruption: CorruptionSpec


def make_sample(cfg: AblationConfig, split: int, index: int) -> Sample:
    """Scene ``index`` of a split (0 = train, 1 = holdout), corrupted per the config."""
    seed = rng.derive(cfg.seed, split, index)
    spec = replace(cfg.scene, seed=seed)
    cam, lidar, target = gen_scene(spec)
    u = rng.uniform(seed, _REGION_STREAM, 4)
    span = cfg.region_max - cfg.region_min + 1
    rh = cfg.region_min + min(int(u[0] * span), span - 1)
    rw = cfg.region_min + min(int(u[1] * span), span - 1)
    y0 = min(int(u[2] * (spec.height - rh + 1)), spec.height - rh)
    x0 = min(int(u[3] * (spec.width - rw + 1)), spec.width - rw)
    c = CorruptionSpec(cfg.corrupt_modality, (y0, x0, y0 + rh, x0 + rw), cfg.corrupt_kind,
                       sigma=1.0, radius=1, seed=rng.derive(seed, 7))
    if c.modality == "lidar":
        lidar = corrupt(lidar, c)
    else:
        cam = corrupt(cam, c)
    return Sample(cam, lidar, cfg.target_gain * target.tensor.data, c)


def clean_gate_side(corrupted_modality: str) -> str:
    """Gate endpoint of the clean modality: camera weight is G, lidar weight is 1 - G."""
    return "gate" if corrupted_modality == "lidar" else "complement"


def evaluate(samples: Iterable[Sample], cfg: AblationConfig, params: PipelineParams,
             strategy: str) -> dict:
    losses, inside, outside = [], [], []
    side = clean_gate_side(cfg.corrupt_modality)
    with no_tape():
        for s in samples:
            res = forward_pipeline(s.cam, s.lidar, cfg.fusion, params, "eval", strategy)
            losses.append(float(mse(res.Y.tensor, s.target).data))
            if res.G is not None:
                a = gate_alignment(res.G, s.corruption, side)
                inside.append(a.inside)
                outside.append(a.outside)
    out = {"mse": float(np.mean(losses))}
    if inside:
        out["gate_inside"] = float(np.mean(inside))
        out["gate_outside"] = float(np.mean(outside))
    return out


def run_ablation(cfg: AblationConfig, strategy: str, steps: int | None = None) -> dict:
    """Train one fusion strategy on the seeded scene stream; report holdout metrics.

    Every strategy starts from the same initial parameters and sees the same
    scenes in the same order. A non-finite loss ends the run with status
    ``"failed"``.
    """
    kind, _ = parse_strategy(strategy)
    steps = cfg.steps if steps is None else steps
    optim = cfg.optim
    if optim.cosine and steps:
        optim = replace(optim, total_steps=steps)
    params = PipelineParams.init(cfg.fusion, np.random.default_rng(rng.derive(cfg.seed, 99)))
    store = ParamStore.from_params(params, params.used_groups(strategy))
    status = "ok"
    train_losses = []
    t0 = time.perf_counter()
    for step in range(steps):
        s = make_sample(cfg, 0, step)
        with Tape() as tape:
            res = forward_pipeline(s.cam, s.lidar, cfg.fusion, params, "train", strategy)
            loss = mse(res.Y.tensor, s.target)
        value = float(loss.data)
        if not math.isfinite(value):
            status = "failed"
            break
        train_losses.append(value)
        backward(tape, loss, store=store)
        adam_step(store, optim, step)
    elapsed = time.perf_counter() - t0

    record = {
        "strategy": strategy,
        "kind": kind,
        "seed": cfg.seed,
        "steps": steps,
        "status": status,
        "train_mse": float(np.mean(train_losses[-50:])) if train_losses else math.nan,
        "train_seconds": elapsed,
    }
    if status == "ok":
        holdout = [make_sample(cfg, 1, i) for i in range(cfg.holdout_scenes)]
        ev = evaluate(holdout, cfg, params, strategy)
        record["holdout_mse"] = ev["mse"]
        record["gate_inside"] = ev.get("gate_inside", math.nan)
        record["gate_outside"] = ev.get("gate_outside", math.nan)
        if not math.isfinite(ev["mse"]):
            record["status"] = "failed"
    else:
        record.update(holdout_mse=math.nan, gate_inside=math.nan, gate_outside=math.nan)
    record["params"] = params
    return record


def rank(records: list[dict]) -> list[dict]:
    """Completed runs sorted by holdout MSE (best first), failed runs last."""
    ok = sorted((r for r in records if r["status"] == "ok"), key=lambda r: r["holdout_mse"])
    return ok + [r for r in records if r["status"] != "ok"]


@dataclass
class DirectionCheck:
    """Per-seed verdict on the ablation ordering and gate alignment."""

    seed: int
    adaptive: float
    best_fixed: float
    best_fixed_name: str
    conv_fuser: float
    gate_inside: float
    gate_outside: float

    @property
    def ordering(self) -> bool:
        return self.adaptive < self.best_fixed < self.conv_fuser

    def alignment(self, inside_min: float = 0.6, outside_band: float = 0.15) -> bool:
        return self.gate_inside > inside_min and abs(self.gate_outside - 0.5) <= outside_band


def direction_check(records: list[dict]) -> DirectionCheck:
    """Compare one seed's records: adaptive vs the best fixed gate vs conv_fuser.

    Failed runs count as infinite MSE.
    """
    def mse(r):
        return r["holdout_mse"] if r["status"] == "ok" else math.inf

    by_kind: dict[str, list[dict]] = {}
    for r in records:
        by_kind.setdefault(r["kind"], []).append(r)
    missing = {"adaptive", "fixed", "conv_fuser"} - set(by_kind)
    if missing:
        raise ContractError(f"direction check needs every strategy kind, missing {sorted(missing)}")
    seeds = {r["seed"] for r in records}
    if len(seeds) != 1:
        raise ContractError(f"records span several seeds: {sorted(seeds)}")
    fixed = min(by_kind["fixed"], key=mse)
    adaptive = by_kind["adaptive"][0]
    return DirectionCheck(
        seed=seeds.pop(),
        adaptive=mse(adaptive),
        best_fixed=mse(fixed),
        best_fixed_name=fixed["strategy"],
        conv_fuser=mse(by_kind["conv_fuser"][0]),
        gate_inside=adaptive.get("gate_inside", math.nan),
        gate_outside=adaptive.get("gate_outside", math.nan),
    )
