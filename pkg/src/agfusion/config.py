"""Run configuration: a JSON document validated when it is loaded.

Unknown keys and wrong types are parse errors (:class:`ConfigError`);
geometry that the pipeline cannot run (window not dividing the map,
channels not divisible by heads) raises :class:`~agfusion.errors.ContractError`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .aggregation import FusionConfig, parse_strategy
from .autodiff import OptimConfig
from .degradation_sim import AblationConfig, SceneSpec
from .errors import ContractError
from .windowing import check_geometry

ABLATION_STRATEGIES = ("conv_fuser", "fixed:0.3", "fixed:0.5", "fixed:0.7", "adaptive")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config.{field_name}: {message}")
        self.field = field_name


@dataclass
class Geometry:
    height: int = 8
    width: int = 8
    channels: int = 8
    window: int = 4
    num_heads: int = 2
    depth: int = 1
    ffn_ratio: int = 4
    gate_mid: int | None = None

    def fusion(self, strategy: str = "adaptive") -> FusionConfig:
        return FusionConfig(self.channels, self.window, self.num_heads, self.depth,
                            self.ffn_ratio, self.gate_mid, strategy)


@dataclass
class Experiment:
    steps: int = 1500
    holdout_scenes: int = 16
    strategies: list[str] = field(default_factory=lambda: list(ABLATION_STRATEGIES))
    scene: dict = field(default_factory=dict)
    corrupt_modality: str = "lidar"
    corrupt_kind: str = "dropout"
    region_min: int = 4
    region_max: int = 10
    target_gain: float = 2.0
    window: int = 4
    num_heads: int = 4


@dataclass
class Bench:
    sizes: list[int] = field(default_factory=lambda: [8, 16, 32])
    windows: list[int] = field(default_factory=lambda: [4, 8])
    channels: int = 16
    num_heads: int = 4
    repeats: int = 3


@dataclass
class RunConfig:
    geometry: Geometry = field(default_factory=Geometry)
    strategy: str = "adaptive"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    optim: dict = field(default_factory=lambda: {"lr": 3e-3, "cosine": True, "total_steps": 1500})
    experiment: Experiment = field(default_factory=Experiment)
    bench: Bench = field(default_factory=Bench)
    gradcheck_tol: float = 1e-6
    out_dir: str = "agf_out"

    def validate(self) -> "RunConfig":
        g = self.geometry
        check_geometry(g.height, g.width, g.window)
        g.fusion(self.strategy)                         # channels/heads/strategy checks
        self.optim_config()
        for s in self.experiment.strategies:
            parse_strategy(s)
        if not self.seeds:
            raise ContractError("seeds must not be empty")
        for s in self.bench.sizes:
            if s < 1:
                raise ContractError(f"bench size {s} must be positive")
        if self.bench.channels % self.bench.num_heads:
            raise ContractError("bench channels must be divisible by bench num_heads")
        self.ablation(self.seeds[0])
        return self

    def optim_config(self) -> OptimConfig:
        return OptimConfig(**self.optim)

    def ablation(self, seed: int) -> AblationConfig:
        e = self.experiment
        scene = SceneSpec(**e.scene)
        return AblationConfig(
            seed=seed,
            steps=e.steps,
            holdout_scenes=e.holdout_scenes,
            scene=scene,
            fusion=FusionConfig(scene.channels, e.window, e.num_heads, self.geometry.depth,
                                self.geometry.ffn_ratio),
            optim=self.optim_config(),
            corrupt_modality=e.corrupt_modality,
            corrupt_kind=e.corrupt_kind,
            region_min=e.region_min,
            region_max=e.region_max,
            target_gain=e.target_gain,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


_NESTED = {"geometry": Geometry, "experiment": Experiment, "bench": Bench}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(where or "<root>", f"expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}" if where else unknown[0], "unknown key")
    kwargs = {}
    for name, value in raw.items():
        path = f"{where}.{name}" if where else name
        if cls is RunConfig and name in _NESTED:
            kwargs[name] = _build(_NESTED[name], value, path)
            continue
        default = getattr(cls(), name)
        if not _same_kind(default, value):
            raise ConfigError(path, f"expected {type(default).__name__}, got {type(value).__name__}")
        kwargs[name] = value
    return cls(**kwargs)


def _same_kind(default, value) -> bool:
    if default is None:
        return value is None or (isinstance(value, int) and not isinstance(value, bool))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, type(default))


def parse_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        cfg = _build(RunConfig, raw, "")
    except TypeError as exc:                           # e.g. bad keys inside optim / scene
        raise ConfigError("<fields>", str(exc)) from None
    try:
        return cfg.validate()
    except TypeError as exc:
        raise ConfigError("<fields>", str(exc)) from None


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    return parse_config(text)
