"""Run configuration: strict schema, one JSON file per experiment.

Unknown keys are rejected at every nesting level so a typo cannot silently
fall back to a default. The resolved config is embedded in every run
manifest; manifests carry no wall-clock state, so reruns are byte-stable.
Only output paths may be overridden from the environment (FLOWCAST_OUT).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import AdvectionParams
from .errors import ConfigError
from .metrics import DEFAULT_THRESHOLDS


@dataclass
class DataConfig:
    h: int = 32
    w: int = 32
    t_total: int = 25
    n_train: int = 40
    n_val: int = 8
    n_test: int = 12
    n_cells: int = 2
    velocity: list | None = None  # fixed (vx, vy); null draws per sequence
    max_speed: float = 0.6
    diffusion: float = 0.02
    growth_decay: float = -0.02
    noise: float = 0.18
    noise_corr: float = 8.0

    def advection(self) -> AdvectionParams:
        return AdvectionParams(
            n_cells=self.n_cells,
            velocity=tuple(self.velocity) if self.velocity is not None else None,
            max_speed=self.max_speed,
            diffusion=self.diffusion,
            growth_decay=self.growth_decay,
            noise=self.noise,
            noise_corr=self.noise_corr,
        )


@dataclass
class WindowConfig:
    length: int = 25
    stride: int = 5
    split_in: int = 5


@dataclass
class BackboneTrainConfig:
    hid_s: int = 8
    hid_t: int = 32
    n_t: int = 3
    steps: int = 3000
    batch: int = 8


@dataclass
class FlowTrainConfig:
    base: int = 8
    mults: list = field(default_factory=lambda: [1, 2, 2])
    blocks: int = 1
    side_scales: list = field(default_factory=lambda: [1, 2])
    emb_dim: int = 64
    steps: int = 5000
    batch: int = 8
    variant: str = "standard"  # generator stage only


@dataclass
class OptimizerConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class SamplerSettings:
    steps_rectifier: int = 20
    steps_generator: int = 20
    count_first_rect_segment: bool = True


@dataclass
class MetricsConfig:
    thresholds: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    backbone: BackboneTrainConfig = field(default_factory=BackboneTrainConfig)
    rectifier: FlowTrainConfig = field(default_factory=FlowTrainConfig)
    generator: FlowTrainConfig = field(default_factory=FlowTrainConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self) -> "RunConfig":
        d = self.data
        if d.h not in (32, 64) or d.w not in (32, 64):
            raise ConfigError(f"grid must be 32 or 64 on each axis (U-Net scales need powers of two), got {d.h}x{d.w}")
        if d.t_total < self.window.length:
            raise ConfigError(f"t_total={d.t_total} shorter than the window length {self.window.length}")
        if self.window.split_in < 1 or self.window.split_in >= self.window.length:
            raise ConfigError("window split_in must be within the window")
        l_out = self.window.length - self.window.split_in
        if l_out % self.window.split_in:
            raise ConfigError(f"segmented training needs m={self.window.split_in} to divide L_out={l_out}")
        if self.generator.variant not in ("standard", "no_rectifier_y", "no_rectifier_residual"):
            raise ConfigError(f"unknown generator variant {self.generator.variant!r}")
        if self.rectifier.variant != "standard":
            raise ConfigError("the rectifier has no variants; set variant only on the generator")
        for name, sampler_steps in (("rectifier", self.sampler.steps_rectifier),
                                    ("generator", self.sampler.steps_generator)):
            if sampler_steps < 1:
                raise ConfigError(f"sampler steps for {name} must be >= 1")
        if not self.metrics.thresholds:
            raise ConfigError("need at least one verification threshold")
        return self

    @property
    def l_in(self) -> int:
        return self.window.split_in

    @property
    def l_out(self) -> int:
        return self.window.length - self.window.split_in


def _build(cls, value, path: str):
    if not dataclasses.is_dataclass(cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(value).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(value) - set(known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in value:
            continue
        sub = f.type if isinstance(f.type, type) else None
        # dataclass fields annotated via from __future__ import annotations are strings
        sub_cls = _FIELD_TYPES.get((cls.__name__, name))
        kwargs[name] = _build(sub_cls, value[name], f"{path}.{name}" if path else name) if sub_cls else value[name]
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_FIELD_TYPES = {
    ("RunConfig", "data"): DataConfig,
    ("RunConfig", "window"): WindowConfig,
    ("RunConfig", "backbone"): BackboneTrainConfig,
    ("RunConfig", "rectifier"): FlowTrainConfig,
    ("RunConfig", "generator"): FlowTrainConfig,
    ("RunConfig", "optimizer"): OptimizerConfig,
    ("RunConfig", "sampler"): SamplerSettings,
    ("RunConfig", "metrics"): MetricsConfig,
}


def config_from_dict(d: dict) -> RunConfig:
    cfg = _build(RunConfig, d, "")
    out_env = os.environ.get("FLOWCAST_OUT")
    if out_env:
        cfg.out = out_env
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(path, command: str, cfg: RunConfig, **extra) -> None:
    """Reproducibility record: resolved config + hash + command extras.

    Deliberately no timestamps or host info -- identical runs must produce
    identical manifests.
    """
    payload = {
        "command": command,
        "config": config_to_dict(cfg),
        "config_sha256": config_hash(cfg),
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
