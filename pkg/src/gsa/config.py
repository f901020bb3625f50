"""Pipeline configuration: dataclasses plus an INI round-trip with ``--section.key=value`` overrides."""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .distill import AdaKDConfig, Schedule
from .errors import ConfigError
from .sparsity import FixedTau, GLConfig, PercentileTau, SSSConfig
from .train import SGDConfig


@dataclass
class StageFlags:
    gl: bool = True
    sss: bool = True
    adakd: bool = True

    def label(self) -> str:
        on = [n for n, v in (("GL", self.gl), ("SSS", self.sss), ("KD", self.adakd)) if v]
        return "+".join(on) if on else "baseline"


@dataclass
class StageEpochs:
    gl: int = 60
    sss: int = 85
    adakd: int = 60


@dataclass
class DataConfig:
    train_dir: str = ""
    val_dir: str = ""
    synthetic_train: int = 512
    synthetic_val: int = 256
    train_seed: int = 1
    val_seed: int = 2
    num_classes: int = 4
    image_size: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    width: int = 16
    batch_size: int = 16
    out_dir: str = "runs/default"
    scale_factor: float = 1.0
    teacher_path: str = ""
    teacher_multiplier: int = 2
    teacher_epochs: int = 205
    score_thresh: float = 0.25
    nms_iou: float = 0.5
    fps_warmup: int = 50
    fps_timed: int = 0
    resume: bool = True


@dataclass
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    stages: StageFlags = field(default_factory=StageFlags)
    epochs: StageEpochs = field(default_factory=StageEpochs)
    gl: GLConfig = field(default_factory=GLConfig)
    sss: SSSConfig = field(default_factory=SSSConfig)
    adakd: AdaKDConfig = field(default_factory=AdaKDConfig)
    sgd: SGDConfig = field(default_factory=SGDConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        if not (self.stages.gl or self.stages.sss or self.stages.adakd):
            raise ConfigError("at least one stage must be enabled (use run_baseline for plain training)")
        if self.run.scale_factor <= 0:
            raise ConfigError("scale_factor must be positive")
        for name in ("gl", "sss", "adakd"):
            if getattr(self.epochs, name) < 1:
                raise ConfigError(f"epochs.{name} must be >= 1")
        if not 1 <= self.data.num_classes <= 8:
            raise ConfigError("data.num_classes must lie in [1, 8]")

    # ------------------------------------------------------------ desk scaling

    def scaled(self, n: int, minimum: int = 1) -> int:
        return max(minimum, math.floor(n * self.run.scale_factor + 1e-9))

    def stage_epochs(self) -> dict[str, int]:
        return {s: self.scaled(getattr(self.epochs, s)) for s in ("gl", "sss", "adakd")}

    def scaled_sss(self) -> SSSConfig:
        return dataclasses.replace(self.sss, warmup_epochs=self.scaled(self.sss.warmup_epochs, 0),
                                   ramp_epochs=self.scaled(self.sss.ramp_epochs))

    def total_epochs(self) -> int:
        return sum(self.stage_epochs().values())


SECTIONS = ("run", "stages", "epochs", "gl", "sss", "adakd", "sgd", "data")


def _format(value) -> str:
    if isinstance(value, FixedTau):
        return f"fixed:{value.value!r}"
    if isinstance(value, PercentileTau):
        return f"percentile:{value.ratio!r}"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


def _parse(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if key == "sss.tau_mode":
            kind, _, num = raw.partition(":")
            if kind == "fixed":
                return FixedTau(float(num))
            if kind == "percentile":
                return PercentileTau(float(num))
            raise ValueError(raw)
        if key == "gl.target_layers":
            return None if raw in ("", "auto") else tuple(int(v) for v in raw.split(","))
        if isinstance(current, bool):
            low = raw.lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if isinstance(current, Enum):
            return type(current)(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def to_flat(cfg: PipelineConfig) -> dict[str, str]:
    out = {}
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            out[f"{section}.{f.name}"] = _format(getattr(sub, f.name))
    return out


def apply_overrides(cfg: PipelineConfig, flat: dict[str, str]) -> PipelineConfig:
    """Return a copy with ``section.key`` (or bare ``run`` keys) replaced."""
    values = {s: dataclasses.asdict(getattr(cfg, s)) if s != "sss" else dict(vars(cfg.sss)) for s in SECTIONS}
    for key, raw in flat.items():
        key = key.replace("-", "_")
        section, _, name = key.rpartition(".")
        section = section or "run"
        if section not in values or name not in values[section]:
            raise ConfigError(f"unknown config key {key!r}")
        values[section][name] = _parse(str(raw), getattr(getattr(cfg, section), name), f"{section}.{name}")
    try:
        new = PipelineConfig(**{s: type(getattr(cfg, s))(**values[s]) for s in SECTIONS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    new.validate()
    return new


def write_ini(cfg: PipelineConfig, path) -> Path:
    cp = configparser.ConfigParser()
    for key, value in to_flat(cfg).items():
        section, name = key.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value)
    path = Path(path)
    with path.open("w") as fh:
        cp.write(fh)
    return path


def read_ini(path, base: PipelineConfig | None = None) -> PipelineConfig:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    flat = {f"{s}.{k}": v for s in cp.sections() for k, v in cp.items(s)}
    return apply_overrides(base or PipelineConfig(), flat)


def desk_config(**overrides) -> PipelineConfig:
    """Settings used for the CPU-scale reproduction runs (scale 0.1, synthetic data)."""
    flat = {
        "run.scale_factor": "0.1",
        "sgd.lr": "0.1",
        "sgd.clip_norm": "2.0",
        "sss.gamma_target": "0.05",
    }
    flat.update({k: str(v) for k, v in overrides.items()})
    return apply_overrides(PipelineConfig(), flat)
