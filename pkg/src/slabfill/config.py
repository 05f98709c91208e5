"""JSON run configuration: generator / network / training / inference sections."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .synthgen import GeneratorConfig
from .trainer import DESK_NETWORK, DESK_SLICE_SIZE, DESK_TRAINING, TrainConfig
from .unet import NetworkConfig

SECTIONS = ("generator", "network", "training", "inference")


@dataclass
class InferenceConfig:
    spacing_mm: float = 1.0

    def __post_init__(self):
        if not (isinstance(self.spacing_mm, (int, float)) and self.spacing_mm > 0):
            raise ConfigError("inference.spacing_mm must be positive")

    def to_dict(self) -> dict:
        return {"spacing_mm": float(self.spacing_mm)}

    @classmethod
    def from_dict(cls, data: dict) -> "InferenceConfig":
        unknown = set(data) - {"spacing_mm"}
        if unknown:
            raise ConfigError(f"unknown inference keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    @classmethod
    def desk(cls) -> "RunConfig":
        return cls(
            generator=GeneratorConfig(slice_size=DESK_SLICE_SIZE),
            network=DESK_NETWORK,
            training=replace(DESK_TRAINING),
        )

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "network": self.network.to_dict(),
            "training": self.training.to_dict(),
            "inference": self.inference.to_dict(),
        }

    def merged(self, data: dict) -> "RunConfig":
        """Overlay a partial config document; unknown keys raise :class:`ConfigError`."""
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = self.to_dict()
        for section, values in data.items():
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object")
            base[section] = {**base[section], **values}
        return RunConfig.from_dict(base)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                generator=GeneratorConfig.from_dict(data.get("generator", {})),
                network=NetworkConfig.from_dict(data.get("network", {})),
                training=TrainConfig.from_dict(data.get("training", {})),
                inference=InferenceConfig.from_dict(data.get("inference", {})),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def load_run_config(path=None, desk: bool = False) -> RunConfig:
    cfg = RunConfig.desk() if desk else RunConfig()
    if path is None:
        return cfg
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return cfg.merged(data)
