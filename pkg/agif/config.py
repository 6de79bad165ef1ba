import os
import typing
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Sequence, Union

import yaml
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .model import ModelConfig
from .training import TrainConfig
from .util import ConfigError

Overrides = Union[Sequence[str], Mapping[str, Any]]


class BuiltInConfigName(Enum):
    MIXATIS = "mixatis"
    MIXSNIPS = "mixsnips"
    DSTC4 = "dstc4"
    MICRO = "micro"

    @property
    def path(self) -> str:
        return os.path.join(os.path.dirname(__file__), "configs", f"{self.value}.yaml")


def _build(cls, data: Any):
    """Instantiate a config dataclass from plain data, checking keys and scalar types."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{cls.__name__}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        if key not in hints or key.startswith("_"):
            raise ConfigError(f"Unknown {cls.__name__} field {key!r}")
        expected = hints[key]
        if expected is bool and not isinstance(value, bool):
            raise ConfigError(f"{cls.__name__}.{key}: expected a boolean, got {value!r}")
        if expected is int and (isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value):
            raise ConfigError(f"{cls.__name__}.{key}: expected an integer, got {value!r}")
        if expected is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{cls.__name__}.{key}: expected a number, got {value!r}")
        kwargs[key] = int(value) if expected is int else float(value) if expected is float else value
    try:
        return cls(**kwargs)
    except ValueError as e:
        # Enum fields reject unknown values
        raise ConfigError(f"{cls.__name__}: {e}") from e


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        unknown = set(data) - {"model", "train"}
        if unknown:
            raise ConfigError(f"Unknown configuration sections: {sorted(unknown)}")
        return cls(model=_build(ModelConfig, data.get("model")), train=_build(TrainConfig, data.get("train")))

    @classmethod
    def from_file(cls, path: str, overrides: Optional[Overrides] = None) -> "RunConfig":
        return load_run_config(path, overrides)

    @classmethod
    def from_built_in(cls, name: BuiltInConfigName, overrides: Optional[Overrides] = None) -> "RunConfig":
        return load_run_config(name.path, overrides)

    def to_dict(self) -> Dict[str, Dict]:
        model = self.model.to_dict()
        # Vocabulary sizes come from the data, never from a config file.
        for key in ("vocab_size", "num_intents", "num_slots"):
            model.pop(key)
        return {"model": model, "train": self.train.to_dict()}

    def to_omegaconf(self) -> DictConfig:
        return OmegaConf.create(self.to_dict())

    def save(self, path: str) -> None:
        OmegaConf.save(self.to_omegaconf(), path)


def load_run_config(path: Optional[str] = None, overrides: Optional[Overrides] = None) -> RunConfig:
    """
    Defaults, then the YAML or JSON file at ``path``, then ``overrides`` (a
    dotlist like ``["model.num_layers=3"]`` or a nested mapping).  Enum fields
    take their values, e.g. ``model.interaction_mode=gcn``.
    """
    merged = RunConfig().to_omegaconf()
    OmegaConf.set_struct(merged, True)
    try:
        if path is not None:
            merged = OmegaConf.merge(merged, OmegaConf.load(path))
        if overrides:
            if isinstance(overrides, Mapping):
                extra = OmegaConf.create(dict(overrides))
            else:
                extra = OmegaConf.from_dotlist(list(overrides))
            merged = OmegaConf.merge(merged, extra)
    except OmegaConfBaseException as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse configuration file {path}: {e}") from e
    return RunConfig.from_dict(OmegaConf.to_container(merged, resolve=True))

