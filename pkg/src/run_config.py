# Copyright 2024 D-Wave
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Run configuration: ``[model]``, ``[train]`` and ``[data]`` sections of ``key = value`` lines.

Every key has its default in ``app_configs``; unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import enum
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

from app_configs import (
    DATA_DEFAULTS,
    MODEL_DEFAULTS,
    THREADS_ENV_VAR,
    DEFAULT_THREADS,
    TOY_DATASETS,
    TOY_RESOLUTIONS,
    TRAIN_DEFAULTS,
)
from src.errors import ConfigError
from src.flow_enums import (
    AttentionActivation,
    AttentionKind,
    AttentionPosition,
    CouplingKind,
    DatasetKind,
    SplitRule,
)

RESOLVED_CONFIG_NAME = "config.resolved.ini"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    """Convert ``value`` to the type of ``default``; strings are parsed."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        kind = type(default).__name__
        raise ConfigError(f"[{section}] {key}: expected {kind}, got {value!r}") from None
    return str(value).strip()


def _resolve(
    section: str,
    defaults: Mapping[str, Any],
    values: Mapping[str, Any],
    enums: Mapping[str, type[enum.Enum]],
) -> dict[str, Any]:
    resolved = dict(defaults)
    for key, value in values.items():
        if key not in defaults:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        if isinstance(value, enum.Enum):
            value = value.value
        resolved[key] = _coerce(section, key, value, defaults[key])
    for key, enum_cls in enums.items():
        try:
            resolved[key] = enum_cls(resolved[key])
        except ValueError:
            allowed = ", ".join(str(member.value) for member in enum_cls)
            raise ConfigError(
                f"[{section}] {key}: {resolved[key]!r} is not one of {allowed}"
            ) from None
    return resolved


def _plain(value: Any) -> Any:
    return value.value if isinstance(value, enum.Enum) else value


class _Section:
    """Mapping helpers shared by the section dataclasses."""

    section = ""
    defaults: Mapping[str, Any] = {}
    enums: Mapping[str, type[enum.Enum]] = {}

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any] | None = None):
        config = cls(**_resolve(cls.section, cls.defaults, values or {}, cls.enums))
        config.validate()
        return config

    def to_mapping(self) -> dict[str, Any]:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}

    def replace(self, **changes):
        return type(self).from_mapping({**self.to_mapping(), **changes})

    def validate(self) -> None:
        pass


@dataclass(frozen=True)
class ModelConfig(_Section):
    """Architecture of a flow model.

    Attributes:
        levels: Number of flow levels ``L``.
        steps: Flow steps ``K`` per level.
        coupling: Elementwise map of the coupling layers.
        split_rule: Partition used by the coupling layers.
        channels: Hidden width of coupling networks.
        attention: Attention layer inserted once per step.
        position: Slot of the attention layer inside a step.
        heads: iSDP heads.
        patches: Requested iSDP patch count.
        activation: iSDP row activation.
        pure_eq6: Drop the iSDP diagonal stabilization.
        attention_channels: iMap pointwise convolution width, 0 for ``C``.
        mask_phase: Parity phase of the first step's 2D mask.
        mask_seed: Base seed of permuted 3D masks.
        mixture_components: Logistic components of mixture couplings.
        conditional: Build conditional steps driven by a condition image.
        condition_channels: Channels of the condition image.
        encoder_channels: Output channels of the condition encoder.
        input_channels: Input channels.
        input_height: Input height.
        input_width: Input width.
        seed: Parameter initialization seed.
    """

    section = "model"
    defaults = MODEL_DEFAULTS
    enums = {
        "coupling": CouplingKind,
        "split_rule": SplitRule,
        "attention": AttentionKind,
        "position": AttentionPosition,
        "activation": AttentionActivation,
    }

    levels: int = MODEL_DEFAULTS["levels"]
    steps: int = MODEL_DEFAULTS["steps"]
    coupling: CouplingKind = CouplingKind(MODEL_DEFAULTS["coupling"])
    split_rule: SplitRule = SplitRule(MODEL_DEFAULTS["split_rule"])
    channels: int = MODEL_DEFAULTS["channels"]
    attention: AttentionKind = AttentionKind(MODEL_DEFAULTS["attention"])
    position: AttentionPosition = AttentionPosition(MODEL_DEFAULTS["position"])
    heads: int = MODEL_DEFAULTS["heads"]
    patches: int = MODEL_DEFAULTS["patches"]
    activation: AttentionActivation = AttentionActivation(MODEL_DEFAULTS["activation"])
    pure_eq6: bool = MODEL_DEFAULTS["pure_eq6"]
    attention_channels: int = MODEL_DEFAULTS["attention_channels"]
    mask_phase: int = MODEL_DEFAULTS["mask_phase"]
    mask_seed: int = MODEL_DEFAULTS["mask_seed"]
    mixture_components: int = MODEL_DEFAULTS["mixture_components"]
    conditional: bool = MODEL_DEFAULTS["conditional"]
    condition_channels: int = MODEL_DEFAULTS["condition_channels"]
    encoder_channels: int = MODEL_DEFAULTS["encoder_channels"]
    input_channels: int = MODEL_DEFAULTS["input_channels"]
    input_height: int = MODEL_DEFAULTS["input_height"]
    input_width: int = MODEL_DEFAULTS["input_width"]
    seed: int = MODEL_DEFAULTS["seed"]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_channels, self.input_height, self.input_width)

    @property
    def dimension(self) -> int:
        return self.input_channels * self.input_height * self.input_width

    def validate(self) -> None:
        for key in ("levels", "steps", "channels", "heads", "patches", "mixture_components"):
            if getattr(self, key) < 1:
                raise ConfigError(f"[model] {key} must be at least 1")
        for key in ("input_channels", "input_height", "input_width"):
            if getattr(self, key) < 1:
                raise ConfigError(f"[model] {key} must be at least 1")
        if self.mask_phase not in (0, 1):
            raise ConfigError(f"[model] mask_phase must be 0 or 1, got {self.mask_phase}")
        if self.attention_channels < 0:
            raise ConfigError("[model] attention_channels must not be negative")
        factor = 2**self.levels
        if self.input_height % factor or self.input_width % factor:
            raise ConfigError(
                f"[model] input {self.input_height}x{self.input_width} is not divisible by "
                f"2^levels = {factor}"
            )
        if self.conditional:
            if self.coupling is not CouplingKind.AFFINE:
                raise ConfigError("[model] conditional models use affine coupling")
            if self.condition_channels < 1 or self.encoder_channels < 1:
                raise ConfigError("[model] condition and encoder channels must be at least 1")


@dataclass(frozen=True)
class TrainConfig(_Section):
    """Optimizer and loop settings."""

    section = "train"
    defaults = TRAIN_DEFAULTS

    lr: float = TRAIN_DEFAULTS["lr"]
    batch: int = TRAIN_DEFAULTS["batch"]
    iters: int = TRAIN_DEFAULTS["iters"]
    beta1: float = TRAIN_DEFAULTS["beta1"]
    beta2: float = TRAIN_DEFAULTS["beta2"]
    eps: float = TRAIN_DEFAULTS["eps"]
    clip: float = TRAIN_DEFAULTS["clip"]
    seed: int = TRAIN_DEFAULTS["seed"]
    checkpoint_every: int = TRAIN_DEFAULTS["checkpoint_every"]
    warmup: int = TRAIN_DEFAULTS["warmup"]
    log_every: int = TRAIN_DEFAULTS["log_every"]
    temperature: float = TRAIN_DEFAULTS["temperature"]
    grid_rows: int = TRAIN_DEFAULTS["grid_rows"]
    grid_cols: int = TRAIN_DEFAULTS["grid_cols"]

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"[train] lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"[train] batch must be at least 1, got {self.batch}")
        if self.iters < 0 or self.warmup < 0 or self.checkpoint_every < 0:
            raise ConfigError("[train] iters, warmup and checkpoint_every must not be negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("[train] beta1 and beta2 must lie in [0, 1)")
        if self.temperature < 0:
            raise ConfigError("[train] temperature must not be negative")
        if self.grid_rows < 1 or self.grid_cols < 1 or self.log_every < 1:
            raise ConfigError("[train] grid_rows, grid_cols and log_every must be at least 1")


@dataclass(frozen=True)
class DataConfig(_Section):
    """Dataset source and preprocessing."""

    section = "data"
    defaults = DATA_DEFAULTS
    enums = {"kind": DatasetKind}

    kind: DatasetKind = DatasetKind(DATA_DEFAULTS["kind"])
    name: str = DATA_DEFAULTS["name"]
    resolution: int = DATA_DEFAULTS["resolution"]
    n: int = DATA_DEFAULTS["n"]
    path: str = DATA_DEFAULTS["path"]
    crop: int = DATA_DEFAULTS["crop"]
    downscale: int = DATA_DEFAULTS["downscale"]
    condition: str = DATA_DEFAULTS["condition"]
    condition_factor: int = DATA_DEFAULTS["condition_factor"]
    seed: int = DATA_DEFAULTS["seed"]

    def validate(self) -> None:
        if self.kind is DatasetKind.TOY2D_GRID:
            if self.name not in TOY_DATASETS:
                raise ConfigError(
                    f"[data] unknown toy dataset {self.name!r}; choose from {', '.join(TOY_DATASETS)}"
                )
            if self.resolution not in TOY_RESOLUTIONS:
                raise ConfigError(f"[data] resolution must be one of {TOY_RESOLUTIONS}")
        if self.n < 1 or self.downscale < 1 or self.condition_factor < 1 or self.crop < 0:
            raise ConfigError("[data] n, downscale and condition_factor must be positive")
        if self.condition not in ("none", "downscale"):
            raise ConfigError(f"[data] condition must be 'none' or 'downscale', got {self.condition!r}")


@dataclass(frozen=True)
class RunConfig:
    """The three configuration sections of a run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_sections(self) -> dict[str, dict[str, Any]]:
        return {
            "model": self.model.to_mapping(),
            "train": self.train.to_mapping(),
            "data": self.data.to_mapping(),
        }

    @classmethod
    def from_sections(cls, sections: Mapping[str, Mapping[str, Any]]) -> RunConfig:
        unknown = set(sections) - {"model", "train", "data"}
        if unknown:
            raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")
        return cls(
            model=ModelConfig.from_mapping(sections.get("model", {})),
            train=TrainConfig.from_mapping(sections.get("train", {})),
            data=DataConfig.from_mapping(sections.get("data", {})),
        )

    def with_overrides(self, **changes) -> RunConfig:
        """Replace whole sections, e.g. ``with_overrides(train=...)``."""
        return dataclasses.replace(self, **changes)

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_sections().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                if isinstance(value, bool):
                    value = "true" if value else "false"
                elif isinstance(value, float):
                    value = repr(value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def write(self, directory: str) -> str:
        """Echo the resolved configuration into ``directory`` and return the file path."""
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, RESOLVED_CONFIG_NAME)
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.to_ini())
        return path


def parse_run_config(text: str) -> RunConfig:
    """Parse configuration text; missing keys take their defaults."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text)
    except configparser.Error as err:
        message = str(err).splitlines()[0]
        raise ConfigError(f"malformed configuration: {message}") from None
    return RunConfig.from_sections({name: dict(parser[name]) for name in parser.sections()})


def load_run_config(path: str | None = None) -> RunConfig:
    """Read a configuration file, or return all defaults when ``path`` is None."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except OSError as err:
        raise ConfigError(f"cannot read configuration {path}: {err.strerror}") from None
    return parse_run_config(text)


def worker_threads() -> int:
    """Worker cap from the environment, at least 1."""
    raw = os.environ.get(THREADS_ENV_VAR, "")
    if not raw:
        return DEFAULT_THREADS
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be at least 1, got {threads}")
    return threads
