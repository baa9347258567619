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

"""Multi-level flow model: squeeze, ``K`` flow steps and a split prior per level."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from src import masking, numkit
from src.attention import IMapAttention, ISdpAttention
from src.errors import ConfigError, ShapeError
from src.flow_enums import AttentionKind, AttentionPosition, CouplingKind, SplitRule
from src.flow_layers import (
    Actnorm,
    AffineCoupling,
    ConditionalCoupling,
    ConditionalInjector,
    ConditionEncoder,
    FlowLayer,
    Inv1x1,
    MixtureCoupling,
    SplitPrior,
    Squeeze,
    standard_normal_log_prob,
)
from src.masking import CheckerboardMask
from src.numkit import Parameter, Tensor
from src.run_config import ModelConfig

logger = logging.getLogger(__name__)

# Attention goes before the step layer at this index; pos4 appends it.
_ATTENTION_SLOT = {
    AttentionPosition.POS1: 0,
    AttentionPosition.POS2: 1,
    AttentionPosition.POS3: 2,
}


class LatentParts(NamedTuple):
    """Top-level latent plus the latents factored out by each split, in level order."""

    top: Tensor
    splits: list[Tensor]


class ForwardResult(NamedTuple):
    """Latents, total per-sample log-determinant and per-sample prior log-density."""

    latents: LatentParts
    logdet: Tensor
    log_prior: Tensor

    @property
    def log_prob(self) -> Tensor:
        return self.logdet + self.log_prior


class SampleResult(NamedTuple):
    x: Tensor
    latents: LatentParts


class Reconstruction(NamedTuple):
    x: Tensor
    max_abs_error: float


@dataclass
class FlowLevel:
    """One resolution of the flow: squeeze, step layers and an optional split."""

    index: int
    shape: tuple[int, int, int]
    squeeze: Squeeze
    layers: list[FlowLayer] = field(default_factory=list)
    split: SplitPrior | None = None


def bits_per_dim(log_prob, dimension: int) -> float | np.ndarray:
    """``-log p / (D ln 2) + 8`` for data dequantized from 256 levels into ``[0, 1)``."""
    if dimension < 1:
        raise ConfigError(f"dimension must be positive, got {dimension}")
    return -np.asarray(log_prob, dtype=np.float64) / (dimension * math.log(2.0)) + 8.0


def _mask_seed(base: int, level: int, step: int) -> int:
    return int(np.random.SeedSequence([base, level, step]).generate_state(1)[0])


class FlowModel:
    """The composed flow ``x -> z``.

    Use :func:`build` to construct one from a :class:`ModelConfig`.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.levels: list[FlowLevel] = []
        self.encoder: ConditionEncoder | None = None
        self.mask_seeds: dict[str, int] = {}

    def layers(self) -> list[FlowLayer]:
        """Every invertible layer in forward order, squeezes included."""
        result = []
        for level in self.levels:
            result.append(level.squeeze)
            result.extend(level.layers)
        return result

    def parameters(self) -> list[Parameter]:
        params = []
        if self.encoder is not None:
            params.extend(self.encoder.parameters())
        for level in self.levels:
            for layer in level.layers:
                params.extend(layer.parameters())
            if level.split is not None:
                params.extend(level.split.parameters())
        return params

    def parameter_registry(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def actnorms(self) -> list[Actnorm]:
        return [layer for layer in self.layers() if isinstance(layer, Actnorm)]

    @property
    def initialized(self) -> bool:
        return all(layer.initialized for layer in self.actnorms())

    def mark_initialized(self) -> None:
        """Treat the current actnorm parameters as already data-initialized."""
        for layer in self.actnorms():
            layer.initialized = True

    @property
    def top_shape(self) -> tuple[int, int, int]:
        return self.levels[-1].shape

    def _check_input(self, x: Tensor) -> None:
        if x.shape[1:] != self.config.input_shape:
            raise ShapeError(f"input {x.shape} does not match model input {self.config.input_shape}")

    def condition_features(self, condition: Tensor | None, batch: int) -> list[Tensor | None]:
        """Encoder features for every level, or ``None`` per level for unconditional models."""
        if self.encoder is None:
            if condition is not None:
                raise ShapeError("unconditional model was given a condition")
            return [None] * len(self.levels)
        if condition is None:
            raise ShapeError("conditional model needs a condition")
        expected = (batch, self.config.condition_channels) + self.config.input_shape[1:]
        if condition.shape != expected:
            raise ShapeError(f"condition {condition.shape} does not match {expected}")
        return self.encoder.features(condition, len(self.levels))

    def forward(self, x: Tensor, condition: Tensor | None = None) -> ForwardResult:
        """Map ``x`` to its latents; ``log p(x) = log_prior + logdet``."""
        self._check_input(x)
        batch = x.shape[0]
        features = self.condition_features(condition, batch)
        h = x
        logdet = numkit.zeros((batch, 1, 1, 1))
        log_prior = numkit.zeros((batch, 1, 1, 1))
        splits = []
        for level, feature in zip(self.levels, features):
            h = level.squeeze.forward(h).y
            for layer in level.layers:
                h, layer_logdet = layer.forward(h, feature)
                logdet = logdet + layer_logdet
            if level.split is not None:
                kept, latent, split_log_prob = level.split.forward(h)
                h = kept
                splits.append(latent)
                log_prior = log_prior + split_log_prob
        log_prior = log_prior + standard_normal_log_prob(h)
        return ForwardResult(LatentParts(h, splits), logdet, log_prior)

    def log_prob(self, x: Tensor, condition: Tensor | None = None) -> Tensor:
        return self.forward(x, condition).log_prob

    def mean_nll(self, x: Tensor, condition: Tensor | None = None) -> Tensor:
        """Mean negative log-likelihood over the batch, a scalar tensor."""
        log_prob = self.log_prob(x, condition)
        return numkit.mul(numkit.sum_all(log_prob), -1.0 / x.shape[0])

    def inverse(self, latents: LatentParts, condition: Tensor | None = None) -> Tensor:
        """Map latents back to data."""
        features = self.condition_features(condition, latents.top.shape[0])
        h = latents.top
        for level, feature in zip(reversed(self.levels), reversed(features)):
            if level.split is not None:
                h = level.split.inverse(h, latents.splits[level.index])
            for layer in reversed(level.layers):
                h = layer.inverse(h, feature)
            h = level.squeeze.inverse(h)
        return h

    def sample(
        self,
        n: int,
        temperature: float,
        rng: np.random.Generator | None = None,
        condition: Tensor | None = None,
    ) -> SampleResult:
        """Draw ``n`` samples with every prior's noise scaled by ``temperature``.

        Temperature 0 follows the prior means and needs no generator. Without
        ``rng`` the noise comes from a generator seeded with the config seed.
        """
        if temperature < 0:
            raise ConfigError(f"temperature must not be negative, got {temperature}")
        rng = np.random.default_rng(self.config.seed) if rng is None else rng
        features = self.condition_features(condition, n)
        if temperature == 0:
            top = numkit.zeros((n,) + self.top_shape)
        else:
            top = numkit.constant(rng.standard_normal((n,) + self.top_shape) * temperature)
        h = top
        splits: list[Tensor] = [None] * (len(self.levels) - 1)
        for level, feature in zip(reversed(self.levels), reversed(features)):
            if level.split is not None:
                latent = level.split.draw(h, temperature, rng)
                splits[level.index] = latent
                h = level.split.inverse(h, latent)
            for layer in reversed(level.layers):
                h = layer.inverse(h, feature)
            h = level.squeeze.inverse(h)
        return SampleResult(h, LatentParts(top, splits))

    def reconstruct(self, x: Tensor, condition: Tensor | None = None) -> Reconstruction:
        """Run forward then inverse and report the max-abs reconstruction error.

        The inverse pass is compared against every recorded forward activation and
        the cumulative error per layer is logged at DEBUG level.
        """
        self._check_input(x)
        features = self.condition_features(condition, x.shape[0])
        activations: list[list[Tensor]] = []
        h = x
        splits = []
        for level, feature in zip(self.levels, features):
            trail = [h]
            h = level.squeeze.forward(h).y
            for layer in level.layers:
                trail.append(h)
                h = layer.forward(h, feature).y
            trail.append(h)
            activations.append(trail)
            if level.split is not None:
                h, latent, _ = level.split.forward(h)
                splits.append(latent)

        depth = 0
        for level, feature, trail in zip(
            reversed(self.levels), reversed(features), reversed(activations)
        ):
            if level.split is not None:
                h = level.split.inverse(h, splits[level.index])
            for layer, expected in zip(reversed(level.layers), reversed(trail[1:-1])):
                h = layer.inverse(h, feature)
                depth += 1
                logger.debug(
                    "reconstruct: %d layers inverted, error %.3e after %s",
                    depth,
                    float(np.abs(h.data - expected.data).max()),
                    layer.name,
                )
            h = level.squeeze.inverse(h)
        error = float(np.abs(h.data - x.data).max())
        return Reconstruction(h, error)

    def log_prob_chunks(
        self,
        x: np.ndarray,
        condition: np.ndarray | None = None,
        chunk: int = 256,
        threads: int = 1,
    ) -> np.ndarray:
        """Per-sample log-density of a large array, evaluated in chunks.

        Chunks run on up to ``threads`` workers and are concatenated in chunk order.
        """
        starts = list(range(0, x.shape[0], chunk))

        def evaluate(start: int) -> np.ndarray:
            with numkit.paused():
                cond = None if condition is None else Tensor(condition[start : start + chunk])
                return self.log_prob(Tensor(x[start : start + chunk]), cond).data.reshape(-1)

        if not self.initialized and starts:
            first = [evaluate(starts[0])]
            starts = starts[1:]
        else:
            first = []
        with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
            rest = list(executor.map(evaluate, starts))
        return np.concatenate(first + rest) if first + rest else np.zeros(0)


def _attention_layer(
    config: ModelConfig,
    name: str,
    shape: tuple[int, int, int],
    mask: CheckerboardMask,
    rng: np.random.Generator,
) -> FlowLayer:
    channels, height, width = shape
    if config.attention is AttentionKind.IMAP:
        return IMapAttention(
            name, channels, height, width, mask, rng, attention_channels=config.attention_channels
        )
    return ISdpAttention(
        name,
        channels,
        height,
        width,
        mask,
        rng,
        heads=config.heads,
        patches=config.patches,
        activation=config.activation,
        pure_eq6=config.pure_eq6,
    )


def _step_layers(
    model: FlowModel,
    config: ModelConfig,
    level: int,
    step: int,
    shape: tuple[int, int, int],
    rng: np.random.Generator,
) -> list[FlowLayer]:
    channels, height, width = shape
    prefix = f"level{level}.step{step}"
    phase = (config.mask_phase + step) % 2

    coupling_mask = None
    if config.split_rule is SplitRule.CHECKERBOARD:
        coupling_mask = masking.make_mask_2d(height, width, phase)
    elif config.split_rule is SplitRule.PERMUTED:
        seed = _mask_seed(config.mask_seed, level, step)
        model.mask_seeds[f"{prefix}.coupling"] = seed
        coupling_mask = masking.make_mask_3d(channels, height, width, seed)

    layers: list[FlowLayer] = [
        Actnorm(f"{prefix}.actnorm", channels),
        Inv1x1(f"{prefix}.inv1x1", channels, rng),
    ]
    if config.conditional:
        feature_channels = model.encoder.feature_channels(level)
        layers.append(
            ConditionalInjector(
                f"{prefix}.injector", channels, config.channels, rng, feature_channels
            )
        )
        layers.append(
            ConditionalCoupling(
                f"{prefix}.coupling",
                channels,
                config.channels,
                rng,
                feature_channels,
                config.split_rule,
                coupling_mask,
            )
        )
    elif config.coupling is CouplingKind.MIXTURE:
        layers.append(
            MixtureCoupling(
                f"{prefix}.coupling",
                channels,
                config.channels,
                rng,
                config.mixture_components,
                config.split_rule,
                coupling_mask,
            )
        )
    else:
        layers.append(
            AffineCoupling(
                f"{prefix}.coupling", channels, config.channels, rng, config.split_rule, coupling_mask
            )
        )

    if config.attention is not AttentionKind.NONE:
        attention_mask = masking.make_mask_2d(height, width, phase)
        attention = _attention_layer(config, f"{prefix}.attention", shape, attention_mask, rng)
        slot = _ATTENTION_SLOT.get(config.position, len(layers))
        layers.insert(slot, attention)
    return layers


def build(config: ModelConfig) -> FlowModel:
    """Construct a model deterministically from ``config.seed``.

    Raises:
        ConfigError: Spatial size not divisible by ``2^levels`` or an invalid
            combination of options.
        ShapeError: A split or coupling needs an even channel count.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    model = FlowModel(config)
    if config.conditional:
        model.encoder = ConditionEncoder(
            "encoder", config.condition_channels, config.channels, config.encoder_channels, rng
        )

    channels, height, width = config.input_shape
    for level in range(config.levels):
        channels, height, width = channels * 4, height // 2, width // 2
        shape = (channels, height, width)
        flow_level = FlowLevel(level, shape, Squeeze(f"level{level}.squeeze"))
        for step in range(config.steps):
            flow_level.layers.extend(_step_layers(model, config, level, step, shape, rng))
        if level < config.levels - 1:
            flow_level.split = SplitPrior(f"level{level}.split", channels, config.seed)
            channels //= 2
        model.levels.append(flow_level)

    logger.info(
        "built flow: %d levels x %d steps, attention %s, %d parameters",
        config.levels,
        config.steps,
        config.attention.value,
        model.parameter_count(),
    )
    return model
