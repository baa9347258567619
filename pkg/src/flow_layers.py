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

"""Invertible step-of-flow layers: actnorm, invertible 1x1 convolution, couplings,
the conditional injector, squeeze and the split prior.

Every layer maps a ``(B, C, H, W)`` tensor to a tensor of the same volume and
returns its per-sample log-determinant with shape ``(B, 1, 1, 1)``.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg, special

from app_configs import (
    ACTNORM_MIN_STD,
    BISECTION_BRACKET_WIDTH,
    BISECTION_CDF_RESIDUAL,
    BISECTION_MAX_ITERS,
    BISECTION_MAX_WIDENINGS,
    BISECTION_TOLERANCE,
    HIDDEN_INIT_SCALE,
    LOG_SCALE_CLAMP,
)
from src import masking, numkit
from src.errors import BracketError, LayerStateError, ShapeError
from src.flow_enums import Half, SplitRule
from src.masking import CheckerboardMask
from src.numkit import Parameter, Tensor

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


class LayerOutput(NamedTuple):
    """Forward result of an invertible layer."""

    y: Tensor
    logdet: Tensor


def batch_scalar(value: Tensor, batch: int) -> Tensor:
    """Repeat a ``(1, 1, 1, 1)`` tensor as a per-sample ``(B, 1, 1, 1)`` column."""
    return numkit.expand(value, (batch, 1, 1, 1))


def zero_logdet(batch: int) -> Tensor:
    return numkit.zeros((batch, 1, 1, 1))


def standard_normal_log_prob(z: Tensor) -> Tensor:
    """Per-sample ``log N(z; 0, I)``."""
    elementwise = numkit.mul(numkit.mul(z, z), -0.5) - 0.5 * LOG_2PI
    return numkit.per_sample_sum(elementwise)


def gaussian_log_prob(z: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """Per-sample ``log N(z; mean, exp(log_std)^2)`` with a diagonal covariance."""
    standardized = (z - mean) * numkit.exp(numkit.negate(log_std))
    elementwise = (
        numkit.mul(numkit.mul(standardized, standardized), -0.5) - log_std - 0.5 * LOG_2PI
    )
    return numkit.per_sample_sum(elementwise)


def clamp_log_scale(raw: Tensor) -> Tensor:
    return numkit.mul(numkit.tanh(raw), LOG_SCALE_CLAMP)


class FlowLayer:
    """An invertible transform with a tractable log-determinant."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        raise NotImplementedError

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Actnorm(FlowLayer):
    """Per-channel affine normalization ``y = s * x + b`` with data-dependent init.

    The scale is stored as its logarithm so it stays strictly positive.
    """

    kind = "actnorm"

    def __init__(self, name: str, channels: int):
        super().__init__(name)
        self.log_scale = Parameter(f"{name}.log_scale", np.zeros((1, channels, 1, 1)))
        self.bias = Parameter(f"{name}.bias", np.zeros((1, channels, 1, 1)))
        self.initialized = False
        self._init_lock = threading.Lock()

    def parameters(self) -> list[Parameter]:
        return [self.log_scale, self.bias]

    def initialize(self, x: Tensor) -> None:
        """Set ``s`` and ``b`` so this batch leaves the layer with zero mean, unit variance."""
        with self._init_lock:
            if self.initialized:
                return
            mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
            std = x.data.std(axis=(0, 2, 3), keepdims=True)
            scale = 1.0 / np.maximum(std, ACTNORM_MIN_STD)
            self.log_scale.assign(np.log(scale))
            self.bias.assign(-mean * scale)
            self.initialized = True
            logger.debug("%s initialized, mean scale %.4g", self.name, float(scale.mean()))

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        if not self.initialized:
            self.initialize(x)
        b, _, h, w = x.shape
        scale = numkit.expand(numkit.exp(self.log_scale), x.shape)
        y = x * scale + numkit.expand(self.bias, x.shape)
        logdet = numkit.mul(numkit.sum_all(self.log_scale), float(h * w))
        return LayerOutput(y, batch_scalar(logdet, b))

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        if not self.initialized:
            raise LayerStateError(f"{self.name}: inverse called before data-dependent init")
        inv_scale = numkit.expand(numkit.exp(numkit.negate(self.log_scale)), y.shape)
        return (y - numkit.expand(self.bias, y.shape)) * inv_scale


class Inv1x1(FlowLayer):
    """Invertible 1x1 convolution with an LU-parameterized weight.

    ``W = P L (U + diag(sign * exp(log_s)))`` with a fixed permutation ``P``,
    unit-lower-triangular ``L`` and strictly-upper ``U``.

    Args:
        name: Parameter name prefix.
        channels: Number of channels.
        rng: Generator for the random-rotation initialization.
        weight: Optional explicit initial weight (must be invertible).
    """

    kind = "inv1x1"

    def __init__(
        self,
        name: str,
        channels: int,
        rng: np.random.Generator | None = None,
        weight: np.ndarray | None = None,
    ):
        super().__init__(name)
        if weight is None:
            rng = np.random.default_rng(0) if rng is None else rng
            weight, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
        perm, lower, upper = linalg.lu(np.asarray(weight, dtype=np.float64))
        diagonal = np.diag(upper)
        self.channels = channels
        self.perm = perm
        self.sign_s = np.sign(diagonal).reshape(1, 1, 1, channels)
        self.lower_mask = np.tril(np.ones((channels, channels)), -1)[None, None]
        self.upper_mask = np.triu(np.ones((channels, channels)), 1)[None, None]
        self.lower = Parameter(f"{name}.lower", (lower * self.lower_mask[0, 0])[None, None])
        self.upper = Parameter(f"{name}.upper", np.triu(upper, 1)[None, None])
        self.log_s = Parameter(f"{name}.log_s", np.log(np.abs(diagonal)).reshape(1, 1, 1, channels))

    def parameters(self) -> list[Parameter]:
        return [self.lower, self.upper, self.log_s]

    def weight(self) -> Tensor:
        """The assembled ``(1, 1, C, C)`` weight."""
        shape = (1, 1, self.channels, self.channels)
        eye = numkit.constant(np.eye(self.channels)[None, None])
        lower = self.lower * numkit.constant(self.lower_mask) + eye
        magnitudes = numkit.exp(self.log_s) * numkit.constant(self.sign_s)
        upper = self.upper * numkit.constant(self.upper_mask) + eye * numkit.expand(
            magnitudes, shape
        )
        return numkit.matmul(numkit.constant(self.perm[None, None]), numkit.matmul(lower, upper))

    def inverse_weight(self) -> np.ndarray:
        """``W^-1 = U^-1 L^-1 P^T`` by triangular solves."""
        lower = self.lower.data[0, 0] * self.lower_mask[0, 0] + np.eye(self.channels)
        upper = self.upper.data[0, 0] * self.upper_mask[0, 0] + np.diag(
            self.sign_s.reshape(-1) * np.exp(self.log_s.data.reshape(-1))
        )
        partial = linalg.solve_triangular(lower, self.perm.T, lower=True, unit_diagonal=True)
        return linalg.solve_triangular(upper, partial, lower=False)

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        b, _, h, w = x.shape
        y = numkit.conv1x1(x, self.weight())
        logdet = numkit.mul(numkit.sum_all(self.log_s), float(h * w))
        return LayerOutput(y, batch_scalar(logdet, b))

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        return numkit.conv1x1(y, self.inverse_weight())


class CouplingNet:
    """Pointwise network ``conv1x1 -> relu -> conv1x1 -> relu -> conv1x1``.

    The output convolution starts at zero so the owning layer starts as the identity.
    """

    def __init__(
        self, name: str, in_channels: int, hidden: int, out_channels: int, rng: np.random.Generator
    ):
        self.name = name
        self.w1 = Parameter(
            f"{name}.w1", rng.normal(0.0, HIDDEN_INIT_SCALE, (1, 1, hidden, in_channels))
        )
        self.b1 = Parameter(f"{name}.b1", np.zeros((1, hidden, 1, 1)))
        self.w2 = Parameter(f"{name}.w2", rng.normal(0.0, HIDDEN_INIT_SCALE, (1, 1, hidden, hidden)))
        self.b2 = Parameter(f"{name}.b2", np.zeros((1, hidden, 1, 1)))
        self.w3 = Parameter(f"{name}.w3", np.zeros((1, 1, out_channels, hidden)))
        self.b3 = Parameter(f"{name}.b3", np.zeros((1, out_channels, 1, 1)))
        self.in_channels = in_channels
        self.out_channels = out_channels

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def __call__(self, x: Tensor) -> Tensor:
        h = numkit.relu(numkit.conv1x1(x, self.w1, self.b1))
        h = numkit.relu(numkit.conv1x1(h, self.w2, self.b2))
        return numkit.conv1x1(h, self.w3, self.b3)


class ConditionEncoder:
    """Maps a condition image to feature maps for every flow level.

    Two 3x3 convolutions with ReLU and a pointwise projection produce features at
    the input resolution; level ``l`` receives them squeezed ``l + 1`` times.
    """

    def __init__(
        self, name: str, in_channels: int, hidden: int, out_channels: int, rng: np.random.Generator
    ):
        self.name = name
        self.w1 = Parameter(
            f"{name}.w1", rng.normal(0.0, HIDDEN_INIT_SCALE, (hidden, in_channels, 3, 3))
        )
        self.b1 = Parameter(f"{name}.b1", np.zeros((1, hidden, 1, 1)))
        self.w2 = Parameter(f"{name}.w2", rng.normal(0.0, HIDDEN_INIT_SCALE, (hidden, hidden, 3, 3)))
        self.b2 = Parameter(f"{name}.b2", np.zeros((1, hidden, 1, 1)))
        self.w3 = Parameter(
            f"{name}.w3", rng.normal(0.0, HIDDEN_INIT_SCALE, (1, 1, out_channels, hidden))
        )
        self.b3 = Parameter(f"{name}.b3", np.zeros((1, out_channels, 1, 1)))
        self.out_channels = out_channels

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def __call__(self, condition: Tensor) -> Tensor:
        h = numkit.relu(numkit.conv2d(condition, self.w1, self.b1))
        h = numkit.relu(numkit.conv2d(h, self.w2, self.b2))
        return numkit.conv1x1(h, self.w3, self.b3)

    def features(self, condition: Tensor, levels: int) -> list[Tensor]:
        features = []
        h = self(condition)
        for _ in range(levels):
            h = numkit.squeeze2x2(h)
            features.append(h)
        return features

    def feature_channels(self, level: int) -> int:
        return self.out_channels * 4 ** (level + 1)


class CouplingSplit:
    """Partition used by a coupling layer.

    The transformed part ``x_a`` and conditioning part ``x_b`` are channel halves
    (``x_a`` first) or the B and A halves of a checkerboard mask. For mask splits
    the transform is evaluated on the full tensor and kept only on half B.
    """

    def __init__(self, rule: SplitRule, channels: int, mask: CheckerboardMask | None = None):
        if rule is SplitRule.CHANNEL:
            if channels % 2:
                raise ShapeError(f"channel split needs even channels, got {channels}")
            self.transformed_channels = channels // 2
        else:
            if mask is None:
                raise ShapeError(f"{rule.label} split needs a mask")
            self.transformed_channels = channels
        self.rule = rule
        self.channels = channels
        self.mask = mask

    @property
    def conditioning_channels(self) -> int:
        if self.rule is SplitRule.CHANNEL:
            return self.channels - self.transformed_channels
        return self.channels

    def conditioning(self, x: Tensor) -> Tensor:
        if self.rule is SplitRule.CHANNEL:
            return numkit.slice_channels(x, self.transformed_channels, self.channels)
        return masking.apply_mask(x, self.mask, Half.A)

    def transformed(self, x: Tensor) -> Tensor:
        if self.rule is SplitRule.CHANNEL:
            return numkit.slice_channels(x, 0, self.transformed_channels)
        return x

    def merge(self, x: Tensor, y_a: Tensor) -> Tensor:
        """Combine the untouched conditioning part of ``x`` with the transformed ``y_a``."""
        if self.rule is SplitRule.CHANNEL:
            return numkit.concat_channels([y_a, self.conditioning(x)])
        return masking.apply_mask(x, self.mask, Half.A) + masking.apply_mask(y_a, self.mask, Half.B)

    def logdet(self, elementwise: Tensor) -> Tensor:
        """Per-sample sum of elementwise log-derivatives over the transformed elements."""
        if self.rule is not SplitRule.CHANNEL:
            elementwise = masking.apply_mask(elementwise, self.mask, Half.B)
        return numkit.per_sample_sum(elementwise)


@dataclass
class MixtureParams:
    """Parameters of the mixture-of-logistics elementwise map, one tensor per component."""

    log_s: Tensor
    t: Tensor
    logits: list[Tensor]
    means: list[Tensor]
    log_scales: list[Tensor]


def affine_params(raw: Tensor, channels: int) -> tuple[Tensor, Tensor]:
    """Split network output into clamped ``log s`` and ``t``."""
    log_s = clamp_log_scale(numkit.slice_channels(raw, 0, channels))
    t = numkit.slice_channels(raw, channels, 2 * channels)
    return log_s, t


def mixture_params(raw: Tensor, channels: int, components: int) -> MixtureParams:
    """Split network output ``[log s, t, logits_1..K, means_1..K, log scales_1..K]``."""

    def block(i: int) -> Tensor:
        return numkit.slice_channels(raw, i * channels, (i + 1) * channels)

    return MixtureParams(
        log_s=clamp_log_scale(block(0)),
        t=block(1),
        logits=[block(2 + k) for k in range(components)],
        means=[block(2 + components + k) for k in range(components)],
        log_scales=[clamp_log_scale(block(2 + 2 * components + k)) for k in range(components)],
    )


def mixture_forward(x: Tensor, params: MixtureParams) -> tuple[Tensor, Tensor]:
    """``y = logit(F(x)) * exp(log s) + t`` with ``F`` a softmax-weighted logistic mixture CDF.

    Returns:
        tuple[Tensor, Tensor]: The output and the elementwise log-derivative
        ``log F'(x) - log F(x) - log(1 - F(x)) + log s``.
    """
    normalizer = numkit.logsumexp(params.logits)
    log_cdf_terms, log_sf_terms, log_pdf_terms = [], [], []
    for logit, mean, log_scale in zip(params.logits, params.means, params.log_scales):
        log_pi = logit - normalizer
        z = (x - mean) * numkit.exp(numkit.negate(log_scale))
        lower = numkit.log_sigmoid(z)
        upper = numkit.log_sigmoid(numkit.negate(z))
        log_cdf_terms.append(log_pi + lower)
        log_sf_terms.append(log_pi + upper)
        log_pdf_terms.append(log_pi + lower + upper - log_scale)
    log_cdf = numkit.logsumexp(log_cdf_terms)
    log_sf = numkit.logsumexp(log_sf_terms)
    log_pdf = numkit.logsumexp(log_pdf_terms)
    y = (log_cdf - log_sf) * numkit.exp(params.log_s) + params.t
    return y, log_pdf - log_cdf - log_sf + params.log_s


def _mixture_logit_cdf(
    x: np.ndarray, log_pi: np.ndarray, means: np.ndarray, log_scales: np.ndarray
) -> np.ndarray:
    z = (x[None] - means) * np.exp(-log_scales)
    log_cdf = special.logsumexp(log_pi - np.logaddexp(0.0, -z), axis=0)
    log_sf = special.logsumexp(log_pi - np.logaddexp(0.0, z), axis=0)
    return log_cdf - log_sf


def mixture_inverse(y: Tensor, params: MixtureParams) -> Tensor:
    """Invert :func:`mixture_forward` elementwise by bisection.

    The bracket starts at ``[min mean - 20 max scale, max mean + 20 max scale]`` and
    is widened until it contains the root. Bisection stops once every element is
    within a bracket narrower than ``BISECTION_TOLERANCE`` and its CDF residual
    ``|F(x) - sigmoid(u)|`` is below ``BISECTION_CDF_RESIDUAL``, or its bracket can
    no longer be split in floating point.

    Raises:
        BracketError: The root could not be bracketed for some element.
    """
    u = (y.data - params.t.data) * np.exp(-params.log_s.data)
    logits = np.stack([l.data for l in params.logits])
    log_pi = logits - special.logsumexp(logits, axis=0)
    means = np.stack([m.data for m in params.means])
    log_scales = np.stack([s.data for s in params.log_scales])
    half_width = BISECTION_BRACKET_WIDTH * np.exp(log_scales).max(axis=0)
    lo = means.min(axis=0) - half_width
    hi = means.max(axis=0) + half_width

    for _ in range(BISECTION_MAX_WIDENINGS):
        low_bad = _mixture_logit_cdf(lo, log_pi, means, log_scales) > u
        high_bad = _mixture_logit_cdf(hi, log_pi, means, log_scales) < u
        if not (low_bad.any() or high_bad.any()):
            break
        width = hi - lo
        lo = np.where(low_bad, lo - width, lo)
        hi = np.where(high_bad, hi + width, hi)
    else:
        position = tuple(int(i) for i in np.argwhere(low_bad | high_bad)[0])
        raise BracketError(f"could not bracket the mixture inverse at element {position}")

    target = special.expit(u)
    for iteration in range(BISECTION_MAX_ITERS):
        mid = 0.5 * (lo + hi)
        logit_mid = _mixture_logit_cdf(mid, log_pi, means, log_scales)
        residual = np.abs(special.expit(logit_mid) - target)
        converged = (hi - lo < BISECTION_TOLERANCE) & (residual < BISECTION_CDF_RESIDUAL)
        exhausted = (mid == lo) | (mid == hi)
        if (converged | exhausted).all():
            break
        below = logit_mid < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    logger.debug(
        "mixture inverse stopped after %d bisection steps, CDF residual %.3e",
        iteration + 1,
        float(residual.max()) if residual.size else 0.0,
    )
    return Tensor(mid)


class AffineCoupling(FlowLayer):
    """``y_a = exp(log s) * x_a + t`` with ``(log s, t) = NN(x_b)``; ``x_b`` passes through."""

    kind = "coupling"

    def __init__(
        self,
        name: str,
        channels: int,
        hidden: int,
        rng: np.random.Generator,
        rule: SplitRule = SplitRule.CHANNEL,
        mask: CheckerboardMask | None = None,
    ):
        super().__init__(name)
        self.split = CouplingSplit(rule, channels, mask)
        self.net = CouplingNet(
            f"{name}.net",
            self.net_in_channels(),
            hidden,
            self.net_out_channels(),
            rng,
        )

    def net_in_channels(self) -> int:
        return self.split.conditioning_channels

    def net_out_channels(self) -> int:
        return 2 * self.split.transformed_channels

    def parameters(self) -> list[Parameter]:
        return self.net.parameters()

    def net_input(self, x_b: Tensor, condition: Tensor | None) -> Tensor:
        return x_b

    def transform(self, x_a: Tensor, raw: Tensor) -> tuple[Tensor, Tensor]:
        log_s, t = affine_params(raw, self.split.transformed_channels)
        return x_a * numkit.exp(log_s) + t, log_s

    def untransform(self, y_a: Tensor, raw: Tensor) -> Tensor:
        log_s, t = affine_params(raw, self.split.transformed_channels)
        return (y_a - t) * numkit.exp(numkit.negate(log_s))

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        raw = self.net(self.net_input(self.split.conditioning(x), condition))
        y_a, log_derivative = self.transform(self.split.transformed(x), raw)
        return LayerOutput(self.split.merge(x, y_a), self.split.logdet(log_derivative))

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        raw = self.net(self.net_input(self.split.conditioning(y), condition))
        x_a = self.untransform(self.split.transformed(y), raw)
        return self.split.merge(y, x_a)


class MixtureCoupling(AffineCoupling):
    """Coupling whose elementwise map is ``logit(mixture CDF)`` followed by an affine map."""

    def __init__(
        self,
        name: str,
        channels: int,
        hidden: int,
        rng: np.random.Generator,
        components: int,
        rule: SplitRule = SplitRule.CHANNEL,
        mask: CheckerboardMask | None = None,
    ):
        if components < 1:
            raise ShapeError(f"mixture needs at least one component, got {components}")
        self.components = components
        super().__init__(name, channels, hidden, rng, rule, mask)

    def net_out_channels(self) -> int:
        return (2 + 3 * self.components) * self.split.transformed_channels

    def transform(self, x_a: Tensor, raw: Tensor) -> tuple[Tensor, Tensor]:
        return mixture_forward(
            x_a, mixture_params(raw, self.split.transformed_channels, self.components)
        )

    def untransform(self, y_a: Tensor, raw: Tensor) -> Tensor:
        return mixture_inverse(
            y_a, mixture_params(raw, self.split.transformed_channels, self.components)
        )


def _check_condition(layer: str, x: Tensor, condition: Tensor | None) -> Tensor:
    if condition is None:
        raise ShapeError(f"{layer} needs condition features")
    if condition.shape[0] != x.shape[0] or condition.shape[2:] != x.shape[2:]:
        raise ShapeError(f"{layer}: condition {condition.shape} is not aligned with {x.shape}")
    return condition


class ConditionalCoupling(AffineCoupling):
    """Affine coupling with ``(log s, t) = NN(x_b, c)``; invertible for any fixed ``c``."""

    def __init__(
        self,
        name: str,
        channels: int,
        hidden: int,
        rng: np.random.Generator,
        condition_channels: int,
        rule: SplitRule = SplitRule.CHANNEL,
        mask: CheckerboardMask | None = None,
    ):
        self.condition_channels = condition_channels
        super().__init__(name, channels, hidden, rng, rule, mask)

    def net_in_channels(self) -> int:
        return self.split.conditioning_channels + self.condition_channels

    def net_input(self, x_b: Tensor, condition: Tensor | None) -> Tensor:
        condition = _check_condition(self.name, x_b, condition)
        return numkit.concat_channels([x_b, condition])


class ConditionalInjector(FlowLayer):
    """``y = exp(log s) * x + t`` with ``(log s, t) = NN(c)`` over every element."""

    kind = "injector"

    def __init__(
        self,
        name: str,
        channels: int,
        hidden: int,
        rng: np.random.Generator,
        condition_channels: int,
    ):
        super().__init__(name)
        self.channels = channels
        self.net = CouplingNet(f"{name}.net", condition_channels, hidden, 2 * channels, rng)

    def parameters(self) -> list[Parameter]:
        return self.net.parameters()

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        log_s, t = affine_params(self.net(_check_condition(self.name, x, condition)), self.channels)
        return LayerOutput(x * numkit.exp(log_s) + t, numkit.per_sample_sum(log_s))

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        log_s, t = affine_params(self.net(_check_condition(self.name, y, condition)), self.channels)
        return (y - t) * numkit.exp(numkit.negate(log_s))


class Squeeze(FlowLayer):
    """Volume-preserving 2x2 space-to-channel rearrangement."""

    kind = "squeeze"

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        return LayerOutput(numkit.squeeze2x2(x), zero_logdet(x.shape[0]))

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        return numkit.unsqueeze2x2(y)


class SplitOutput(NamedTuple):
    """Forward result of a split: the kept half, the factored-out latent and its log-density."""

    kept: Tensor
    latent: Tensor
    log_prob: Tensor


class SplitPrior:
    """Factor out the second channel half under a Gaussian conditioned on the first.

    A zero-initialized 1x1 convolution of the kept half gives the mean and log-std,
    so the prior starts as a standard normal.
    """

    kind = "split"

    def __init__(self, name: str, channels: int, seed: int = 0):
        if channels % 2:
            raise ShapeError(f"split needs even channels, got {channels}")
        self.name = name
        self.channels = channels
        self.seed = seed
        half = channels // 2
        self.weight = Parameter(f"{name}.weight", np.zeros((1, 1, 2 * half, half)))
        self.bias = Parameter(f"{name}.bias", np.zeros((1, 2 * half, 1, 1)))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def prior(self, kept: Tensor) -> tuple[Tensor, Tensor]:
        half = self.channels // 2
        stats = numkit.conv1x1(kept, self.weight, self.bias)
        return numkit.slice_channels(stats, 0, half), numkit.slice_channels(stats, half, 2 * half)

    def forward(self, x: Tensor) -> SplitOutput:
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        half = self.channels // 2
        kept = numkit.slice_channels(x, 0, half)
        latent = numkit.slice_channels(x, half, self.channels)
        mean, log_std = self.prior(kept)
        return SplitOutput(kept, latent, gaussian_log_prob(latent, mean, log_std))

    def inverse(
        self,
        kept: Tensor,
        latent: Tensor | None = None,
        temperature: float = 1.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Rebuild the full tensor from ``kept`` and a recorded or freshly drawn latent."""
        if latent is None:
            latent = self.draw(kept, temperature, rng)
        return numkit.concat_channels([kept, latent])

    def draw(
        self, kept: Tensor, temperature: float, rng: np.random.Generator | None = None
    ) -> Tensor:
        """Sample ``mean + temperature * std * eps``; temperature 0 returns the mean.

        Without ``rng`` the noise comes from a generator seeded with ``seed``.
        """
        mean, log_std = self.prior(kept)
        if temperature == 0:
            return mean
        rng = np.random.default_rng(self.seed) if rng is None else rng
        noise = numkit.constant(rng.standard_normal(mean.shape) * temperature)
        return mean + numkit.exp(log_std) * noise
