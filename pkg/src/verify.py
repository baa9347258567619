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

"""Numerical oracles for invertibility, Jacobian log-determinants and gradients.

Every analytic formula in the flow is checked against a dense finite-difference
Jacobian or a central-difference gradient. Mutation checks corrupt a layer on
purpose and require the matching oracle to fail.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import pandas as pd

from app_configs import FD_EPSILON, FD_MAX_DIMENSION
from src import masking, numkit
from src.attention import IMapAttention, ISdpAttention
from src.errors import AttnFlowError, NonFiniteError, ShapeError
from src.flow_enums import (
    AttentionActivation,
    AttentionKind,
    AttentionPosition,
    CouplingKind,
    Half,
    SplitRule,
    VerifySuite,
)
from src.flow_layers import (
    Actnorm,
    AffineCoupling,
    ConditionalCoupling,
    ConditionalInjector,
    FlowLayer,
    Inv1x1,
    LayerOutput,
    MixtureCoupling,
    Squeeze,
)
from src.flow_model import FlowModel, build
from src.numkit import Tensor
from src.run_config import ModelConfig

logger = logging.getLogger(__name__)

LAYER_ROUNDTRIP_TOLERANCE = 1e-8
MODEL_ROUNDTRIP_TOLERANCE = 1e-7
LOGDET_TOLERANCE = 1e-5
MODEL_LOGDET_TOLERANCE = 1e-4
BLOCK_TOLERANCE = 1e-10
GRAD_RTOL = 1e-5
GRAD_ATOL = 1e-8

DEFAULT_LAYER_SEEDS = 100
DEFAULT_LOGDET_SEEDS = 50
DEFAULT_MODEL_SEEDS = 10

Transform = Callable[[Tensor], "Tensor | np.ndarray"]


@dataclass
class OracleReport:
    """Outcome of one oracle; ``passed`` is ``error <= tolerance``."""

    subject: str
    check: str
    error: float
    tolerance: float
    seed: int
    detail: str = ""
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.error <= self.tolerance)


def _flatten(value) -> np.ndarray:
    return np.asarray(getattr(value, "data", value), dtype=np.float64).reshape(-1)


def fd_jacobian(
    fn: Transform, x: Tensor, eps: float = FD_EPSILON, scheme: str = "central"
) -> np.ndarray:
    """Dense Jacobian of ``fn`` at a single-sample ``x``, one column per input element.

    Args:
        fn: Map from a ``(1, C, H, W)`` tensor to an output of the same total size.
        x: Evaluation point.
        eps: Step size.
        scheme: ``"central"`` or ``"forward"`` differences.

    Raises:
        ShapeError: More than ``FD_MAX_DIMENSION`` input elements.
        NonFiniteError: A Jacobian entry is not finite.
    """
    dimension = x.size
    if dimension > FD_MAX_DIMENSION:
        raise ShapeError(f"dense Jacobian limited to {FD_MAX_DIMENSION} dims, got {dimension}")
    base = x.data.reshape(-1)
    columns = []
    with numkit.paused():
        center = _flatten(fn(x)) if scheme == "forward" else None
        for j in range(dimension):
            plus = base.copy()
            plus[j] += eps
            upper = _flatten(fn(Tensor(plus.reshape(x.shape))))
            if scheme == "forward":
                columns.append((upper - center) / eps)
                continue
            minus = base.copy()
            minus[j] -= eps
            lower = _flatten(fn(Tensor(minus.reshape(x.shape))))
            columns.append((upper - lower) / (2.0 * eps))
    jacobian = np.stack(columns, axis=1)
    if not np.isfinite(jacobian).all():
        row, col = (int(i) for i in np.argwhere(~np.isfinite(jacobian))[0])
        raise NonFiniteError(f"finite-difference Jacobian entry ({row}, {col}) is not finite")
    return jacobian


def fd_jacobian_logdet(
    fn: Transform, x: Tensor, eps: float = FD_EPSILON, scheme: str = "central"
) -> float:
    """``log|det J|`` of the finite-difference Jacobian via LU."""
    matrix = numkit.SquareMatrix(fd_jacobian(fn, x, eps, scheme))
    return numkit.lu_logdet_solve(matrix).logabsdet


def relative_error(analytic: float, reference: float) -> float:
    return abs(analytic - reference) / max(1.0, abs(reference))


#########################
# Oracles               #
#########################


class LayerCase(NamedTuple):
    """A layer under test, its single-sample input and its condition features."""

    subject: str
    layer: FlowLayer
    x: Tensor
    condition: Tensor | None = None


def roundtrip_check(
    subject: str,
    forward: Callable[[Tensor], Tensor],
    inverse: Callable[[Tensor], Tensor],
    draw: Callable[[np.random.Generator], Tensor],
    seeds: Sequence[int],
    tolerance: float = LAYER_ROUNDTRIP_TOLERANCE,
) -> OracleReport:
    """Max over seeds of ``|x - inverse(forward(x))|``; raised errors count as failures."""
    worst = 0.0
    for seed in seeds:
        try:
            with numkit.paused():
                x = draw(np.random.default_rng(seed))
                error = float(np.abs(inverse(forward(x)).data - x.data).max())
        except AttnFlowError as err:
            return OracleReport(subject, "roundtrip", math.inf, tolerance, seed, str(err))
        worst = max(worst, error)
    return OracleReport(subject, "roundtrip", worst, tolerance, seeds[0] if seeds else 0)


def logdet_check(case: LayerCase, seed: int, tolerance: float = LOGDET_TOLERANCE) -> OracleReport:
    """Analytic log-determinant of a layer against the finite-difference oracle."""
    try:
        with numkit.paused():
            analytic = case.layer.forward(case.x, case.condition).logdet.item()
        reference = fd_jacobian_logdet(lambda t: case.layer.forward(t, case.condition).y, case.x)
    except AttnFlowError as err:
        return OracleReport(case.subject, "logdet", math.inf, tolerance, seed, str(err))
    return OracleReport(
        case.subject,
        "logdet",
        relative_error(analytic, reference),
        tolerance,
        seed,
        f"analytic {analytic:.10g}, finite-difference {reference:.10g}",
    )


def block_structure_check(
    case: LayerCase, conditioning: np.ndarray, seed: int = 0, tolerance: float = BLOCK_TOLERANCE
) -> OracleReport:
    """All Jacobian entries from the transformed half into the conditioning half vanish.

    Args:
        case: Layer and input.
        conditioning: Boolean array of the input's ``(C, H, W)`` shape, True on the
            conditioning half.
    """
    jacobian = fd_jacobian(lambda t: case.layer.forward(t, case.condition).y, case.x)
    selector = np.asarray(conditioning, dtype=bool).reshape(-1)
    off_block = jacobian[np.ix_(selector, ~selector)]
    error = float(np.abs(off_block).max()) if off_block.size else 0.0
    return OracleReport(case.subject, "block-structure", error, tolerance, seed)


def gradcheck_all(
    model: FlowModel,
    x: Tensor,
    condition: Tensor | None = None,
    eps: float = FD_EPSILON,
    rtol: float = GRAD_RTOL,
    atol: float = GRAD_ATOL,
    subject: str = "model",
    seed: int = 0,
) -> list[OracleReport]:
    """Compare tape gradients of the mean NLL with central differences, per parameter.

    The reported error of a parameter is the largest
    ``max(0, |analytic - numeric| - atol) / max(|analytic|, |numeric|)`` over its entries.
    """
    if not model.initialized:
        with numkit.paused():
            model.forward(x, condition)
    with numkit.recording() as tape:
        loss = model.mean_nll(x, condition)
    analytic = tape.backward(loss)

    reports = []
    for param in model.parameters():
        grad = analytic.get(param.name, np.zeros(param.shape)).reshape(-1)
        original = param.numpy()
        flat = original.reshape(-1)
        worst = 0.0
        with numkit.paused():
            for i in range(flat.size):
                shifted = flat.copy()
                shifted[i] += eps
                param.assign(shifted.reshape(param.shape))
                upper = model.mean_nll(x, condition).item()
                shifted[i] -= 2.0 * eps
                param.assign(shifted.reshape(param.shape))
                lower = model.mean_nll(x, condition).item()
                param.assign(original)
                numeric = (upper - lower) / (2.0 * eps)
                excess = max(0.0, abs(grad[i] - numeric) - atol)
                if excess:
                    worst = max(worst, excess / max(abs(grad[i]), abs(numeric)))
        reports.append(OracleReport(f"{subject}:{param.name}", "gradcheck", worst, rtol, seed))
    return reports


#########################
# Test subjects         #
#########################


def randomize(layer: FlowLayer, rng: np.random.Generator, scale: float = 0.3) -> FlowLayer:
    """Perturb every parameter of ``layer`` so no block is trivially the identity."""
    for param in layer.parameters():
        param.assign(param.data + rng.normal(0.0, scale, param.shape))
    if isinstance(layer, Actnorm):
        layer.initialized = True
    return layer


def conditioning_selector(layer: FlowLayer, shape: tuple[int, int, int]) -> np.ndarray | None:
    """True on the input elements a coupling-structured layer leaves as conditioners."""
    full = (1,) + tuple(shape)
    if isinstance(layer, (IMapAttention, ISdpAttention)):
        return layer.mask.indicator(Half.A, full)[0] > 0
    if isinstance(layer, AffineCoupling):
        split = layer.split
        if split.rule is SplitRule.CHANNEL:
            selector = np.zeros(shape, dtype=bool)
            selector[split.transformed_channels :] = True
            return selector
        return split.mask.indicator(Half.A, full)[0] > 0
    return None


def layer_cases(seed: int) -> list[LayerCase]:
    """One randomized instance of every layer type, each of total dimension at most 32."""
    rng = np.random.default_rng(seed)
    hidden = 4
    mask_2d = masking.make_mask_2d(4, 4, seed % 2)
    mask_3d = masking.make_mask_3d(2, 4, 4, seed)

    def draw(shape) -> Tensor:
        return Tensor(rng.normal(0.0, 1.0, (1,) + shape))

    features = Tensor(rng.normal(0.0, 1.0, (1, 3, 4, 4)))
    return [
        LayerCase("actnorm", randomize(Actnorm("actnorm", 2), rng), draw((2, 4, 4))),
        LayerCase("inv1x1", randomize(Inv1x1("inv1x1", 2, rng), rng, 0.1), draw((2, 4, 4))),
        LayerCase(
            "affine-channel",
            randomize(AffineCoupling("affine", 2, hidden, rng), rng),
            draw((2, 4, 4)),
        ),
        LayerCase(
            "affine-checkerboard",
            randomize(AffineCoupling("affine", 2, hidden, rng, SplitRule.CHECKERBOARD, mask_2d), rng),
            draw((2, 4, 4)),
        ),
        LayerCase(
            "affine-permuted",
            randomize(AffineCoupling("affine", 2, hidden, rng, SplitRule.PERMUTED, mask_3d), rng),
            draw((2, 4, 4)),
        ),
        LayerCase(
            "mixture",
            randomize(MixtureCoupling("mixture", 2, hidden, rng, 3), rng),
            Tensor(rng.uniform(-3.0, 3.0, (1, 2, 2, 2))),
        ),
        LayerCase(
            "cond-coupling",
            randomize(ConditionalCoupling("cond", 2, hidden, rng, 3), rng),
            draw((2, 4, 4)),
            features,
        ),
        LayerCase(
            "cond-injector",
            randomize(ConditionalInjector("injector", 2, hidden, rng, 3), rng),
            draw((2, 4, 4)),
            features,
        ),
        LayerCase("squeeze", Squeeze("squeeze"), draw((1, 4, 4))),
    ] + attention_cases(seed)


def attention_cases(seed: int) -> list[LayerCase]:
    """Randomized iMap and iSDP instances on ``(1, 2, 4, 4)``."""
    rng = np.random.default_rng([seed, 1])
    mask = masking.make_mask_2d(4, 4, seed % 2)
    x = Tensor(rng.normal(0.0, 1.0, (1, 2, 4, 4)))
    return [
        LayerCase("imap", randomize(IMapAttention("imap", 2, 4, 4, mask, rng), rng), x),
        LayerCase(
            "isdp-sigmoid",
            randomize(ISdpAttention("isdp", 2, 4, 4, mask, rng, heads=1, patches=4), rng),
            x,
        ),
        LayerCase(
            "isdp-softmax-2heads",
            randomize(
                ISdpAttention(
                    "isdp", 2, 4, 4, mask, rng, heads=2, activation=AttentionActivation.SOFTMAX
                ),
                rng,
            ),
            x,
        ),
    ]


def _case_roundtrip(case: LayerCase, seeds: Sequence[int]) -> OracleReport:
    def draw(rng: np.random.Generator) -> Tensor:
        return Tensor(rng.uniform(-3.0, 3.0, case.x.shape))

    return roundtrip_check(
        case.subject,
        lambda t: case.layer.forward(t, case.condition).y,
        lambda t: case.layer.inverse(t, case.condition),
        draw,
        seeds,
    )


def multihead_consistency_check(seed: int) -> OracleReport:
    """1-head and 2-head iSDP with shared query/key weights agree on output and logdet."""
    rng = np.random.default_rng([seed, 2])
    mask = masking.make_mask_2d(4, 4, 0)
    single = randomize(ISdpAttention("one", 2, 4, 4, mask, rng, heads=1), rng)
    double = ISdpAttention("two", 2, 4, 4, mask, rng, heads=2)
    for wq, wk in zip(double.wq, double.wk):
        wq.assign(single.wq[0].data)
        wk.assign(single.wk[0].data)
    double.log_d.assign(single.log_d.data)
    double.raw_alpha.assign(single.raw_alpha.data)
    x = Tensor(rng.normal(0.0, 1.0, (2, 2, 4, 4)))
    with numkit.paused():
        y1, ld1 = single.forward(x)
        y2, ld2 = double.forward(x)
    error = max(float(np.abs(y1.data - y2.data).max()), float(np.abs(ld1.data - ld2.data).max()))
    return OracleReport("isdp-heads", "multihead-consistency", error, BLOCK_TOLERANCE, seed)


#########################
# Mutants               #
#########################


class FlippedLogdet(FlowLayer):
    """Reports the negated log-determinant of the wrapped layer."""

    def __init__(self, layer: FlowLayer):
        super().__init__(f"{layer.name}.flipped")
        self.layer = layer

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        y, logdet = self.layer.forward(x, condition)
        return LayerOutput(y, numkit.negate(logdet))

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        return self.layer.inverse(y, condition)


class SkippedInverseHalf(FlowLayer):
    """Inverse that leaves the transformed half of a checkerboard layer untouched."""

    def __init__(self, layer: FlowLayer, mask: masking.CheckerboardMask):
        super().__init__(f"{layer.name}.skipped")
        self.layer = layer
        self.mask = mask

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        return self.layer.forward(x, condition)

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        x = self.layer.inverse(y, condition)
        return masking.apply_mask(x, self.mask, Half.A) + masking.apply_mask(y, self.mask, Half.B)


class SwappedIMap(IMapAttention):
    """iMap whose data-dependent weights are read from half B and applied to half A."""

    def pre_activation(self, x: Tensor) -> Tensor:
        batch, _, height, width = x.shape
        u = numkit.conv1x1(masking.apply_mask(x, self.mask, Half.B), self.g2)
        w = numkit.channel_mean(u) * self.scale_s
        b = numkit.expand(self.bias_b, (batch, 1, height, width))
        return masking.apply_mask(b, self.mask, Half.B) + masking.apply_mask(w, self.mask, Half.A)


class ScaledBackward(FlowLayer):
    """Forward of the wrapped layer; the adjoint reaching its output is halved on the tape."""

    def __init__(self, layer: FlowLayer, factor: float = 0.5):
        super().__init__(f"{layer.name}.scaled-backward")
        self.layer = layer
        self.factor = factor

    def parameters(self):
        return self.layer.parameters()

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        y, logdet = self.layer.forward(x, condition)
        tape = numkit.active_tape()
        if tape is None:
            return LayerOutput(y, logdet)
        factor = self.factor
        scaled = tape.record("scaled-backward", (y,), y.data.copy(), lambda g: (g * factor,))
        return LayerOutput(scaled, logdet)

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        return self.layer.inverse(y, condition)


def _mutation(report: OracleReport, mutant: str) -> OracleReport:
    """A mutation check passes when the oracle rejected the mutant."""
    caught = 0.0 if not report.passed else 1.0
    return OracleReport(
        f"{report.subject}:{mutant}",
        f"mutation-{report.check}",
        caught,
        0.0,
        report.seed,
        f"oracle error {report.error:.3e} vs tolerance {report.tolerance:.1e}",
    )


def mutation_checks(seed: int) -> list[OracleReport]:
    rng = np.random.default_rng([seed, 3])
    mask = masking.make_mask_2d(4, 4, 0)
    x = Tensor(rng.normal(0.0, 1.0, (1, 2, 4, 4)))

    coupling = randomize(AffineCoupling("affine", 2, 4, rng, SplitRule.CHECKERBOARD, mask), rng)
    flipped = LayerCase("affine", FlippedLogdet(coupling), x)
    skipped = LayerCase("affine", SkippedInverseHalf(coupling, mask), x)
    swapped = randomize(SwappedIMap("imap", 2, 4, 4, mask, rng), rng)

    config = ModelConfig(levels=1, steps=1, channels=4, input_height=4, input_width=4)
    model = random_model(config, seed, scale=0.2)
    model.levels[0].layers[0] = ScaledBackward(model.levels[0].layers[0])
    batch = Tensor(rng.uniform(0.0, 1.0, (2,) + config.input_shape))
    gradients = gradcheck_all(model, batch, subject="model", seed=seed)
    worst = max(gradients, key=lambda r: r.error)

    return [
        _mutation(logdet_check(flipped, seed), "flipped-logdet"),
        _mutation(_case_roundtrip(skipped, [seed]), "skipped-inverse-half"),
        _mutation(
            block_structure_check(LayerCase("imap", swapped, x), mask.indicator(Half.A, x.shape)[0] > 0, seed),
            "weights-from-b",
        ),
        _mutation(worst, "scaled-backward"),
    ]


#########################
# Model subjects        #
#########################


def model_matrix(heads: Sequence[int] = (1, 3)) -> list[ModelConfig]:
    """Coupling kinds x attention kinds x positions x heads on 8x8 inputs, two levels."""
    configs = []
    base = ModelConfig(
        levels=2, steps=2, channels=8, input_height=8, input_width=8, mixture_components=2
    )
    for coupling in CouplingKind:
        configs.append(base.replace(coupling=coupling))
        for position in AttentionPosition:
            configs.append(
                base.replace(coupling=coupling, attention=AttentionKind.IMAP, position=position)
            )
            for head_count in heads:
                configs.append(
                    base.replace(
                        coupling=coupling,
                        attention=AttentionKind.ISDP,
                        position=position,
                        heads=head_count,
                    )
                )
    return configs


def config_subject(config: ModelConfig) -> str:
    if config.attention is AttentionKind.NONE:
        return f"{config.coupling.value}/none"
    return f"{config.coupling.value}/{config.attention.value}/{config.position.value}/{config.heads}h"


def random_model(config: ModelConfig, seed: int, scale: float = 0.05) -> FlowModel:
    """Build ``config`` with perturbed parameters and data-initialized actnorm."""
    model = build(config.replace(seed=seed))
    rng = np.random.default_rng([seed, 4])
    for param in model.parameters():
        param.assign(param.data + rng.normal(0.0, scale, param.shape))
    with numkit.paused():
        model.forward(Tensor(rng.uniform(0.0, 1.0, (8,) + config.input_shape)))
    return model


def model_roundtrip_check(config: ModelConfig, seeds: Sequence[int]) -> OracleReport:
    worst = 0.0
    for seed in seeds:
        try:
            model = random_model(config, seed)
            x = Tensor(np.random.default_rng([seed, 5]).uniform(0.0, 1.0, (2,) + config.input_shape))
            with numkit.paused():
                error = model.reconstruct(x).max_abs_error
        except AttnFlowError as err:
            return OracleReport(
                config_subject(config), "roundtrip", math.inf, MODEL_ROUNDTRIP_TOLERANCE, seed, str(err)
            )
        worst = max(worst, error)
    return OracleReport(config_subject(config), "roundtrip", worst, MODEL_ROUNDTRIP_TOLERANCE, seeds[0])


def latent_vector(model: FlowModel, x: Tensor) -> np.ndarray:
    """All latents of a single sample concatenated in level order, top last."""
    latents = model.forward(x).latents
    parts = [z.data.reshape(-1) for z in latents.splits] + [latents.top.data.reshape(-1)]
    return np.concatenate(parts)


def model_logdet_check(config: ModelConfig, seed: int) -> OracleReport:
    model = random_model(config, seed)
    x = Tensor(np.random.default_rng([seed, 6]).uniform(0.0, 1.0, (1,) + config.input_shape))
    with numkit.paused():
        analytic = model.forward(x).logdet.item()
    reference = fd_jacobian_logdet(lambda t: latent_vector(model, t), x)
    return OracleReport(
        config_subject(config),
        "logdet",
        relative_error(analytic, reference),
        MODEL_LOGDET_TOLERANCE,
        seed,
        f"analytic {analytic:.10g}, finite-difference {reference:.10g}",
    )


def gradient_checks(seed: int) -> list[OracleReport]:
    """Gradcheck a one-level, one-step model for each attention kind."""
    reports = []
    for kind in AttentionKind:
        config = ModelConfig(
            levels=1, steps=1, channels=4, input_height=4, input_width=4, attention=kind, patches=1
        )
        model = random_model(config, seed, scale=0.2)
        x = Tensor(np.random.default_rng([seed, 7]).uniform(0.0, 1.0, (2,) + config.input_shape))
        reports.extend(gradcheck_all(model, x, subject=kind.value, seed=seed))
    return reports


#########################
# Suite runner          #
#########################


def _layer_suite(seed: int, roundtrip_seeds: int, logdet_seeds: int, attention_only: bool):
    checks = []
    cases = attention_cases(seed) if attention_only else layer_cases(seed)
    for index, case in enumerate(cases):
        seeds = [seed + i for i in range(roundtrip_seeds)]
        checks.append(lambda case=case, seeds=seeds: [_case_roundtrip(case, seeds)])

        def logdets(index=index, subject=case.subject):
            reports = []
            for s in range(seed, seed + logdet_seeds):
                pool = attention_cases(s) if attention_only else layer_cases(s)
                reports.append(logdet_check(pool[index], s))
            worst = max(reports, key=lambda r: r.error)
            return [worst]

        checks.append(logdets)
        selector = conditioning_selector(case.layer, case.x.shape[1:])
        if selector is not None:
            checks.append(
                lambda case=case, selector=selector: [block_structure_check(case, selector, seed)]
            )
    if attention_only:
        checks.append(lambda: [multihead_consistency_check(seed)])
    return checks


def _model_suite(seed: int, model_seeds: int):
    checks = []
    seeds = [seed + i for i in range(model_seeds)]
    for config in model_matrix():
        checks.append(lambda config=config: [model_roundtrip_check(config, seeds)])
    small = ModelConfig(levels=2, steps=1, channels=4, input_height=8, input_width=8)
    for kind in AttentionKind:
        config = small.replace(attention=kind, patches=1)
        checks.append(lambda config=config: [model_logdet_check(config, seed)])
    return checks


def suite_checks(
    suite: VerifySuite,
    seed: int,
    roundtrip_seeds: int = DEFAULT_LAYER_SEEDS,
    logdet_seeds: int = DEFAULT_LOGDET_SEEDS,
    model_seeds: int = DEFAULT_MODEL_SEEDS,
) -> list[Callable[[], list[OracleReport]]]:
    """The checks of ``suite`` in declaration order, each returning its reports."""
    checks = []
    if suite in (VerifySuite.LAYERS, VerifySuite.ALL):
        checks += _layer_suite(seed, roundtrip_seeds, logdet_seeds, attention_only=False)
    if suite is VerifySuite.ATTENTION:
        checks += _layer_suite(seed, roundtrip_seeds, logdet_seeds, attention_only=True)
    if suite is VerifySuite.ALL:
        checks.append(lambda: [multihead_consistency_check(seed)])
    if suite in (VerifySuite.MODEL, VerifySuite.ALL):
        checks += _model_suite(seed, model_seeds)
    if suite in (VerifySuite.GRADIENTS, VerifySuite.ALL):
        checks.append(lambda: gradient_checks(seed))
    if suite in (VerifySuite.MUTATION, VerifySuite.ALL):
        checks.append(lambda: mutation_checks(seed))
    return checks


def run_suite(
    suite: VerifySuite,
    seed: int,
    threads: int = 1,
    roundtrip_seeds: int = DEFAULT_LAYER_SEEDS,
    logdet_seeds: int = DEFAULT_LOGDET_SEEDS,
    model_seeds: int = DEFAULT_MODEL_SEEDS,
) -> list[OracleReport]:
    """Run every check of ``suite`` on up to ``threads`` workers.

    Reports are merged in declaration order regardless of completion order.
    """
    checks = suite_checks(suite, seed, roundtrip_seeds, logdet_seeds, model_seeds)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        batches = list(executor.map(lambda check: check(), checks))
    reports = [report for batch in batches for report in batch]
    failed = [r for r in reports if not r.passed]
    logger.info(
        "verify %s: %d checks, %d failed", suite.value, len(reports), len(failed)
    )
    for report in failed:
        logger.warning(
            "FAILED %s %s: error %.3e > %.1e %s",
            report.subject,
            report.check,
            report.error,
            report.tolerance,
            report.detail,
        )
    return reports


def reports_frame(reports: Sequence[OracleReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "subject": r.subject,
                "check": r.check,
                "error": r.error,
                "tolerance": r.tolerance,
                "passed": r.passed,
                "seed": r.seed,
                "detail": r.detail,
            }
            for r in reports
        ],
        columns=["subject", "check", "error", "tolerance", "passed", "seed", "detail"],
    )
