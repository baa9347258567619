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

"""Invertible attention layers.

Both layers read their attention weights from the conditioning half A of a 2D
checkerboard mask and apply them to the complementary half B, so the inverse can
recompute the weights from the untouched half:

- :class:`IMapAttention` is a per-position diagonal scaling: ``sigmoid(b)`` on
  half A and ``sigmoid(s * w)`` on half B, where ``w`` is the channel average of a
  pointwise convolution of the A-half.
- :class:`ISdpAttention` mixes the B-half positions of every patch with an
  ``m x m`` matrix ``alpha I + act(Q K^T / sqrt(d))`` built from the A-half positions of
  the same patch, one matrix per head and channel group.
"""
from __future__ import annotations

import logging
import math
from typing import NamedTuple

import numpy as np

from app_configs import ATTENTION_INIT_SCALE, MIN_ATTENTION_SCALE
from src import masking, numkit
from src.errors import ConfigError, ScaleUnderflowError, ShapeError, SingularMatrixError
from src.flow_enums import AttentionActivation, Half, MaskKind
from src.flow_layers import FlowLayer, LayerOutput
from src.masking import CheckerboardMask
from src.numkit import Parameter, SquareMatrix, Tensor

logger = logging.getLogger(__name__)


def _check_spatial_mask(name: str, mask: CheckerboardMask, height: int, width: int) -> None:
    if mask.kind is not MaskKind.SPATIAL_2D:
        raise ShapeError(f"{name}: attention needs a 2D checkerboard mask")
    if mask.shape != (height, width):
        raise ShapeError(f"{name}: mask {mask.shape} does not match {(height, width)}")


def _check_scales(name: str, scale: np.ndarray) -> None:
    if (scale < MIN_ATTENTION_SCALE).any():
        position = tuple(int(i) for i in np.argwhere(scale < MIN_ATTENTION_SCALE)[0])
        raise ScaleUnderflowError(f"{name}: attention scale underflow at index {position}")


class IMapWeights(NamedTuple):
    """Pre-activation map and the applied per-position scales, both ``(B, 1, H, W)``."""

    pre_activation: Tensor
    scale: Tensor


class IMapAttention(FlowLayer):
    """Map-based invertible attention, a data-dependent diagonal scaling.

    Args:
        name: Parameter name prefix.
        channels: Input channels ``C``.
        height: Input height.
        width: Input width.
        mask: 2D checkerboard mask; half A conditions, half B is scaled by the
            data-dependent weights.
        rng: Generator for the pointwise convolution initialization.
        attention_channels: Output channels ``C'`` of the pointwise convolution;
            0 means ``C``.
    """

    kind = "imap"

    def __init__(
        self,
        name: str,
        channels: int,
        height: int,
        width: int,
        mask: CheckerboardMask,
        rng: np.random.Generator,
        attention_channels: int = 0,
    ):
        super().__init__(name)
        _check_spatial_mask(name, mask, height, width)
        hidden = attention_channels or channels
        self.mask = mask
        self.channels = channels
        self.g2 = Parameter(
            f"{name}.g2", rng.normal(0.0, ATTENTION_INIT_SCALE, (1, 1, hidden, channels))
        )
        self.scale_s = Parameter(f"{name}.scale_s", np.ones((1, 1, 1, 1)))
        self.bias_b = Parameter(f"{name}.bias_b", np.zeros((1, 1, height, width)))
        self.conditioning_half = Half.A

    def parameters(self) -> list[Parameter]:
        return [self.g2, self.scale_s, self.bias_b]

    def pre_activation(self, x: Tensor) -> Tensor:
        """``M * b + (1 - M) * s * mean_c(G2(M * x))`` as a ``(B, 1, H, W)`` map."""
        batch, _, height, width = x.shape
        u = numkit.conv1x1(masking.apply_mask(x, self.mask, self.conditioning_half), self.g2)
        w = numkit.channel_mean(u) * self.scale_s
        b = numkit.expand(self.bias_b, (batch, 1, height, width))
        return masking.apply_mask(b, self.mask, Half.A) + masking.apply_mask(w, self.mask, Half.B)

    def imap_weights(self, x: Tensor) -> IMapWeights:
        pre = self.pre_activation(x)
        return IMapWeights(pre, numkit.sigmoid(pre))

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        pre, scale = self.imap_weights(x)
        _check_scales(self.name, scale.data)
        y = x * numkit.expand(scale, x.shape)
        logdet = numkit.mul(numkit.per_sample_sum(numkit.log_sigmoid(pre)), float(x.shape[1]))
        return LayerOutput(y, logdet)

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        """Recover half A by dividing out ``sigmoid(b)``, then rebuild the B-half scales."""
        fixed = numkit.sigmoid(numkit.expand(self.bias_b, (y.shape[0], 1) + y.shape[2:]))
        _check_scales(self.name, fixed.data)
        recovered = masking.apply_mask(
            y / numkit.expand(fixed, y.shape), self.mask, self.conditioning_half
        )
        scale = self.imap_weights(recovered).scale
        _check_scales(self.name, scale.data)
        return y / numkit.expand(scale, y.shape)


class ISdpAttention(FlowLayer):
    """Patchwise scaled dot-product invertible attention.

    For each patch ``p`` and head ``h`` the ``m`` B-half positions of the head's
    channel group are mixed by ``W = alpha I + act(Q K^T / sqrt(d))`` where
    ``Q = X_A wq^T`` and ``K = X_A wk^T`` come from the ``m`` A-half positions of
    the same patch. The log-determinant is ``sum_p sum_h C_h log|det W_{p,h}|``.

    Args:
        name: Parameter name prefix.
        channels: Input channels ``C``; heads partition them into contiguous groups.
        height: Input height.
        width: Input width.
        mask: 2D checkerboard mask.
        rng: Generator for the query/key initialization.
        heads: Number of heads, ``1 <= heads <= C``.
        patches: Requested number of patches; coarsened until the grid tiles the
            input with even-area patches.
        activation: Row activation applied to the scaled scores.
        pure_eq6: Drop the ``alpha I`` stabilization term.
    """

    kind = "isdp"

    def __init__(
        self,
        name: str,
        channels: int,
        height: int,
        width: int,
        mask: CheckerboardMask,
        rng: np.random.Generator,
        heads: int = 1,
        patches: int = 4,
        activation: AttentionActivation = AttentionActivation.SIGMOID,
        pure_eq6: bool = False,
    ):
        super().__init__(name)
        _check_spatial_mask(name, mask, height, width)
        if not 1 <= heads <= channels:
            raise ConfigError(f"{name}: heads must be in [1, {channels}], got {heads}")
        self.mask = mask
        self.channels = channels
        self.spatial = (height, width)
        self.activation = activation
        self.pure_eq6 = pure_eq6
        self.patch_grid = masking.patch_grid_for(height, width, patches)
        self.index_a = masking.patch_index(mask, Half.A, self.patch_grid)
        self.index_b = masking.patch_index(mask, Half.B, self.patch_grid)
        if self.index_a.shape != self.index_b.shape:
            raise ShapeError(f"{name}: patches hold unequal A and B counts")
        self.groups = [
            (int(group[0]), int(group[-1]) + 1)
            for group in np.array_split(np.arange(channels), heads)
        ]
        self.wq = [
            Parameter(
                f"{name}.head{h}.wq", rng.normal(0.0, ATTENTION_INIT_SCALE, (1, 1, channels, channels))
            )
            for h in range(heads)
        ]
        self.wk = [
            Parameter(
                f"{name}.head{h}.wk", rng.normal(0.0, ATTENTION_INIT_SCALE, (1, 1, channels, channels))
            )
            for h in range(heads)
        ]
        self.log_d = Parameter(f"{name}.log_d", np.full((1, 1, 1, 1), math.log(math.sqrt(channels))))
        # softplus(log(e - 1)) == 1
        self.raw_alpha = Parameter(f"{name}.raw_alpha", np.full((1, 1, 1, 1), math.log(math.e - 1.0)))
        logger.debug(
            "%s: patch grid %s, %d positions per half-patch, heads %s",
            name,
            self.patch_grid,
            self.positions,
            self.groups,
        )

    @property
    def heads(self) -> int:
        return len(self.groups)

    @property
    def patches(self) -> int:
        return self.index_a.shape[0]

    @property
    def positions(self) -> int:
        """Positions ``m`` of each half inside one patch."""
        return self.index_a.shape[1]

    def parameters(self) -> list[Parameter]:
        params = []
        for wq, wk in zip(self.wq, self.wk):
            params += [wq, wk]
        if self.pure_eq6:
            return params + [self.log_d]
        return params + [self.log_d, self.raw_alpha]

    def alpha(self) -> float:
        return float(np.logaddexp(0.0, self.raw_alpha.item()))

    def block_weights(self, x: Tensor, head: int) -> Tensor:
        """All patch matrices of ``head`` as a ``(B, P, m, m)`` tensor; reads only half A."""
        x_a = numkit.gather_positions(x, self.index_a)
        q = numkit.conv1x1(x_a, self.wq[head])
        k = numkit.conv1x1(x_a, self.wk[head])
        scores = numkit.patch_scores(q, k)
        # 1 / sqrt(d) with d = exp(log_d)
        inv_sqrt_d = numkit.exp(numkit.mul(self.log_d, -0.5))
        scores = scores * numkit.expand(inv_sqrt_d, scores.shape)
        if self.activation is AttentionActivation.SOFTMAX:
            weights = numkit.softmax_rows(scores)
        else:
            weights = numkit.sigmoid(scores)
        if self.pure_eq6:
            return weights
        eye = numkit.constant(np.broadcast_to(np.eye(self.positions), weights.shape))
        return weights + eye * numkit.expand(numkit.softplus(self.raw_alpha), weights.shape)

    def isdp_weights(self, x: Tensor, patch: int, head: int) -> np.ndarray:
        """The ``(B, m, m)`` matrices of one patch and head."""
        return self.block_weights(x, head).data[:, patch].copy()

    def forward(self, x: Tensor, condition: Tensor | None = None) -> LayerOutput:
        x_b = numkit.gather_positions(x, self.index_b)
        outputs = []
        logdet = None
        for head, (lo, hi) in enumerate(self.groups):
            weights = self.block_weights(x, head)
            outputs.append(numkit.patch_apply(weights, numkit.slice_channels(x_b, lo, hi)))
            term = numkit.mul(
                numkit.sum_axes(numkit.block_logdet(weights, head=head), (1,)), float(hi - lo)
            )
            logdet = term if logdet is None else logdet + term
        mixed = numkit.scatter_positions(
            numkit.concat_channels(outputs), self.index_b, self.spatial
        )
        return LayerOutput(masking.apply_mask(x, self.mask, Half.A) + mixed, logdet)

    def inverse(self, y: Tensor, condition: Tensor | None = None) -> Tensor:
        """Recompute every block from the unchanged half A and LU-solve for half B."""
        y_b = numkit.gather_positions(y, self.index_b).data
        batch = y.shape[0]
        pieces = []
        for head, (lo, hi) in enumerate(self.groups):
            weights = self.block_weights(y, head).data
            recovered = np.empty((batch, hi - lo, self.patches, self.positions))
            for b in range(batch):
                for p in range(self.patches):
                    try:
                        result = numkit.lu_logdet_solve(
                            SquareMatrix(weights[b, p]), y_b[b, lo:hi, p, :].T
                        )
                    except SingularMatrixError as err:
                        raise SingularMatrixError(
                            err.pivot, err.magnitude, patch=p, head=head
                        ) from err
                    recovered[b, :, p, :] = result.solution.T
            pieces.append(recovered)
        x_b = Tensor(np.concatenate(pieces, axis=1))
        return masking.apply_mask(y, self.mask, Half.A) + numkit.scatter_positions(
            x_b, self.index_b, self.spatial
        )
