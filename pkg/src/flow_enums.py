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

from enum import Enum


class CouplingKind(Enum):
    """The elementwise transform used by coupling layers."""

    AFFINE = "affine"
    MIXTURE = "mixture"

    @property
    def label(self):
        return {
            CouplingKind.AFFINE: "Affine coupling",
            CouplingKind.MIXTURE: "Mixture affine coupling",
        }[self]


class SplitRule(Enum):
    """How a coupling layer partitions its input into transformed and conditioning halves."""

    CHANNEL = "channel"
    CHECKERBOARD = "checkerboard"
    PERMUTED = "permuted"

    @property
    def label(self):
        return {
            SplitRule.CHANNEL: "Channel halves",
            SplitRule.CHECKERBOARD: "2D checkerboard",
            SplitRule.PERMUTED: "Permuted 3D checkerboard",
        }[self]


class AttentionKind(Enum):
    """The invertible attention layer inserted into every flow step."""

    NONE = "none"
    IMAP = "imap"
    ISDP = "isdp"

    @property
    def label(self):
        return {
            AttentionKind.NONE: "No attention",
            AttentionKind.IMAP: "iMap",
            AttentionKind.ISDP: "iSDP",
        }[self]


class AttentionPosition(Enum):
    """Where in a flow step the attention layer is inserted."""

    POS1 = "pos1"
    POS2 = "pos2"
    POS3 = "pos3"
    POS4 = "pos4"

    @property
    def label(self):
        return {
            AttentionPosition.POS1: "Before actnorm",
            AttentionPosition.POS2: "After actnorm",
            AttentionPosition.POS3: "After invertible 1x1 convolution",
            AttentionPosition.POS4: "After coupling",
        }[self]


class AttentionActivation(Enum):
    """Activation applied to scaled dot-product scores."""

    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"

    @property
    def label(self):
        return {
            AttentionActivation.SIGMOID: "Sigmoid",
            AttentionActivation.SOFTMAX: "Softmax",
        }[self]


class MaskKind(Enum):
    """Checkerboard mask layouts."""

    SPATIAL_2D = 0
    PERMUTED_3D = 1

    @property
    def label(self):
        return {
            MaskKind.SPATIAL_2D: "Spatial 2D",
            MaskKind.PERMUTED_3D: "Permuted 3D",
        }[self]


class Half(Enum):
    """Mask halves: A conditions, B is transformed."""

    A = 0
    B = 1

    @property
    def other(self):
        return Half.B if self is Half.A else Half.A


class DatasetKind(Enum):
    """Supported dataset sources."""

    TOY2D_GRID = "toy2d-grid"
    IDX_IMAGES = "idx-images"

    @property
    def label(self):
        return {
            DatasetKind.TOY2D_GRID: "Toy 2D density grid",
            DatasetKind.IDX_IMAGES: "IDX images",
        }[self]


class VerifySuite(Enum):
    """Groups of numerical oracle checks."""

    LAYERS = "layers"
    ATTENTION = "attention"
    MODEL = "model"
    GRADIENTS = "gradients"
    MUTATION = "mutation"
    ALL = "all"
