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

"""Exception hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI reports for it: 1 for usage
and configuration problems, 2 for data and file-format problems, 3 for
numerical failures.
"""
from __future__ import annotations


class AttnFlowError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(AttnFlowError):
    """Invalid configuration key, value or combination."""


class ShapeError(AttnFlowError):
    """Tensor, mask or parameter shapes do not agree."""


class TapeError(AttnFlowError):
    """A gradient was requested for a root that is not a scalar recorded on the tape."""


class LayerStateError(AttnFlowError):
    """A layer was used before it reached a usable state, e.g. uninitialized actnorm."""


class DataFormatError(AttnFlowError):
    """Malformed or unreadable input file."""

    exit_code = 2


class IdxFormatError(DataFormatError):
    """IDX file with a bad magic number or a truncated payload."""


class CheckpointError(DataFormatError):
    """Checkpoint file that cannot be loaded."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint magic or format version is not supported."""


class CheckpointShapeError(CheckpointError):
    """A checkpoint tensor disagrees with its declared or expected shape."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ended before a declared field or payload."""


class NumericalError(AttnFlowError):
    """Numerical failure: non-finite values, singular matrices, failed root finding."""

    exit_code = 3


class NonFiniteError(NumericalError):
    """An operation produced NaN or Inf."""


class DomainError(NumericalError):
    """An operand lies outside the domain of an operation (log of a non-positive value...)."""


class SingularMatrixError(NumericalError):
    """LU factorization met a pivot below the singularity floor.

    Args:
        pivot: Index of the offending pivot.
        magnitude: Absolute value of the pivot.
        patch: Patch index, when raised from a patchwise attention block.
        head: Head index, when raised from a patchwise attention block.
    """

    def __init__(
        self, pivot: int, magnitude: float, patch: int | None = None, head: int | None = None
    ):
        self.pivot = pivot
        self.magnitude = magnitude
        self.patch = patch
        self.head = head
        where = ""
        if patch is not None:
            where = f" in patch {patch}, head {head}"
        super().__init__(f"singular matrix{where}: pivot {pivot} has magnitude {magnitude:.3e}")


class BracketError(NumericalError):
    """Bisection could not bracket the root for an element."""


class ScaleUnderflowError(NumericalError):
    """An attention scale underflowed to (almost) zero."""
