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

"""Maximum-likelihood training: Adamax, gradient clipping, the loop and checkpoints.

Checkpoint layout (``.afck``), all integers little-endian::

    b"AFCK" | u32 version | u32 header length | UTF-8 JSON header
    u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | rank x u32 extents
                | u64 payload length | payload of float64 values
"""
from __future__ import annotations

import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from src import numkit
from src.data_io import METRICS_COLUMNS, Dataset, csv_append, pgm_write, tile_grid
from src.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    NonFiniteError,
    NumericalError,
    ShapeError,
)
from src.flow_model import FlowModel, bits_per_dim, build
from src.generate_charts import generate_loss_chart, get_loss_df
from src.numkit import Parameter, Tensor
from src.run_config import RunConfig, TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AFCK"
CHECKPOINT_VERSION = 1
MOMENT_PREFIXES = ("adamax.m/", "adamax.u/")

FINAL_CHECKPOINT = "checkpoint.afck"
LAST_GOOD_CHECKPOINT = "checkpoint-last-good.afck"
METRICS_FILE = "metrics.csv"
LOSS_CURVE_FILE = "loss_curve.html"


@dataclass
class AdamaxState:
    """Adamax step counter and per-parameter moments, keyed by parameter name."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)


def adamax_step(
    params: list[Parameter],
    grads: dict[str, np.ndarray],
    state: AdamaxState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamaxState:
    """Apply one Adamax update in place and return the advanced state.

    ``m <- b1 m + (1 - b1) g``, ``u <- max(b2 u, |g|)`` and
    ``theta <- theta - lr / (1 - b1^t) * m / (u + eps)``.

    Raises:
        NonFiniteError: A gradient holds NaN or Inf; names the parameter. No
            parameter is updated.
    """
    t = state.step + 1
    correction = lr / (1.0 - beta1**t)
    checked = []
    for param in params:
        grad = grads.get(param.name)
        grad = np.zeros(param.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeError(
                f"{param.name}: gradient shape {grad.shape} does not match {param.shape}"
            )
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {param.name}")
        checked.append((param, grad))

    # no parameter moves unless every gradient is usable
    m_next, u_next = {}, {}
    for param, grad in checked:
        m = beta1 * state.m.get(param.name, np.zeros(param.shape)) + (1.0 - beta1) * grad
        u = np.maximum(beta2 * state.u.get(param.name, np.zeros(param.shape)), np.abs(grad))
        param.assign(param.data - correction * m / (u + eps))
        m_next[param.name] = m
        u_next[param.name] = u
    return AdamaxState(t, m_next, u_next)


def clip_grad_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by one factor so their global L2 norm is at most ``max_norm``.

    Returns:
        tuple[dict, float]: The (possibly scaled) gradients and the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def learning_rate(config: TrainConfig, iteration: int) -> float:
    """Linear warmup: ``lr * min(1, (iteration + 1) / warmup)``."""
    if config.warmup <= 0:
        return config.lr
    return config.lr * min(1.0, (iteration + 1) / config.warmup)


##########################
# Checkpoints            #
##########################


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume its optimizer.

    ``tensors`` holds the parameters followed by the Adamax moments, stored as
    ``adamax.m/<name>`` and ``adamax.u/<name>``.
    """

    config: RunConfig
    iteration: int
    adamax_step: int
    actnorm_initialized: bool
    mask_seeds: dict[str, int]
    tensors: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION

    def header(self) -> dict:
        sections = self.config.to_sections()
        return {
            "format_version": self.version,
            "model": sections["model"],
            "train": sections["train"],
            "data": sections["data"],
            "mask_seeds": self.mask_seeds,
            "iteration": self.iteration,
            "adamax_step": self.adamax_step,
            "actnorm_initialized": self.actnorm_initialized,
        }

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(MOMENT_PREFIXES)}

    def optimizer_state(self) -> AdamaxState:
        m = {k[len("adamax.m/") :]: v for k, v in self.tensors.items() if k.startswith("adamax.m/")}
        u = {k[len("adamax.u/") :]: v for k, v in self.tensors.items() if k.startswith("adamax.u/")}
        return AdamaxState(self.adamax_step, m, u)


def capture(
    model: FlowModel, config: RunConfig, iteration: int, state: AdamaxState | None = None
) -> Checkpoint:
    """Snapshot ``model`` and optimizer ``state`` into a :class:`Checkpoint`."""
    state = AdamaxState() if state is None else state
    tensors = {p.name: p.numpy() for p in model.parameters()}
    for name in list(tensors):
        if name in state.m:
            tensors[f"adamax.m/{name}"] = np.array(state.m[name])
            tensors[f"adamax.u/{name}"] = np.array(state.u[name])
    return Checkpoint(
        config=config,
        iteration=iteration,
        adamax_step=state.step,
        actnorm_initialized=model.initialized,
        mask_seeds=dict(model.mask_seeds),
        tensors=tensors,
    )


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    header = json.dumps(checkpoint.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", checkpoint.version),
        struct.pack("<I", len(header)),
        header,
        struct.pack("<I", len(checkpoint.tensors)),
    ]
    for name, array in checkpoint.tensors.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype="<f8")
        payload = array.tobytes()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    return b"".join(chunks)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> str:
    """Write ``checkpoint`` to ``path`` atomically (temporary file, then rename)."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    temporary = f"{path}.tmp"
    with open(temporary, "wb") as handle:
        handle.write(encode_checkpoint(checkpoint))
    os.replace(temporary, path)
    logger.info("wrote checkpoint %s (iteration %d)", path, checkpoint.iteration)
    return path


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.source = source
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.raw):
            raise CheckpointTruncatedError(
                f"{self.source}: {what} needs {size} bytes at offset {self.offset}, "
                f"only {len(self.raw) - self.offset} left"
            )
        chunk = self.raw[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def decode_checkpoint(raw: bytes, source: str = "<checkpoint>") -> Checkpoint:
    """Parse checkpoint bytes, validating every declared length.

    Raises:
        CheckpointVersionError: Wrong magic or unsupported version.
        CheckpointTruncatedError: The data ends inside a field.
        CheckpointShapeError: A payload length disagrees with its extents.
        CheckpointError: Malformed header or trailing bytes.
    """
    reader = _Reader(raw, source)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{source}: bad magic {magic!r}")
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{source}: format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )
    header_bytes = reader.take(reader.u32("header length"), "header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
        config = RunConfig.from_sections(
            {key: header[key] for key in ("model", "train", "data")}
        )
        iteration = int(header["iteration"])
        step = int(header["adamax_step"])
        initialized = bool(header["actnorm_initialized"])
        mask_seeds = {str(k): int(v) for k, v in header["mask_seeds"].items()}
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, AttributeError) as err:
        raise CheckpointError(f"{source}: malformed header ({err})") from None

    tensors = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8", "replace")
        rank = reader.u32(f"rank of {name}")
        extents = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"extents of {name}"))
        declared = reader.u64(f"payload length of {name}")
        expected = 8 * int(np.prod(extents, dtype=np.int64))
        if declared != expected:
            raise CheckpointShapeError(
                f"{source}: tensor {name} declares {declared} payload bytes but extents "
                f"{tuple(extents)} need {expected}"
            )
        payload = reader.take(declared, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(extents).astype(np.float64)
    if reader.offset != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - reader.offset} trailing bytes")
    return Checkpoint(config, iteration, step, initialized, mask_seeds, tensors, version)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as err:
        raise CheckpointError(f"cannot read {path}: {err.strerror}") from None
    return decode_checkpoint(raw, path)


def restore_model(checkpoint: Checkpoint) -> tuple[FlowModel, AdamaxState]:
    """Rebuild the model from the embedded config and load every parameter.

    Raises:
        CheckpointShapeError: A parameter is missing, unexpected or has the wrong shape.
        CheckpointError: The stored mask seeds disagree with the rebuilt model.
    """
    model = build(checkpoint.config.model)
    registry = model.parameter_registry()
    stored = checkpoint.parameters()
    for name in stored.keys() - registry.keys():
        raise CheckpointShapeError(f"checkpoint tensor {name} is not a model parameter")
    for name, param in registry.items():
        if name not in stored:
            raise CheckpointShapeError(f"checkpoint is missing tensor {name}")
        if stored[name].shape != param.shape:
            raise CheckpointShapeError(
                f"tensor {name} has shape {stored[name].shape}, model expects {param.shape}"
            )
        param.assign(stored[name])
    if checkpoint.mask_seeds != model.mask_seeds:
        raise CheckpointError("checkpoint mask seeds disagree with the rebuilt model")
    if checkpoint.actnorm_initialized:
        model.mark_initialized()
    return model, checkpoint.optimizer_state()


##########################
# Training loop          #
##########################


class TrainResult(NamedTuple):
    checkpoint: Checkpoint
    metrics: pd.DataFrame


def minibatch(
    dataset: Dataset, batch: int, seed: int, iteration: int
) -> tuple[Tensor, Tensor | None]:
    """The minibatch of ``iteration``, a pure function of ``(seed, iteration)``."""
    rng = np.random.default_rng([seed, iteration])
    indices = rng.choice(dataset.size, size=batch, replace=dataset.size < batch)
    return dataset.batch(indices, rng)


def write_sample_grid(
    model: FlowModel,
    config: RunConfig,
    dataset: Dataset | None,
    path: str,
    seed: int,
) -> None:
    train = config.train
    n = train.grid_rows * train.grid_cols
    condition = None
    if model.encoder is not None:
        condition = Tensor(np.resize(dataset.condition, (n,) + dataset.condition.shape[1:]))
    with numkit.paused():
        x = model.sample(n, train.temperature, np.random.default_rng(seed), condition).x
    pgm_write(tile_grid(np.clip(x.data, 0.0, 1.0), train.grid_rows, train.grid_cols), path)


def train(
    model: FlowModel,
    dataset: Dataset,
    config: RunConfig,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Minimize the mean negative log-likelihood of ``dataset`` under ``model``.

    Every iteration draws its minibatch from ``(seed, iteration)``, so a run resumed
    from a checkpoint continues bit-identically.

    Args:
        model: The flow to train, updated in place.
        dataset: Training data matching the model input shape.
        config: Run configuration; ``config.train`` drives the loop.
        out_dir: Directory for metrics, checkpoints, sample grids and the loss
            curve; nothing is written when None.
        resume: Checkpoint to continue from; its parameters must already be in
            ``model`` (see :func:`restore_model`).

    Returns:
        TrainResult: The final checkpoint and the metrics of this run.

    Raises:
        NonFiniteError: The loss or a gradient became non-finite; the state before
            the failing iteration is kept as ``checkpoint-last-good.afck``.
    """
    train_config = config.train
    if dataset.shape != model.config.input_shape:
        raise ShapeError(
            f"dataset shape {dataset.shape} does not match model input {model.config.input_shape}"
        )
    state = AdamaxState() if resume is None else resume.optimizer_state()
    start = 0 if resume is None else resume.iteration
    params = model.parameters()
    dimension = model.config.dimension
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        config.write(out_dir)
        metrics_path = os.path.join(out_dir, METRICS_FILE)

    rows = []
    for iteration in range(start, train_config.iters):
        began = time.perf_counter()
        x, condition = minibatch(dataset, train_config.batch, train_config.seed, iteration)
        last_good = None if out_dir is None else capture(model, config, iteration, state)
        try:
            if not model.initialized:
                with numkit.paused():
                    model.forward(x, condition)
            with numkit.recording() as tape:
                loss = model.mean_nll(x, condition)
            grads = tape.backward(loss)
            grads, norm = clip_grad_norm(grads, train_config.clip)
            state = adamax_step(
                params,
                grads,
                state,
                learning_rate(train_config, iteration),
                train_config.beta1,
                train_config.beta2,
                train_config.eps,
            )
        except NumericalError:
            if last_good is not None:
                save_checkpoint(last_good, os.path.join(out_dir, LAST_GOOD_CHECKPOINT))
            logger.error("training stopped at iteration %d: non-finite values", iteration + 1)
            raise

        nll = loss.item()
        row = {
            "iter": iteration + 1,
            "nll": nll,
            "bpd": float(bits_per_dim(-nll, dimension)),
            "grad_norm": norm,
            "wall_ms": (time.perf_counter() - began) * 1000.0,
        }
        rows.append(row)
        if metrics_path is not None:
            csv_append(row, metrics_path)
        if (iteration + 1) % train_config.log_every == 0:
            logger.info(
                "iter %d: nll %.5f, bpd %.5f, grad norm %.4g",
                iteration + 1,
                nll,
                row["bpd"],
                norm,
            )
        if (
            out_dir is not None
            and train_config.checkpoint_every
            and (iteration + 1) % train_config.checkpoint_every == 0
        ):
            save_checkpoint(
                capture(model, config, iteration + 1, state),
                os.path.join(out_dir, f"checkpoint-iter{iteration + 1}.afck"),
            )
            try:
                write_sample_grid(
                    model,
                    config,
                    dataset,
                    os.path.join(out_dir, f"samples_iter{iteration + 1}.pgm"),
                    seed=train_config.seed + iteration + 1,
                )
            except NumericalError as err:
                logger.warning("skipped sample grid at iteration %d: %s", iteration + 1, err)

    final = capture(model, config, max(start, train_config.iters), state)
    metrics = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    if out_dir is not None:
        save_checkpoint(final, os.path.join(out_dir, FINAL_CHECKPOINT))
        if os.path.exists(metrics_path):
            chart = generate_loss_chart(get_loss_df(pd.read_csv(metrics_path)), "Training loss")
            chart.write_html(os.path.join(out_dir, LOSS_CURVE_FILE))
    return TrainResult(final, metrics)
