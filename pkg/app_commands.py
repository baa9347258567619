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

"""Command handlers behind ``app.py``.

Each handler takes plain values parsed from the command line, does its work
through the ``src`` library and returns a ``NamedTuple`` of its results. Handlers
never print; ``app.py`` decides what reaches standard output.
"""
from __future__ import annotations

import logging
import math
import os
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd

from app_configs import ABLATION_HEADS, LOSS_WINDOW, RANDOM_SEED, TOY_DATASETS
from src import data_io, numkit, training, verify
from src.flow_enums import AttentionKind, AttentionPosition, DatasetKind, VerifySuite
from src.flow_model import FlowModel, bits_per_dim, build
from src.generate_charts import generate_ablation_chart, get_ablation_df
from src.numkit import Tensor
from src.run_config import DataConfig, RunConfig, load_run_config, worker_threads

logger = logging.getLogger(__name__)

SAMPLE_GRID_COLUMNS = 8
RECONSTRUCTION_IMAGE = "reconstruction.pgm"
RECONSTRUCTION_ERRORS = "reconstruction.csv"
ABLATION_CSV = "ablation.csv"
ABLATION_HTML = "ablation.html"
ABLATION_COLUMNS = ["kind", "position", "heads", "params", "final_nll", "bpd"]


def data_config_for(base: DataConfig, data: str | None) -> DataConfig:
    """Point a ``[data]`` section at ``data``: a toy dataset name or an IDX file path."""
    if data is None:
        return base
    if data in TOY_DATASETS:
        return base.replace(kind=DatasetKind.TOY2D_GRID.value, name=data)
    return base.replace(kind=DatasetKind.IDX_IMAGES.value, path=data)


def evaluation_inputs(dataset: data_io.Dataset, seed: int) -> np.ndarray:
    """Dequantize the whole dataset once with a fixed generator."""
    return dataset.dequantized(np.random.default_rng(seed))


class TrainCommandReturn(NamedTuple):
    """Return type for the ``cmd_train`` command."""

    out_dir: str
    checkpoint_path: str
    iterations: int
    final_nll: float
    final_bpd: float
    parameter_count: int


def cmd_train(
    config_path: str | None,
    data: str | None,
    out: str,
    seed: int | None = None,
    resume: str | None = None,
) -> TrainCommandReturn:
    """Train a flow and write its run directory.

    Args:
        config_path: Run configuration file, defaults for every key when None.
        data: Toy dataset name or IDX path overriding ``[data]``.
        out: Run directory.
        seed: Overrides the model, training and data seeds.
        resume: Checkpoint to continue from; its embedded configuration wins.

    Returns:
        A NamedTuple (TrainCommandReturn) with the run directory, the final
        checkpoint path and the last iteration's loss.
    """
    if resume is not None:
        ignored = [
            flag
            for flag, value in (("--config", config_path), ("--data", data), ("--seed", seed))
            if value is not None
        ]
        if ignored:
            logger.warning(
                "resuming from %s: ignoring %s, the checkpoint's configuration is used",
                resume,
                ", ".join(ignored),
            )
        checkpoint = training.load_checkpoint(resume)
        config = checkpoint.config
        model, _ = training.restore_model(checkpoint)
    else:
        checkpoint = None
        config = load_run_config(config_path)
        if seed is not None:
            config = config.with_overrides(
                model=config.model.replace(seed=seed),
                train=config.train.replace(seed=seed),
                data=config.data.replace(seed=seed),
            )
        config = config.with_overrides(data=data_config_for(config.data, data))
        model = build(config.model)

    dataset = data_io.load_dataset(config.data)
    result = training.train(model, dataset, config, out, resume=checkpoint)
    metrics = result.metrics
    final_nll = float(metrics["nll"].iloc[-1]) if len(metrics) else math.nan
    final_bpd = float(metrics["bpd"].iloc[-1]) if len(metrics) else math.nan

    return TrainCommandReturn(
        out_dir=out,
        checkpoint_path=os.path.join(out, training.FINAL_CHECKPOINT),
        iterations=result.checkpoint.iteration,
        final_nll=final_nll,
        final_bpd=final_bpd,
        parameter_count=model.parameter_count(),
    )


def _load_model(ckpt: str) -> tuple[FlowModel, RunConfig]:
    checkpoint = training.load_checkpoint(ckpt)
    model, _ = training.restore_model(checkpoint)
    return model, checkpoint.config


def _conditions(model: FlowModel, config: RunConfig, data: str | None, n: int) -> Tensor | None:
    """Conditions for ``n`` samples, cycled from the dataset of a conditional model."""
    if model.encoder is None:
        return None
    dataset = data_io.load_dataset(data_config_for(config.data, data))
    return Tensor(np.resize(dataset.condition, (n,) + dataset.condition.shape[1:]))


class SampleCommandReturn(NamedTuple):
    """Return type for the ``cmd_sample`` command."""

    path: str
    samples: np.ndarray


def cmd_sample(
    ckpt: str,
    n: int,
    temperature: float,
    out: str,
    seed: int = RANDOM_SEED,
    data: str | None = None,
) -> SampleCommandReturn:
    """Draw ``n`` samples and write them as one tiled PGM.

    Temperature 0 follows the prior means, so its output does not depend on ``seed``.
    """
    model, config = _load_model(ckpt)
    condition = _conditions(model, config, data, n)
    with numkit.paused():
        x = model.sample(n, temperature, np.random.default_rng(seed), condition).x.data
    cols = min(n, SAMPLE_GRID_COLUMNS)
    rows = math.ceil(n / cols)
    directory = os.path.dirname(out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    data_io.pgm_write(data_io.tile_grid(np.clip(x, 0.0, 1.0), rows, cols), out)
    logger.info("wrote %d samples at temperature %g to %s", n, temperature, out)

    return SampleCommandReturn(path=out, samples=x)


class EvalCommandReturn(NamedTuple):
    """Return type for the ``cmd_eval`` command."""

    bpd: float
    nll: float
    count: int


def cmd_eval(ckpt: str, data: str | None = None) -> EvalCommandReturn:
    """Mean bits/dim of a dataset under a trained model.

    The dataset defaults to the one recorded in the checkpoint's configuration.
    Samples are dequantized once with the ``[data] seed`` generator.
    """
    model, config = _load_model(ckpt)
    data_config = data_config_for(config.data, data)
    dataset = data_io.load_dataset(data_config)
    x = evaluation_inputs(dataset, data_config.seed)
    log_prob = model.log_prob_chunks(x, dataset.condition, threads=worker_threads())
    mean_log_prob = float(np.mean(log_prob))

    return EvalCommandReturn(
        bpd=float(bits_per_dim(mean_log_prob, model.config.dimension)),
        nll=-mean_log_prob,
        count=dataset.size,
    )


class ReconstructCommandReturn(NamedTuple):
    """Return type for the ``cmd_reconstruct`` command."""

    max_abs_error: float
    count: int
    image_path: str
    errors_path: str


def cmd_reconstruct(ckpt: str, data: str | None, out: str) -> ReconstructCommandReturn:
    """Invert the forward pass of every sample and report the worst error.

    Writes ``reconstruction.pgm`` (first row originals, second row reconstructions)
    and ``reconstruction.csv`` (per-sample max-abs error) into ``out``.
    """
    model, config = _load_model(ckpt)
    data_config = data_config_for(config.data, data)
    dataset = data_io.load_dataset(data_config)
    x = evaluation_inputs(dataset, data_config.seed)
    condition = None if dataset.condition is None else Tensor(dataset.condition)

    with numkit.paused():
        result = model.reconstruct(Tensor(x), condition)
    errors = np.abs(result.x.data - x).reshape(x.shape[0], -1).max(axis=1)

    os.makedirs(out, exist_ok=True)
    cols = min(dataset.size, SAMPLE_GRID_COLUMNS)
    pairs = np.concatenate([x[:cols], np.clip(result.x.data[:cols], 0.0, 1.0)])
    image_path = os.path.join(out, RECONSTRUCTION_IMAGE)
    data_io.pgm_write(data_io.tile_grid(pairs, 2, cols), image_path)
    errors_path = os.path.join(out, RECONSTRUCTION_ERRORS)
    pd.DataFrame({"sample": np.arange(dataset.size), "max_abs_error": errors}).to_csv(
        errors_path, index=False
    )
    logger.info("reconstructed %d samples, max error %.3e", dataset.size, result.max_abs_error)

    return ReconstructCommandReturn(
        max_abs_error=result.max_abs_error,
        count=dataset.size,
        image_path=image_path,
        errors_path=errors_path,
    )


class VerifyCommandReturn(NamedTuple):
    """Return type for the ``cmd_verify`` command."""

    reports: list[verify.OracleReport]
    passed: bool
    report_path: str | None


def cmd_verify(suite: str, seed: int, out: str | None = None) -> VerifyCommandReturn:
    """Run an oracle suite and optionally write its report as CSV."""
    reports = verify.run_suite(VerifySuite(suite), seed, threads=worker_threads())
    if out is not None:
        directory = os.path.dirname(out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        verify.reports_frame(reports).to_csv(out, index=False)

    return VerifyCommandReturn(
        reports=reports,
        passed=all(report.passed for report in reports),
        report_path=out,
    )


def ablation_configs(config: RunConfig, heads: Sequence[int] = ABLATION_HEADS) -> list[RunConfig]:
    """The baseline, one iMap run per position and one iSDP run per position and head count."""
    model = config.model
    configs = [config.with_overrides(model=model.replace(attention=AttentionKind.NONE.value))]
    for position in AttentionPosition:
        configs.append(
            config.with_overrides(
                model=model.replace(attention=AttentionKind.IMAP.value, position=position.value)
            )
        )
        for head_count in heads:
            configs.append(
                config.with_overrides(
                    model=model.replace(
                        attention=AttentionKind.ISDP.value,
                        position=position.value,
                        heads=head_count,
                    )
                )
            )
    return configs


def run_name(config: RunConfig) -> str:
    model = config.model
    if model.attention is AttentionKind.NONE:
        return "none"
    if model.attention is AttentionKind.IMAP:
        return f"imap-{model.position.value}"
    return f"isdp-{model.position.value}-{model.heads}h"


class AblateCommandReturn(NamedTuple):
    """Return type for the ``cmd_ablate`` command."""

    results: pd.DataFrame
    csv_path: str
    html_path: str


def cmd_ablate(
    config_path: str | None,
    data: str | None,
    out: str,
    heads: Sequence[int] = ABLATION_HEADS,
) -> AblateCommandReturn:
    """Train every attention configuration on the same data and compare bits/dim.

    Each run lives in its own subdirectory of ``out``. ``final_nll`` is the mean
    loss over the last ``LOSS_WINDOW`` iterations and ``bpd`` is evaluated on the
    training set after training.
    """
    base = load_run_config(config_path)
    base = base.with_overrides(data=data_config_for(base.data, data))
    dataset = data_io.load_dataset(base.data)
    x = evaluation_inputs(dataset, base.data.seed)

    rows = []
    for config in ablation_configs(base, heads):
        name = run_name(config)
        model = build(config.model)
        result = training.train(model, dataset, config, os.path.join(out, name))
        log_prob = model.log_prob_chunks(x, dataset.condition, threads=worker_threads())
        final_nll = float(result.metrics["nll"].tail(LOSS_WINDOW).mean())
        rows.append(
            {
                "kind": config.model.attention.value,
                "position": config.model.position.value,
                "heads": config.model.heads,
                "params": model.parameter_count(),
                "final_nll": final_nll,
                "bpd": float(bits_per_dim(float(np.mean(log_prob)), model.config.dimension)),
            }
        )
        logger.info("ablation %s: %d params, bpd %.5f", name, rows[-1]["params"], rows[-1]["bpd"])

    results = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, ABLATION_CSV)
    results.to_csv(csv_path, index=False)
    html_path = os.path.join(out, ABLATION_HTML)
    generate_ablation_chart(get_ablation_df(results), "Bits/dim per attention configuration").write_html(
        html_path
    )

    return AblateCommandReturn(results=results, csv_path=csv_path, html_path=html_path)
