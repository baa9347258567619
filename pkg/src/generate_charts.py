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
import pandas as pd
import plotly.express as px
import plotly.graph_objs as go

from app_configs import LOSS_WINDOW

ITERATION_LABEL = "Iteration"
NLL_LABEL = "NLL"
AVERAGE_LABEL = f"NLL (moving average, {LOSS_WINDOW})"
CONFIG_LABEL = "Configuration"
BPD_LABEL = "Bits/dim"


def get_loss_df(metrics: pd.DataFrame, window: int = LOSS_WINDOW) -> pd.DataFrame:
    """Given per-iteration training metrics, generates a DataFrame of the loss and its moving
        average.

    Args:
        metrics: A DataFrame with at least the ``iter`` and ``nll`` columns.
        window: Width of the trailing moving average.

    Returns:
        pd.DataFrame: A DataFrame with iteration, NLL and moving-average NLL columns.
    """
    df = metrics.sort_values(by=["iter"]).reset_index(drop=True)

    return pd.DataFrame(
        {
            ITERATION_LABEL: df["iter"],
            NLL_LABEL: df["nll"],
            AVERAGE_LABEL: df["nll"].rolling(window, min_periods=1).mean(),
        }
    )


def moving_average_at(metrics: pd.DataFrame, iteration: int, window: int = LOSS_WINDOW) -> float:
    """Trailing moving-average NLL at ``iteration``."""
    df = get_loss_df(metrics, window)
    return float(df.loc[df[ITERATION_LABEL] == iteration, AVERAGE_LABEL].iloc[0])


def get_ablation_df(results: pd.DataFrame) -> pd.DataFrame:
    """Label each ablation row as ``kind/position/heads`` and order by attention kind.

    Args:
        results: A DataFrame with ``kind``, ``position``, ``heads`` and ``bpd`` columns.

    Returns:
        pd.DataFrame: A DataFrame with a configuration label and the bits/dim.
    """
    labels = [
        kind if kind == "none" else f"{kind}/{position}/{heads}h"
        for kind, position, heads in zip(results["kind"], results["position"], results["heads"])
    ]

    return pd.DataFrame({CONFIG_LABEL: labels, BPD_LABEL: results["bpd"]})


def generate_loss_chart(df: pd.DataFrame, title: str = "") -> go.Figure:
    """Generates a line chart of the loss and its moving average given a DataFrame.

    Args:
        df (pd.DataFrame): A DataFrame produced by :func:`get_loss_df`.
        title: The title of the plot.

    Returns:
        go.Figure: A Plotly figure object.
    """
    fig = px.line(
        df,
        title=title,
        x=ITERATION_LABEL,
        y=[NLL_LABEL, AVERAGE_LABEL],
    )

    fig.update_traces(hovertemplate="%{y:.4f}")

    fig.update_layout(
        margin=dict(l=40, r=40, t=40, b=40),
        xaxis_title=ITERATION_LABEL,
        yaxis_title="Negative log-likelihood (nats)",
        legend_title=None,
        font=dict(size=11),
    )

    return fig


def generate_ablation_chart(df: pd.DataFrame, title: str = "") -> go.Figure:
    """Generates a bar chart of bits/dim per configuration given a DataFrame.

    The no-attention baseline is drawn as a dashed reference line when present.

    Args:
        df (pd.DataFrame): A DataFrame produced by :func:`get_ablation_df`.
        title: The title of the plot.

    Returns:
        go.Figure: A Plotly figure object.
    """
    fig = px.bar(
        df,
        title=title,
        x=CONFIG_LABEL,
        y=BPD_LABEL,
    )

    fig.update_traces(hovertemplate="%{y:.4f}")

    baseline = df.loc[df[CONFIG_LABEL] == "none", BPD_LABEL]
    if len(baseline):
        fig.add_hline(
            y=float(baseline.iloc[0]),
            line_width=2,
            line_color="red",
            annotation_text=f"no attention: {float(baseline.iloc[0]):.4f}",
            line_dash="dash",
            annotation_font_size=13,
            annotation_position="top left",
            annotation_font_color="red",
        )

    fig.update_layout(
        margin=dict(l=40, r=40, t=40, b=40),
        xaxis_title=None,
        yaxis_title=BPD_LABEL,
        showlegend=False,
        font=dict(size=11),
    )

    return fig
