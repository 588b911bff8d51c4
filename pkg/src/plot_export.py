#!/usr/bin/env python3
"""
Plot export for result tables.

Reads a monitor, curve or VCP-scatter CSV (never modifying it) and writes an
interactive plotly HTML figure plus a dependency-free SVG polyline of the
main series.
"""

import logging
import os
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from src.errors import ConfigError

logger = logging.getLogger(__name__)

SVG_WIDTH, SVG_HEIGHT, SVG_MARGIN = 640, 400, 40

# lambda / lambda_max bands drawn behind the monitored loading estimate
BAND_COLOURS = (
    (0.875, 1.0, "rgba(231, 76, 60, 0.12)", "87.5-100%"),
    (0.75, 0.875, "rgba(230, 126, 34, 0.12)", "75-87.5%"),
    (0.5, 0.75, "rgba(241, 196, 15, 0.12)", "50-75%"),
)


def table_kind(frame: pd.DataFrame) -> str:
    columns = set(frame.columns)
    if {"t", "lambda_hat", "v_hat"} <= columns:
        return "monitor"
    if {"lambda_real", "lambda_pre"} <= columns:
        return "vcp_scatter"
    if {"lambda", "v_ref"} <= columns:
        return "curve"
    if "lambda" in columns and any(c.startswith("bus_") and c.endswith("_vm") for c in columns):
        return "pv_curve"
    raise ConfigError(f"cannot tell what to plot from columns {sorted(columns)}")


def weakest_bus_column(frame: pd.DataFrame) -> str:
    """Magnitude column reaching the lowest voltage along the curve"""
    vm_columns = [c for c in frame.columns if c.startswith("bus_") and c.endswith("_vm")]
    return min(vm_columns, key=lambda c: frame[c].min())


def main_series(frame: pd.DataFrame) -> Tuple[np.ndarray, np.ndarray, str, str]:
    kind = table_kind(frame)
    if kind == "monitor":
        return frame["t"].to_numpy(float), frame["lambda_hat"].to_numpy(float), "tick", "aligned lambda"
    if kind == "vcp_scatter":
        return frame["lambda_real"].to_numpy(float), frame["lambda_pre"].to_numpy(float), \
            "real lambda_max", "estimated lambda_max"
    if kind == "pv_curve":
        weakest = weakest_bus_column(frame)
        return frame["lambda"].to_numpy(float), frame[weakest].to_numpy(float), "lambda", f"{weakest} (pu)"
    return frame["lambda"].to_numpy(float), frame["v_ref"].to_numpy(float), "lambda", "voltage (pu)"


def series_summary(frame: pd.DataFrame) -> Dict[str, object]:
    x, y, x_title, y_title = main_series(frame)
    finite = np.isfinite(x) & np.isfinite(y)
    summary = {"kind": table_kind(frame), "x": x_title, "y": y_title,
               "points": int(len(x)), "finite_points": int(finite.sum())}
    if finite.any():
        summary.update(y_min=float(y[finite].min()), y_max=float(y[finite].max()))
    return summary


def svg_polyline(x: np.ndarray, y: np.ndarray, title: str = "") -> str:
    """Single-series SVG; NaN samples are dropped"""
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    if len(x) == 0:
        raise ConfigError("nothing finite to plot")

    def scale(values: np.ndarray, size: int, flip: bool) -> np.ndarray:
        lo, hi = values.min(), values.max()
        span = hi - lo if hi > lo else 1.0
        unit = (values - lo) / span
        if flip:
            unit = 1.0 - unit
        return SVG_MARGIN + unit * (size - 2 * SVG_MARGIN)

    px = scale(x, SVG_WIDTH, False)
    py = scale(y, SVG_HEIGHT, True)
    points = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">\n'
        f'  <title>{title}</title>\n'
        f'  <rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>\n'
        f'  <polyline fill="none" stroke="#2c3e50" stroke-width="2" points="{points}"/>\n'
        f'</svg>\n'
    )


def build_figure(frame: pd.DataFrame, title: str, lambda_max: Optional[float] = None) -> go.Figure:
    kind = table_kind(frame)
    x, y, x_title, y_title = main_series(frame)
    fig = go.Figure()

    if kind == "vcp_scatter":
        fig.add_trace(go.Scatter(
            x=x, y=y, mode='markers', name='directions',
            marker=dict(size=9, color='#e74c3c'),
            text=frame["direction"] if "direction" in frame else None,
            hovertemplate='<b>%{text}</b><br>real: %{x:.4f}<br>estimated: %{y:.4f}<extra></extra>',
        ))
        finite = np.r_[x, y][np.isfinite(np.r_[x, y])]
        if len(finite):
            lo, hi = float(finite.min()), float(finite.max())
            fig.add_trace(go.Scatter(x=[lo, hi], y=[lo, hi], mode='lines', name='exact',
                                     line=dict(color='#95a5a6', dash='dash')))
    else:
        fig.add_trace(go.Scatter(x=x, y=y, mode='lines+markers', name=y_title,
                                 line=dict(color='#2c3e50', width=2), marker=dict(size=4)))

    if kind == "pv_curve":
        weakest = weakest_bus_column(frame)
        for column in [c for c in frame.columns if c.startswith("bus_") and c.endswith("_vm") and c != weakest]:
            fig.add_trace(go.Scatter(x=x, y=frame[column], mode='lines', name=column,
                                     line=dict(width=1), visible='legendonly'))

    if kind == "monitor":
        for column in [c for c in frame.columns if c.startswith("z")]:
            fig.add_trace(go.Scatter(x=x, y=frame[column], mode='lines', name=column,
                                     line=dict(width=1), visible='legendonly'))
        if lambda_max:
            for low, high, colour, label in BAND_COLOURS:
                fig.add_hrect(y0=low * lambda_max, y1=high * lambda_max, fillcolor=colour,
                              line_width=0, annotation_text=label)

    fig.update_layout(
        title=title,
        xaxis_title=x_title,
        yaxis_title=y_title,
        hovermode='closest',
        template='plotly_white',
        showlegend=True,
        height=450,
    )
    return fig


def export_plot(csv_path: str, out_dir: str, lambda_max: Optional[float] = None,
                svg: bool = True) -> Dict[str, str]:
    """Write <stem>.html (and <stem>.svg); returns the written paths"""
    if not os.path.exists(csv_path):
        raise ConfigError(f"table not found: {csv_path}")
    frame = pd.read_csv(csv_path)
    stem = os.path.splitext(os.path.basename(csv_path))[0]
    os.makedirs(out_dir, exist_ok=True)

    written = {}
    html_path = os.path.join(out_dir, f"{stem}.html")
    build_figure(frame, stem, lambda_max).write_html(html_path, include_plotlyjs="cdn")
    written["html"] = html_path

    if svg:
        x, y, _, _ = main_series(frame)
        svg_path = os.path.join(out_dir, f"{stem}.svg")
        with open(svg_path, "w") as f:
            f.write(svg_polyline(x, y, stem))
        written["svg"] = svg_path
    logger.info("Exported %s plot of %s", table_kind(frame), csv_path)
    return written
