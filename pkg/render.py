"""
Artifact writers: SVG trajectory figures, CSV tables and JSON reports.

Figures are derived artifacts. Every SVG is written next to a CSV holding the plotted
numbers, and the SVG embeds the tube mask as a base64 PNG so the file is self-contained.
"""

from __future__ import annotations

import base64
import html
import io
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from PIL import Image

from dynamic_ot import DynamicField
from graphcore import MetricGraph
from tube import Trajectory, TubeGrid

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"  # CSV floats; fixed so reruns are byte-identical
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"]


@dataclass
class FigureStyle:
    width_px: int = 900
    margin_px: int = 24
    mask_rgb: tuple[int, int, int] = (225, 228, 235)
    edge_color: str = "#555555"
    edge_width: float = 1.2
    line_width: float = 1.0
    line_opacity: float = 0.75
    point_radius: float = 2.5
    show_graph: bool = True
    title: str | None = None


def write_json(obj: Any, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def trajectory_frame(trajectories: Sequence[Trajectory]) -> pd.DataFrame:
    """One row per polyline vertex: trajectory, source, target, mass, step, cell and coordinates."""
    rows: list[dict[str, Any]] = []
    for k, t in enumerate(trajectories):
        for step, (cell, point) in enumerate(zip(t.cells, t.points, strict=True)):
            row = {"trajectory": k, "source": t.source, "target": t.target, "mass": t.mass, "step": step, "cell": cell}
            row.update({axis: float(v) for axis, v in zip("xyz", point, strict=False)})
            rows.append(row)
    columns = ["trajectory", "source", "target", "mass", "step", "cell", "x", "y"]
    if trajectories and trajectories[0].points.shape[1] == 3:
        columns.append("z")
    return pd.DataFrame(rows, columns=columns)


def field_frames(f: DynamicField) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Edge table (t, edge, cell, x, rho, j) and node table (t, node, gamma) of a space-time field.

    ``j`` is the cell-centred flux, the mean of the two face fluxes of the interval that starts at t;
    the final level repeats the last interval.
    """
    grid = f.grid
    edge_rows: list[dict[str, Any]] = []
    for level in range(f.steps + 1):
        t = level * f.dt
        for eg in grid.edge_grids:
            rho, flux = f.edge_view(level, eg.edge)
            j = 0.5 * (flux[:-1] + flux[1:])
            for c, (x, r, jc) in enumerate(zip(eg.centers(), rho, j, strict=True)):
                edge_rows.append({"t": t, "edge": eg.edge, "cell": c, "x": x, "rho": r, "j": jc})
    node_rows = [
        {"t": level * f.dt, "node": node, "gamma": float(f.gamma[level, k])}
        for level in range(f.steps + 1)
        for k, node in enumerate(grid.graph.nodes)
    ]
    return (
        pd.DataFrame(edge_rows, columns=["t", "edge", "cell", "x", "rho", "j"]),
        pd.DataFrame(node_rows, columns=["t", "node", "gamma"]),
    )


def _mask_png(tg: TubeGrid, rgb: tuple[int, int, int]) -> str:
    mask = tg.mask if tg.dim == 2 else tg.mask.any(axis=2)
    image = np.full((*mask.T.shape, 4), 0, dtype=np.uint8)
    image[mask.T[::-1]] = (*rgb, 255)
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG", optimize=True)
    return base64.b64encode(buf.getvalue()).decode("ascii")


class _Frame:
    """Maps ambient (x, y) onto SVG pixels with y pointing up."""

    def __init__(self, tg: TubeGrid, style: FigureStyle) -> None:
        lo, hi = tg.bounds()
        self.lo, self.hi = lo[:2], hi[:2]
        span = np.maximum(self.hi - self.lo, 1e-12)
        self.scale = (style.width_px - 2 * style.margin_px) / float(span[0])
        self.margin = style.margin_px
        self.width = style.width_px
        self.height = int(round(float(span[1]) * self.scale)) + 2 * style.margin_px

    def xy(self, p: np.ndarray) -> tuple[float, float]:
        x = self.margin + (float(p[0]) - self.lo[0]) * self.scale
        y = self.height - self.margin - (float(p[1]) - self.lo[1]) * self.scale
        return round(x, 2), round(y, 2)

    def points(self, pts: np.ndarray) -> str:
        return " ".join(f"{x},{y}" for x, y in (self.xy(p) for p in pts))


def trajectory_svg(
    tg: TubeGrid,
    trajectories: Sequence[Trajectory],
    path: Path,
    style: FigureStyle | None = None,
    graph: MetricGraph | None = None,
) -> Path:
    """Write the mask, the embedded graph and one polyline per trajectory, plus the sidecar CSV.

    The sidecar is ``path`` with suffix ``.csv`` and holds :func:`trajectory_frame`.
    """
    style = style or FigureStyle()
    fr = _Frame(tg, style)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{fr.width}" height="{fr.height}" '
        f'viewBox="0 0 {fr.width} {fr.height}">'
    ]
    if style.title:
        parts.append(f"<title>{html.escape(style.title)}</title>")
    parts.append(
        f'<image x="{fr.margin}" y="{fr.margin}" width="{fr.width - 2 * fr.margin}" '
        f'height="{fr.height - 2 * fr.margin}" preserveAspectRatio="none" '
        f'href="data:image/png;base64,{_mask_png(tg, style.mask_rgb)}"/>'
    )
    g = graph if graph is not None else tg.graph
    if style.show_graph and g.has_embeddings:
        parts.append(f'<g fill="none" stroke="{style.edge_color}" stroke-width="{style.edge_width}">')
        for e in g.edges:
            parts.append(f'<polyline data-edge="{html.escape(e.id)}" points="{fr.points(e.polyline())}"/>')
        parts.append("</g>")
    parts.append(f'<g fill="none" stroke-width="{style.line_width}" stroke-opacity="{style.line_opacity}">')
    for k, t in enumerate(trajectories):
        color = PALETTE[t.target % len(PALETTE)]
        parts.append(f'<polyline data-trajectory="{k}" stroke="{color}" points="{fr.points(t.points)}"/>')
    parts.append("</g>")
    parts.append('<g stroke="none">')
    for t in trajectories:
        sx, sy = fr.xy(t.points[0])
        tx, ty = fr.xy(t.points[-1])
        color = PALETTE[t.target % len(PALETTE)]
        parts.append(f'<circle cx="{sx}" cy="{sy}" r="{style.point_radius}" fill="#000000"/>')
        parts.append(f'<circle cx="{tx}" cy="{ty}" r="{style.point_radius}" fill="{color}"/>')
    parts.append("</g>")
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    write_csv(trajectory_frame(trajectories), path.with_suffix(".csv"))
    logger.debug(f"wrote {path.name} with {len(trajectories)} trajectories")
    return path


__all__ = [
    "FigureStyle",
    "write_json",
    "write_csv",
    "trajectory_frame",
    "field_frames",
    "trajectory_svg",
]
