"""SVG renderings of motion descriptors.

Two views: a rose diagram (12 wedges, radius proportional to the summed
directional mass over all grid cells) and a grid map (3x3 cells shaded by
directional mass, one arrow per cell at the circular-mean angle, no arrow
where the static bin dominates). Angles follow image-space conventions:
0 degrees points right, 90 degrees points down, which matches SVG's
y-down coordinate system directly.

Output is plain SVG text with fixed float formatting, so identical
inputs produce identical bytes and golden files diff cleanly.
"""

from __future__ import annotations

import math

import numpy as np

from dgme.descriptor import DgmeConfig
from dgme.errors import DataError


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def aggregate_bins(matrix: np.ndarray, cfg: DgmeConfig) -> tuple[np.ndarray, float]:
    """Sum features over clips and cells; returns (directional[12], static mass)."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.shape[1] != cfg.length:
        raise DataError(f"feature width {matrix.shape[1]} does not match config ({cfg.length})")
    cells = matrix.sum(axis=0).reshape(cfg.grid * cfg.grid, cfg.bins_per_cell)
    directional = cells[:, : cfg.directional_bins].sum(axis=0)
    static = float(cells[:, cfg.directional_bins].sum())
    return directional, static


def rose_geometry(directional: np.ndarray, max_radius: float = 120.0) -> np.ndarray:
    """Wedge radii proportional to per-bin mass (zero-safe)."""
    directional = np.asarray(directional, dtype=np.float64)
    peak = directional.max()
    if peak <= 0:
        return np.zeros_like(directional)
    return max_radius * directional / peak


def rose_svg(directional: np.ndarray, meta: dict | None = None,
             size: int = 300) -> str:
    """Rose diagram of the 12 directional bins."""
    radii = rose_geometry(directional, max_radius=size * 0.4)
    cx = cy = size / 2.0
    bins = len(directional)
    step = 360.0 / bins

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        _meta_comment(meta),
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for frac in (1.0, 2.0 / 3.0, 1.0 / 3.0):
        lines.append(
            f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(size * 0.4 * frac)}" '
            'fill="none" stroke="#cccccc" stroke-width="1"/>'
        )
    for k in range(bins):
        r = radii[k]
        if r <= 0:
            continue
        a0 = math.radians(step * k)
        a1 = math.radians(step * (k + 1))
        x0, y0 = cx + r * math.cos(a0), cy + r * math.sin(a0)
        x1, y1 = cx + r * math.cos(a1), cy + r * math.sin(a1)
        lines.append(
            f'<path d="M {_fmt(cx)} {_fmt(cy)} L {_fmt(x0)} {_fmt(y0)} '
            f'A {_fmt(r)} {_fmt(r)} 0 0 1 {_fmt(x1)} {_fmt(y1)} Z" '
            f'fill="#2a6fb0" fill-opacity="0.85" stroke="#174a7a" stroke-width="1"/>'
        )
    lines.append("</svg>")
    return "\n".join(line for line in lines if line) + "\n"


def grid_arrow_angles(values: np.ndarray, cfg: DgmeConfig) -> list[float | None]:
    """Circular-mean angle per cell, or None where static mass dominates."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (cfg.length,):
        raise DataError(f"descriptor length {values.shape} does not match config ({cfg.length})")
    cells = values.reshape(cfg.grid * cfg.grid, cfg.bins_per_cell)
    centers = np.radians((np.arange(cfg.directional_bins) + 0.5) * cfg.bin_width)
    angles: list[float | None] = []
    for cell in cells:
        directional = cell[: cfg.directional_bins]
        static = cell[cfg.directional_bins]
        total = directional.sum()
        if total <= 0 or static >= total:
            angles.append(None)
            continue
        sx = float((directional * np.cos(centers)).sum())
        sy = float((directional * np.sin(centers)).sum())
        angles.append(math.degrees(math.atan2(sy, sx)) % 360.0)
    return angles


def grid_svg(values: np.ndarray, cfg: DgmeConfig, meta: dict | None = None,
             cell_px: int = 90) -> str:
    """3x3 grid map: shading by directional mass, arrows by mean direction."""
    values = np.asarray(values, dtype=np.float64)
    angles = grid_arrow_angles(values, cfg)
    cells = values.reshape(cfg.grid * cfg.grid, cfg.bins_per_cell)
    dir_mass = cells[:, : cfg.directional_bins].sum(axis=1)
    peak = dir_mass.max()
    size = cfg.grid * cell_px

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        _meta_comment(meta),
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for k in range(cfg.grid * cfg.grid):
        i, j = divmod(k, cfg.grid)
        x, y = j * cell_px, i * cell_px
        if dir_mass[k] > 0 and peak > 0:
            shade = int(round(255 - 200 * dir_mass[k] / peak))  # darker = more motion
            fill = f'fill="rgb({shade},{shade},{shade})"'
        else:
            fill = 'fill="none"'
        lines.append(
            f'<rect x="{x}" y="{y}" width="{cell_px}" height="{cell_px}" '
            f'{fill} stroke="#444444" stroke-width="1"/>'
        )
        angle = angles[k]
        if angle is None:
            continue
        ccx, ccy = x + cell_px / 2.0, y + cell_px / 2.0
        rad = math.radians(angle)
        length = cell_px * 0.32
        tipx = ccx + length * math.cos(rad)
        tipy = ccy + length * math.sin(rad)
        tailx = ccx - length * math.cos(rad)
        taily = ccy - length * math.sin(rad)
        head = cell_px * 0.10
        left = rad + math.radians(150.0)
        right = rad - math.radians(150.0)
        lines.append(
            f'<line x1="{_fmt(tailx)}" y1="{_fmt(taily)}" x2="{_fmt(tipx)}" y2="{_fmt(tipy)}" '
            'stroke="#b03030" stroke-width="3"/>'
        )
        lines.append(
            f'<polygon points="{_fmt(tipx)},{_fmt(tipy)} '
            f'{_fmt(tipx + head * math.cos(left))},{_fmt(tipy + head * math.sin(left))} '
            f'{_fmt(tipx + head * math.cos(right))},{_fmt(tipy + head * math.sin(right))}" '
            'fill="#b03030"/>'
        )
    lines.append("</svg>")
    return "\n".join(line for line in lines if line) + "\n"


def _meta_comment(meta: dict | None) -> str:
    if not meta:
        return ""
    parts = " ".join(f"{k}={v}" for k, v in meta.items())
    return f"<!-- dgme-viz {parts} -->"
