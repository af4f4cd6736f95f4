"""Attention-map export: upsample region weights to image space, write PGM/CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DimensionError


def bilinear_upsample(grid: np.ndarray, out_size: int) -> np.ndarray:
    """Resize a square grid with half-pixel-centre bilinear interpolation.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * g / out - 0.5``,
    clamped to the grid, so corners replicate the edge cells.
    """
    grid = np.asarray(grid, dtype=np.float64)
    g = grid.shape[0]
    coords = np.clip((np.arange(out_size) + 0.5) * g / out_size - 0.5, 0.0, g - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, g - 1)
    frac = coords - lo
    rows = grid[lo] * (1 - frac)[:, None] + grid[hi] * frac[:, None]
    return rows[:, lo] * (1 - frac)[None, :] + rows[:, hi] * frac[None, :]


def attention_grid(alpha, grid_side: int) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    G = grid_side * grid_side
    if G > alpha.size:
        raise DimensionError(f"grid {grid_side}x{grid_side} needs {G} weights, alpha has {alpha.size}")
    return alpha[:G].reshape(grid_side, grid_side)


def attention_map(alpha, grid_side: int, out_size: int) -> np.ndarray:
    """Upsampled image-region attention as uint8 in [0, 255] (min-max normalised).

    A constant map carries no contrast and is returned as uniform mid-gray.
    """
    up = bilinear_upsample(attention_grid(alpha, grid_side), out_size)
    lo, hi = up.min(), up.max()
    if hi - lo <= 1e-15 * max(abs(hi), 1.0):
        return np.full(up.shape, 128, dtype=np.uint8)
    return np.round((up - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read the P5 files written by :func:`write_pgm` (no comment lines)."""
    data = Path(path).read_bytes()
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM file")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(pixels[:w * h], dtype=np.uint8).reshape(h, w)


def write_alpha_csv(alpha, grid_side: int, path) -> None:
    """One row per weight: image regions first (row-major grid), then feature types."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    G = grid_side * grid_side
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "index", "row", "col", "alpha"])
        for i, a in enumerate(alpha):
            if i < G:
                w.writerow(["region", i, i // grid_side, i % grid_side, repr(float(a))])
            else:
                w.writerow(["feature", i - G, "", "", repr(float(a))])


def export_attention_map(alpha, grid_side: int, out_size: int, out_dir, stem: str = "attention") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pgm, csv_path = out / f"{stem}.pgm", out / f"{stem}.csv"
    write_pgm(attention_map(alpha, grid_side, out_size), pgm)
    write_alpha_csv(alpha, grid_side, csv_path)
    return pgm, csv_path
