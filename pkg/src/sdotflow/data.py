"""Toy datasets, the plain-text point file format and density rasters."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .rng import generator
from .sdot import Dataset

# black squares of the 4x4 board over [-2, 2]^2: floor(x+2) + floor(y+2) even
BLACK_SQUARES = tuple((i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0)


def sample_checkerboard(n: int, seed: int) -> np.ndarray:
    """``n`` points uniform on the eight black unit squares of [-2, 2]^2."""
    rng = generator(seed)
    cells = np.asarray(BLACK_SQUARES, dtype=np.float64)[rng.integers(0, len(BLACK_SQUARES), size=n)]
    return cells + rng.random((n, 2)) - 2.0


def in_black_square(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    inside = np.all((p >= -2.0) & (p <= 2.0), axis=1)
    cell = np.floor(np.clip(p, -2.0, 2.0 - 1e-12) + 2.0).astype(np.int64)
    return inside & ((cell[:, 0] + cell[:, 1]) % 2 == 0)


def square_counts(points: np.ndarray) -> np.ndarray:
    """Point count in every one of the 16 unit squares, shape (4, 4)."""
    cell = np.floor(np.clip(points, -2.0, 2.0 - 1e-12) + 2.0).astype(np.int64)
    counts = np.zeros((4, 4), dtype=np.int64)
    np.add.at(counts, (cell[:, 0], cell[:, 1]), 1)
    return counts


# --- point file ---------------------------------------------------------------


def format_points(points, class_ids=None) -> str:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, d = pts.shape
    cls = np.zeros(n, dtype=np.int64) if class_ids is None else np.asarray(class_ids, dtype=np.int64)
    k = int(np.unique(cls).size) if n else 0
    lines = [f"d={d} n={n} classes={k}"]
    lines += [" ".join([str(int(c))] + ["%.17g" % v for v in row]) for c, row in zip(cls, pts)]
    return "\n".join(lines) + "\n"


def write_points(path, points, class_ids=None) -> None:
    Path(path).write_text(format_points(points, class_ids))


def parse_points(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse a point file; returns ``(points, class_ids)``."""
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty point file", offset=0)
    try:
        header = dict(field.split("=", 1) for field in lines[0].split())
        d, n, k = int(header["d"]), int(header["n"]), int(header["classes"])
    except (KeyError, ValueError):
        raise FormatError(f"bad header {lines[0]!r}; expected 'd=<dim> n=<count> classes=<k>'", offset=1) from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise FormatError(f"header declares {n} points, found {len(body)}", offset=1)
    points = np.empty((n, d))
    cls = np.empty(n, dtype=np.int64)
    for row, line in enumerate(body):
        fields = line.split()
        if len(fields) != d + 1:
            raise FormatError(f"expected {d + 1} fields, found {len(fields)}", offset=row + 2)
        try:
            cls[row] = int(fields[0])
            points[row] = [float(v) for v in fields[1:]]
        except ValueError:
            raise FormatError(f"unparseable line {line!r}", offset=row + 2) from None
    if n and int(np.unique(cls).size) != k:
        raise FormatError(f"header declares {k} classes, found {np.unique(cls).size}", offset=1)
    return points, cls


def read_points(path) -> tuple[np.ndarray, np.ndarray]:
    return parse_points(Path(path).read_text())


def load_dataset(path) -> Dataset:
    """Uniform-weight dataset from a point file (class ids kept if >1 class)."""
    points, cls = read_points(path)
    return Dataset.uniform(points, cls if np.unique(cls).size > 1 else None)


# --- density raster -------------------------------------------------------------


def density_grid(points, size: int = 256, extent: float = 3.0) -> np.ndarray:
    """2D histogram over ``[-extent, extent]^2``; row 0 is the top (largest y)."""
    p = np.asarray(points, dtype=np.float64)
    hist, _, _ = np.histogram2d(p[:, 1], p[:, 0], bins=size,
                                range=[[-extent, extent], [-extent, extent]])
    return hist[::-1].astype(np.int64)


def write_pgm(path, counts: np.ndarray) -> None:
    """Plain (P2) greyscale image, brighter where counts are higher."""
    peak = int(counts.max()) if counts.size else 0
    scaled = np.zeros_like(counts) if peak == 0 else np.rint(255.0 * counts / peak).astype(np.int64)
    rows = [" ".join(str(int(v)) for v in row) for row in scaled]
    Path(path).write_text(f"P2\n{counts.shape[1]} {counts.shape[0]}\n255\n" + "\n".join(rows) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if not tokens or tokens[0] != "P2":
        raise FormatError("not a plain PGM file", offset=0)
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)
