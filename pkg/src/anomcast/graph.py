"""Undirected region graphs: grid partitions and administrative edge lists.

A region network is a symmetric, zero-diagonal adjacency over N regions plus
sorted per-region neighbor lists. Grid graphs connect cells that share an
edge (4-neighborhood) by default; corner-touching cells can be included with
``diagonal=True``. Administrative graphs come from an explicit edge list.

Graph spec file format (UTF-8 text, ``#`` starts a comment line):

    grid ROWS COLS
or
    regions N
    i j          (one edge per line, 0-based, whitespace separated)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError

__all__ = [
    "RegionGraph",
    "build_grid_graph",
    "build_region_graph",
    "neighbors",
    "load_graph_spec",
    "save_graph_spec",
    "dsa_pairs",
]


@dataclass(frozen=True)
class RegionGraph:
    """Immutable region network: adjacency matrix plus neighbor lists."""

    n_regions: int
    adjacency: np.ndarray  # (N, N) float64 of 0/1, symmetric, zero diagonal
    neighbor_lists: tuple[tuple[int, ...], ...]
    region_labels: tuple[str, ...] | None = None
    grid_shape: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        a = self.adjacency
        if a.shape != (self.n_regions, self.n_regions):
            raise ShapeError(f"adjacency shape {a.shape} does not match N={self.n_regions}")
        if not np.array_equal(a, a.T):
            raise ShapeError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ShapeError("adjacency diagonal must be zero")
        a.setflags(write=False)

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum()) // 2


def _finalize(n: int, adjacency: np.ndarray, labels=None, grid_shape=None) -> RegionGraph:
    nbrs = tuple(tuple(int(j) for j in np.flatnonzero(adjacency[i])) for i in range(n))
    return RegionGraph(
        n_regions=n,
        adjacency=adjacency,
        neighbor_lists=nbrs,
        region_labels=tuple(labels) if labels is not None else None,
        grid_shape=grid_shape,
    )


def build_grid_graph(rows: int, cols: int, diagonal: bool = False) -> RegionGraph:
    """Grid partition with row-major region indexing.

    Cells sharing an edge are adjacent; with ``diagonal=True``, cells sharing
    only a corner are adjacent too.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive; got {rows}x{cols}")
    n = rows * cols
    adjacency = np.zeros((n, n), dtype=np.float64)
    steps = [(0, 1), (1, 0)]
    if diagonal:
        steps += [(1, 1), (1, -1)]
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for dr, dc in steps:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    j = rr * cols + cc
                    adjacency[i, j] = adjacency[j, i] = 1.0
    return _finalize(n, adjacency, grid_shape=(rows, cols))


def build_region_graph(
    n: int, edges: Iterable[tuple[int, int]], labels: Sequence[str] | None = None
) -> RegionGraph:
    """Region network from an edge list; symmetrized, duplicates collapsed."""
    if n < 1:
        raise ValueError(f"region count must be positive; got {n}")
    adjacency = np.zeros((n, n), dtype=np.float64)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) out of range for {n} regions")
        if i == j:
            raise ValueError(f"self-edge ({i}, {i}) is not allowed")
        adjacency[i, j] = adjacency[j, i] = 1.0
    if labels is not None and len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} regions")
    return _finalize(n, adjacency, labels=labels)


def neighbors(g: RegionGraph, i: int) -> tuple[int, ...]:
    """Sorted neighbor indices of region ``i`` (never contains ``i``)."""
    if not 0 <= i < g.n_regions:
        raise ValueError(f"region index {i} out of range for N={g.n_regions}")
    return g.neighbor_lists[i]


def dsa_pairs(g: RegionGraph, self_loop: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Ordered (target, neighbor) pairs over the aggregation neighborhoods.

    Pairs are grouped by target region in ascending target order, neighbors
    sorted ascending (the self-loop, when enabled, sits at its sorted spot).
    """
    src, nbr = [], []
    for i in range(g.n_regions):
        hood = set(g.neighbor_lists[i])
        if self_loop:
            hood.add(i)
        for j in sorted(hood):
            src.append(i)
            nbr.append(j)
    return np.asarray(src, dtype=np.intp), np.asarray(nbr, dtype=np.intp)


def load_graph_spec(path) -> RegionGraph:
    """Parse a graph spec file (see module docstring for the format)."""
    lines = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            lines.append((lineno, text))
    if not lines:
        raise DataError(f"{path}: empty graph spec")
    lineno, header = lines[0]
    fields = header.split()
    if fields[0] == "grid":
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 'grid ROWS COLS'")
        try:
            rows, cols = int(fields[1]), int(fields[2])
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: bad grid dimensions {fields[1:]}") from e
        if len(lines) > 1:
            raise DataError(f"{path}:{lines[1][0]}: grid spec takes no edge lines")
        return build_grid_graph(rows, cols)
    if fields[0] == "regions":
        if len(fields) != 2:
            raise DataError(f"{path}:{lineno}: expected 'regions N'")
        try:
            n = int(fields[1])
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: bad region count {fields[1]!r}") from e
        edges = []
        for lineno, text in lines[1:]:
            parts = text.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'i j', got {text!r}")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: non-integer edge {text!r}") from e
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise DataError(f"{path}:{lineno}: invalid edge ({i}, {j}) for N={n}")
            edges.append((i, j))
        return build_region_graph(n, edges)
    raise DataError(f"{path}:{lineno}: unknown header {fields[0]!r} (want 'grid' or 'regions')")


def save_graph_spec(g: RegionGraph, path) -> None:
    """Write a graph spec file that :func:`load_graph_spec` reads back."""
    with open(path, "w", encoding="utf-8") as fh:
        if g.grid_shape is not None:
            fh.write(f"grid {g.grid_shape[0]} {g.grid_shape[1]}\n")
            return
        fh.write(f"regions {g.n_regions}\n")
        for i in range(g.n_regions):
            for j in g.neighbor_lists[i]:
                if j > i:
                    fh.write(f"{i} {j}\n")
