"""Smolyak piecewise-linear sparse-grid interpolation on ``[-1, 1]^r``.

The one-dimensional rule is nested: level 1 is the single node 0, level
``i >= 2`` has ``2**(i-1) + 1`` nodes including both endpoints.  Nodes are
placed equidistantly or at Clenshaw-Curtis (Chebyshev extrema) positions.

The interpolant is stored in hierarchical form: every grid node carries a
surplus (per output channel) and a hat function supported between its two
neighbours on the node's own level.  With ``|i| = i_1 + ... + i_r`` the
sparse grid collects the hierarchical increments of all multi-indices with
``|i| <= q``, which reproduces the Smolyak combination formula for nested
rules.
"""
from __future__ import annotations

import hashlib
import io
import itertools
import json
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from .model import ContractError, DomainError

PLACEMENTS = ("equidistant", "clenshaw_curtis")


class TrainingError(RuntimeError):
    """The interpolated function returned non-finite values."""

    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = nodes


def level_size(level: int) -> int:
    """Number of nodes ``m_i`` of the 1-D rule at ``level``."""
    if level < 1:
        raise ContractError("level must be >= 1")
    return 1 if level == 1 else 2 ** (level - 1) + 1


def nodes_1d(level: int, placement: str = "equidistant") -> np.ndarray:
    """Sorted nodes of the 1-D rule at ``level``."""
    m = level_size(level)
    if m == 1:
        return np.zeros(1)
    j = np.arange(m)
    if placement == "equidistant":
        x = -1.0 + 2.0 * j / (m - 1)
    elif placement == "clenshaw_curtis":
        x = -np.cos(np.pi * j / (m - 1))
        x[(m - 1) // 2] = 0.0  # -cos(pi/2) is 6e-17, not 0
    else:
        raise ValueError(f"unknown placement {placement!r}")
    return x


def _increment_1d(level: int, placement: str):
    """Nodes new at ``level`` with their left/right hat widths."""
    x = nodes_1d(level, placement)
    if level == 1:
        return x, np.array([np.inf]), np.array([np.inf])
    if level == 2:
        idx = np.array([0, 2])
    else:
        idx = np.arange(1, x.size, 2)
    left = np.full(idx.size, np.inf)
    right = np.full(idx.size, np.inf)
    has_l = idx > 0
    has_r = idx < x.size - 1
    left[has_l] = x[idx[has_l]] - x[idx[has_l] - 1]
    right[has_r] = x[idx[has_r] + 1] - x[idx[has_r]]
    return x[idx], left, right


def interp_1d(nodes, values, x):
    """Piecewise-linear interpolation through ``(nodes, values)`` on [-1, 1]."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(np.abs(x_arr) > 1.0):
        raise DomainError("x outside [-1, 1]")
    nodes = np.asarray(nodes, dtype=float)
    values = np.asarray(values, dtype=float)
    if nodes.size == 1:
        out = np.full(x_arr.shape, values[0])
    else:
        out = np.interp(x_arr, nodes, values)
    return float(out) if out.ndim == 0 else out


def multi_indices(r: int, q: int) -> list[tuple[int, ...]]:
    """All ``i in N^r`` with ``i_k >= 1`` and ``|i| <= q``, ordered by ``|i|``."""
    out = []
    for s in range(r, q + 1):
        for combo in itertools.product(range(1, s - r + 2), repeat=r):
            if sum(combo) == s:
                out.append(combo)
    return out


def node_count_bound(q: int, r: int) -> int:
    return 2 ** q * comb(q - 1, r - 1)


@dataclass(frozen=True)
class SparseGrid:
    """Node set and hierarchical basis of ``S_{q,r}`` (independent of any data)."""

    r: int
    q: int
    placement: str
    points: np.ndarray       # (N, r) node coordinates
    levels: np.ndarray       # (N, r) per-dimension hierarchical level
    left: np.ndarray         # (N, r) left hat width (inf where unbounded)
    right: np.ndarray        # (N, r) right hat width

    @classmethod
    def create(cls, r: int, q: int, placement: str = "equidistant") -> "SparseGrid":
        if r < 1 or q < r:
            raise ContractError(f"need r >= 1 and q >= r, got r={r}, q={q}")
        if placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {placement!r}")
        inc = {lvl: _increment_1d(lvl, placement) for lvl in range(1, q - r + 2)}
        pts, lev, lw, rw = [], [], [], []
        for mi in multi_indices(r, q):
            parts = [inc[lvl] for lvl in mi]
            grids = np.meshgrid(*[np.arange(p[0].size) for p in parts], indexing="ij")
            flat = [g.ravel() for g in grids]
            pts.append(np.column_stack([parts[k][0][flat[k]] for k in range(r)]))
            lw.append(np.column_stack([parts[k][1][flat[k]] for k in range(r)]))
            rw.append(np.column_stack([parts[k][2][flat[k]] for k in range(r)]))
            lev.append(np.tile(np.array(mi), (flat[0].size, 1)))
        return cls(r, q, placement, np.vstack(pts), np.vstack(lev), np.vstack(lw), np.vstack(rw))

    @property
    def n_nodes(self) -> int:
        return self.points.shape[0]

    def basis(self, x, rows: slice | None = None) -> np.ndarray:
        """Hat-function values, shape ``(n_points, n_nodes)``; ``rows`` restricts the nodes."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.r:
            raise ContractError(f"points must have {self.r} coordinates")
        sl = slice(None) if rows is None else rows
        c, lw, rw = self.points[sl], self.left[sl], self.right[sl]
        out = np.ones((x.shape[0], c.shape[0]))
        for k in range(self.r):
            d = x[:, k, None] - c[None, :, k]
            w = np.where(d < 0, lw[None, :, k], rw[None, :, k])
            out *= np.maximum(1.0 - np.abs(d) / w, 0.0)
        return out

    def level_sum(self) -> np.ndarray:
        return self.levels.sum(axis=1)


def hierarchize(grid: SparseGrid, values, chunk: int = 512) -> np.ndarray:
    """Hierarchical surpluses from nodal values (shape ``(N, width)``)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    sums = grid.level_sum()
    if np.any(np.diff(sums) < 0):
        raise ContractError("grid nodes must be ordered by level sum")
    surplus = np.empty_like(values)
    start = 0
    for s in np.unique(sums):
        stop = start + int(np.count_nonzero(sums == s))
        surplus[start:stop] = values[start:stop]
        if start > 0:
            # only strictly coarser increments can be nonzero at these nodes
            for a in range(start, stop, chunk):
                b = min(stop, a + chunk)
                surplus[a:b] -= grid.basis(grid.points[a:b], slice(0, start)) @ surplus[:start]
        start = stop
    return surplus


@dataclass(frozen=True)
class SparseGridInterpolant:
    """Vector-valued PSLI interpolant: grid, nodal values and surpluses."""

    grid: SparseGrid
    values: np.ndarray     # (N, width) training values
    surplus: np.ndarray    # (N, width)

    def __post_init__(self):
        object.__setattr__(self, "_lookup",
                           {p.tobytes(): i for i, p in enumerate(self.grid.points)})

    @classmethod
    def from_values(cls, grid: SparseGrid, values) -> "SparseGridInterpolant":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != grid.n_nodes:
            raise ContractError("one value row per grid node required")
        bad = ~np.all(np.isfinite(values), axis=1)
        if np.any(bad):
            raise TrainingError(f"non-finite training values at {int(bad.sum())} nodes",
                                nodes=grid.points[bad])
        return cls(grid, values, hierarchize(grid, values))

    @property
    def r(self) -> int:
        return self.grid.r

    @property
    def q(self) -> int:
        return self.grid.q

    @property
    def n_nodes(self) -> int:
        return self.grid.n_nodes

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __call__(self, x) -> np.ndarray:
        return evaluate(self, x)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.grid.points, self.grid.levels, self.surplus, self.values):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(f"{self.r}|{self.q}|{self.grid.placement}".encode())
        return h.hexdigest()

    def save(self, path) -> None:
        meta = {"r": self.r, "q": self.q, "placement": self.grid.placement,
                "n_nodes": self.n_nodes, "width": self.width, "sha256": self.content_hash()}
        buf = io.BytesIO()
        np.savez(buf, meta=np.array(json.dumps(meta)), points=self.grid.points,
                 levels=self.grid.levels, left=self.grid.left, right=self.grid.right,
                 values=self.values, surplus=self.surplus)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "SparseGridInterpolant":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            grid = SparseGrid(meta["r"], meta["q"], meta["placement"], z["points"],
                              z["levels"], z["left"], z["right"])
            obj = cls(grid, z["values"], z["surplus"])
        if obj.content_hash() != meta["sha256"]:
            raise ValueError(f"content hash mismatch in {path}")
        return obj


def build(f, r: int, q: int, placement: str = "equidistant", vectorized: bool = True,
          grid: SparseGrid | None = None) -> SparseGridInterpolant:
    """Interpolate ``f`` (points ``(n, r)`` -> values ``(n, width)``) with ``S_{q,r}``.

    ``f`` is called once on the whole deduplicated node set (or once per node
    if ``vectorized`` is false).
    """
    grid = grid or SparseGrid.create(r, q, placement)
    if vectorized:
        values = np.asarray(f(grid.points), dtype=float)
    else:
        values = np.array([np.atleast_1d(f(p)) for p in grid.points], dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return SparseGridInterpolant.from_values(grid, values)


def evaluate(interp: SparseGridInterpolant, x, chunk: int = 2048) -> np.ndarray:
    """Evaluate at one point (shape ``(r,)``) or a batch ``(n, r)``.

    Training nodes return their stored values exactly.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != interp.r:
        raise ContractError(f"points must have {interp.r} coordinates")
    if np.any(np.abs(x2) > 1.0):
        raise DomainError("evaluation point outside [-1, 1]^r")
    out = np.empty((x2.shape[0], interp.width))
    for a in range(0, x2.shape[0], chunk):
        out[a:a + chunk] = interp.grid.basis(x2[a:a + chunk]) @ interp.surplus
    lookup = interp._lookup
    for i, p in enumerate(x2):
        j = lookup.get((p + 0.0).tobytes())
        if j is not None:
            out[i] = interp.values[j]
    return out[0] if single else out
