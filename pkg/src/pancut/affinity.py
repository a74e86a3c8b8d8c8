"""Patch affinity graphs and the Normalized-cut objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptyGraphError, PartitionError, SizeError
from .tensor_io import FeatureMap

log = logging.getLogger(__name__)

EPSILON_W = 1e-5
MAX_DENSE_NODES = 16384


@dataclass(frozen=True)
class AffinityGraph:
    """Dense symmetric affinity matrix over active patch nodes.

    ``node_coords[i]`` is the (row, col) patch position of node ``i`` and
    ``node_ids[i]`` its row-major index in the full grid.
    """

    weights: np.ndarray
    node_coords: np.ndarray
    grid_rows: int
    grid_cols: int
    zero_norm: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def node_ids(self) -> np.ndarray:
        return self.node_coords[:, 0] * self.grid_cols + self.node_coords[:, 1]

    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    @classmethod
    def from_weights(cls, weights, node_coords=None, grid_shape=None) -> "AffinityGraph":
        """Wrap an explicit weight matrix; nodes default to one grid row."""
        w = np.array(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weights must be square, got {w.shape}")
        if w.shape[0] == 0:
            raise EmptyGraphError("graph has no nodes")
        if not np.array_equal(w, w.T):
            raise ValueError("weights must be exactly symmetric")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        n = w.shape[0]
        if node_coords is None:
            node_coords = np.stack([np.zeros(n, dtype=np.int64), np.arange(n)], axis=1)
            grid_shape = (1, n)
        coords = np.asarray(node_coords, dtype=np.int64).reshape(n, 2)
        rows, cols = grid_shape if grid_shape is not None else (coords[:, 0].max() + 1, coords[:, 1].max() + 1)
        w.setflags(write=False)
        coords.setflags(write=False)
        return cls(w, coords, int(rows), int(cols))


def _grid_coords(rows: int, cols: int, active: np.ndarray) -> np.ndarray:
    return np.stack(np.divmod(active, cols), axis=1).astype(np.int64)


def _active_ids(features: FeatureMap, active) -> np.ndarray:
    total = features.height * features.width
    if active is None:
        return np.arange(total)
    active = np.asarray(active)
    if active.dtype == bool:
        if active.size != total:
            raise ValueError(f"boolean active mask has {active.size} entries, grid has {total}")
        return np.flatnonzero(active.ravel())
    ids = np.unique(active.astype(np.int64))
    if ids.size and (ids[0] < 0 or ids[-1] >= total):
        raise ValueError("active node index out of range")
    return ids


def cosine_affinity(vectors: np.ndarray, epsilon_w: float = EPSILON_W, mode: str = "clamp"):
    """Cosine-similarity weight matrix with clamped (or shifted) negatives.

    Returns ``(weights, zero_norm)`` where ``zero_norm`` flags rows whose
    feature vector had zero norm; those rows get ``epsilon_w`` everywhere
    off the diagonal.
    """
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    xn = np.divide(x, norms[:, None], out=np.zeros_like(x), where=~zero[:, None])
    sim = xn @ xn.T
    # symmetric to the last bit: keep the upper triangle and mirror it
    upper = np.triu(sim, k=1)
    sim = upper + upper.T
    if mode == "clamp":
        w = np.clip(sim, epsilon_w, 1.0)
    elif mode == "shift":
        w = np.clip((1.0 + sim) / 2.0, epsilon_w, 1.0)
    else:
        raise ValueError(f"unknown affinity mode {mode!r}")
    if zero.any():
        w[zero, :] = epsilon_w
        w[:, zero] = epsilon_w
    np.fill_diagonal(w, 1.0)
    return w, zero


def build_affinity(
    features: FeatureMap,
    active=None,
    epsilon_w: float = EPSILON_W,
    mode: str = "clamp",
) -> AffinityGraph:
    """Affinity graph over the active patches of ``features``.

    ``active`` is None (all patches), a boolean grid mask, or row-major
    node ids. Weights are ``max(cos(K_i, K_j), epsilon_w)`` with a unit
    diagonal.
    """
    ids = _active_ids(features, active)
    if ids.size == 0:
        raise EmptyGraphError("no active nodes to build a graph over")
    if ids.size > MAX_DENSE_NODES:
        raise SizeError(
            f"{ids.size} nodes exceeds the dense limit of {MAX_DENSE_NODES} "
            "(reduce the feature grid resolution)"
        )
    vectors = features.flat()[ids]
    w, zero = cosine_affinity(vectors, epsilon_w, mode)
    if zero.any():
        log.warning("%d zero-norm feature vectors given uniform affinity %g", int(zero.sum()), epsilon_w)
    w.setflags(write=False)
    coords = _grid_coords(features.height, features.width, ids)
    coords.setflags(write=False)
    return AffinityGraph(w, coords, features.height, features.width, zero_norm=zero)


def subgraph(graph: AffinityGraph, keep) -> AffinityGraph:
    """Restrict ``graph`` to the node positions in ``keep`` (local indices or bool mask)."""
    keep = np.asarray(keep)
    if keep.dtype == bool:
        if keep.size != graph.n:
            raise ValueError("boolean keep mask must have one entry per node")
        keep = np.flatnonzero(keep)
    keep = np.unique(keep.astype(np.int64))
    if keep.size == 0:
        raise EmptyGraphError("subgraph would be empty")
    if keep[0] < 0 or keep[-1] >= graph.n:
        raise ValueError("subgraph index out of range")
    w = graph.weights[np.ix_(keep, keep)].copy()
    w.setflags(write=False)
    coords = graph.node_coords[keep].copy()
    coords.setflags(write=False)
    zero = None if graph.zero_norm is None else graph.zero_norm[keep]
    return AffinityGraph(w, coords, graph.grid_rows, graph.grid_cols, zero_norm=zero)


def _as_index_set(side, n: int) -> np.ndarray:
    side = np.asarray(side)
    if side.dtype == bool:
        return np.flatnonzero(side)
    return np.asarray(sorted(set(int(i) for i in side.ravel())), dtype=np.int64)


def cut_value(graph: AffinityGraph, a, b) -> float:
    a = _as_index_set(a, graph.n)
    b = _as_index_set(b, graph.n)
    return float(graph.weights[np.ix_(a, b)].sum())


def assoc(graph: AffinityGraph, a) -> float:
    a = _as_index_set(a, graph.n)
    return float(graph.weights[a].sum())


def ncut_objective(graph: AffinityGraph, a, b) -> float:
    """cut(A,B)/assoc(A,V) + cut(A,B)/assoc(B,V)."""
    a = _as_index_set(a, graph.n)
    b = _as_index_set(b, graph.n)
    if a.size == 0 or b.size == 0:
        raise PartitionError("both sides of a bipartition must be nonempty")
    if np.intersect1d(a, b).size:
        raise PartitionError("bipartition sides overlap")
    if a.size + b.size != graph.n or a.min() < 0 or max(a.max(), b.max()) >= graph.n:
        raise PartitionError("bipartition does not cover every node exactly once")
    # sum in a fixed side order so swapping A and B is bit-identical
    lo, hi = (a, b) if a[0] < b[0] else (b, a)
    cut = cut_value(graph, lo, hi)
    return cut / assoc(graph, a) + cut / assoc(graph, b)
