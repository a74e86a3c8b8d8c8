"""Iterated Normalized cut over the patch graph ("panoptic cut").

Each round builds the affinity graph on the nodes not yet claimed, splits it
at the mean of the Fiedler vector, keeps the foreground side as a new object
and recurses on what is left. Whatever is never claimed is background.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .affinity import EPSILON_W, build_affinity
from .errors import ConvergenceError, DegenerateCutError, EmptyGraphError
from .spectral import SolverConfig, fiedler_pair
from .tensor_io import FeatureMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CutConfig:
    max_iters: int = 16
    min_nodes: int = 5
    epsilon_w: float = EPSILON_W
    affinity_mode: str = "clamp"
    # subgraphs whose off-diagonal weights all agree within this are structureless
    uniform_tol: float = 1e-6
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.min_nodes < 2:
            raise ValueError("min_nodes must be >= 2")
        if self.epsilon_w < 0:
            raise ValueError("epsilon_w must be >= 0")


@dataclass
class ObjectMask:
    id: int
    patch_mask: np.ndarray
    discovery_order: int
    pixel_mask: np.ndarray | None = None

    def __post_init__(self):
        if not self.patch_mask.any():
            raise ValueError("an object mask must cover at least one patch")

    def with_pixels(self, pixel_mask: np.ndarray) -> "ObjectMask":
        return replace(self, pixel_mask=pixel_mask)


@dataclass
class CutResult:
    objects: list
    background: np.ndarray
    iterations: int
    halt_reason: str

    def label_grid(self) -> np.ndarray:
        """Patch grid with 0 for background and ``obj.id`` elsewhere."""
        grid = np.zeros(self.background.shape, dtype=np.int64)
        for obj in self.objects:
            grid[obj.patch_mask] = obj.id
        return grid


def bipartition(z, nodes=None):
    """Split at the mean: A = {n : z_n > mean(z)}, B = the rest.

    Returns ``(A, B)`` as arrays drawn from ``nodes`` (default ``range(len(z))``).
    """
    z = np.asarray(z, dtype=np.float64)
    if nodes is None:
        nodes = np.arange(z.size)
    nodes = np.asarray(nodes)
    if z.size < 2 or nodes.size != z.size:
        raise ValueError("bipartition needs len(z) == len(nodes) >= 2")
    above = z > z.mean()
    if above.all() or not above.any():
        raise DegenerateCutError("eigenvector is constant; no split")
    return nodes[above], nodes[~above]


def corner_nodes(coords: np.ndarray) -> np.ndarray:
    """Local indices of the active nodes standing in for the four grid corners.

    Corners are taken on the bounding box of the active coordinates; when a
    box corner is not itself active, the closest active node stands in for
    it (ties to the lowest index). Duplicates collapse.
    """
    coords = np.asarray(coords)
    r0, c0 = coords.min(axis=0)
    r1, c1 = coords.max(axis=0)
    found = []
    for r, c in ((r0, c0), (r0, c1), (r1, c0), (r1, c1)):
        dist = (coords[:, 0] - r) ** 2 + (coords[:, 1] - c) ** 2
        found.append(int(np.argmin(dist)))
    return np.unique(found)


def select_foreground(a, b, z, node_coords, max_corners: int = 1):
    """Pick the foreground side of a bipartition.

    ``a`` and ``b`` hold local node indices into ``z`` and ``node_coords``.
    The candidate is the side holding the largest ``|z|``; it is kept when it
    covers at most ``max_corners`` corner nodes, otherwise the other side is.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    z = np.asarray(z)
    peak = int(np.argmax(np.abs(z)))
    candidate, other = (a, b) if peak in set(a.tolist()) else (b, a)
    corners = corner_nodes(np.asarray(node_coords))
    covered = np.isin(corners, candidate).sum()
    return candidate if covered <= max_corners else other


def _is_uniform(weights: np.ndarray, tol: float) -> bool:
    n = weights.shape[0]
    off = weights[~np.eye(n, dtype=bool)]
    return off.size == 0 or float(off.max() - off.min()) <= tol


def panoptic_cut(features: FeatureMap, cfg: CutConfig = CutConfig()) -> CutResult:
    """Discover disjoint object masks on the patch grid of ``features``."""
    rows, cols = features.height, features.width
    total = rows * cols
    if total == 0:
        raise EmptyGraphError("feature map has no patches")
    remaining = np.arange(total)
    objects = []
    halt = "max_iters"
    iteration = 0
    while iteration < cfg.max_iters:
        if remaining.size < cfg.min_nodes:
            halt = "min_nodes"
            break
        graph = build_affinity(features, remaining, cfg.epsilon_w, cfg.affinity_mode)
        if _is_uniform(graph.weights, cfg.uniform_tol):
            halt = "degenerate"
            break
        try:
            pair = fiedler_pair(graph, cfg.solver)
            a, b = bipartition(pair.vector)
        except DegenerateCutError:
            halt = "degenerate"
            break
        except ConvergenceError as exc:
            log.warning("stopping discovery: %s", exc)
            halt = "no_convergence"
            break
        fg = select_foreground(a, b, pair.vector, graph.node_coords)
        fg_ids = remaining[np.sort(fg)]
        mask = np.zeros(total, dtype=bool)
        mask[fg_ids] = True
        iteration += 1
        objects.append(ObjectMask(id=iteration, patch_mask=mask.reshape(rows, cols), discovery_order=iteration))
        remaining = np.setdiff1d(remaining, fg_ids, assume_unique=True)
    background = np.zeros(total, dtype=bool)
    background[remaining] = True
    log.info("panoptic cut: %d objects, halted on %s", len(objects), halt)
    return CutResult(objects, background.reshape(rows, cols), iteration, halt)
