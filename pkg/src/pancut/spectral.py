"""Fiedler pair of the generalized system (D - W) z = lambda D z.

Both solvers work on the symmetric reduction

    L_sym = I - D^{-1/2} W D^{-1/2},    L_sym y = lambda y,    z = D^{-1/2} y

whose null vector is known in closed form, ``y0 = sqrt(d) / ||sqrt(d)||``.
The iterative path is a block LOBPCG with ``y0`` projected out of every
search direction, so the smallest Ritz pair it finds is the Fiedler pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .affinity import AffinityGraph
from .errors import ConvergenceError, EmptyGraphError, SizeError

log = logging.getLogger(__name__)

DENSE_LIMIT = 2048


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-7
    max_iter: int = 2000
    block_size: int = 4
    seed: int = 0
    dense_below: int = 256


@dataclass(frozen=True)
class EigenPair:
    value: float
    vector: np.ndarray
    residual: float


def _reduction(graph: AffinityGraph):
    d = graph.degrees()
    if np.any(d <= 0):
        raise ValueError("every node needs a positive degree")
    s = 1.0 / np.sqrt(d)
    lap = np.eye(graph.n) - s[:, None] * graph.weights * s[None, :]
    lap = (lap + lap.T) / 2.0
    y0 = np.sqrt(d)
    y0 /= np.linalg.norm(y0)
    return d, s, lap, y0


def generalized_residual(graph: AffinityGraph, value: float, z: np.ndarray) -> float:
    """||(D - W) z - lambda D z|| / ||D z||."""
    d = graph.degrees()
    lz = d * z - graph.weights @ z
    dz = d * z
    return float(np.linalg.norm(lz - value * dz) / np.linalg.norm(dz))


def _finish(graph: AffinityGraph, value: float, y: np.ndarray, s: np.ndarray) -> EigenPair:
    z = s * y
    z = z / np.sqrt(np.sum(graph.degrees() * z * z))
    k = int(np.argmax(np.abs(z)))
    if z[k] < 0:
        z = -z
    z.setflags(write=False)
    value = max(float(value), 0.0)
    return EigenPair(value, z, generalized_residual(graph, value, z))


def _deflated_basis(y0: np.ndarray) -> np.ndarray:
    # orthonormal complement of y0 via a full QR of the single column
    q, _ = scipy.linalg.qr(y0[:, None], mode="full")
    return q[:, 1:]


def dense_spectrum(graph: AffinityGraph) -> list[EigenPair]:
    """Full spectrum, ascending; pair 0 is the exact constant-vector null pair."""
    n = graph.n
    if n < 1:
        raise EmptyGraphError("graph has no nodes")
    if n > DENSE_LIMIT:
        raise SizeError(f"dense spectrum limited to {DENSE_LIMIT} nodes, got {n}")
    d, s, lap, y0 = _reduction(graph)
    pairs = [_finish(graph, float(y0 @ lap @ y0), y0, s)]
    if n == 1:
        return pairs
    q = _deflated_basis(y0)
    vals, vecs = scipy.linalg.eigh(q.T @ lap @ q)
    ys = q @ vecs
    pairs.extend(_finish(graph, vals[i], ys[:, i], s) for i in range(n - 1))
    return pairs


def _dense_fiedler(graph: AffinityGraph) -> EigenPair:
    d, s, lap, y0 = _reduction(graph)
    q = _deflated_basis(y0)
    vals, vecs = scipy.linalg.eigh(q.T @ lap @ q, subset_by_index=[0, 0])
    return _finish(graph, vals[0], q @ vecs[:, 0], s)


def _svqb(v: np.ndarray, drop: float = 1e-12) -> np.ndarray:
    """Orthonormalize the columns of ``v``, dropping numerically dependent ones."""
    for _ in range(2):
        norms = np.linalg.norm(v, axis=0)
        keep = norms > 0
        v = v[:, keep] / norms[keep]
        g = v.T @ v
        g = (g + g.T) / 2.0
        w, u = np.linalg.eigh(g)
        good = w > drop * max(w.max(), 1.0)
        v = v @ (u[:, good] / np.sqrt(w[good]))
    return v


def _project_out(v: np.ndarray, y0: np.ndarray) -> np.ndarray:
    return v - np.outer(y0, y0 @ v)


def lobpcg_fiedler(graph: AffinityGraph, cfg: SolverConfig = SolverConfig()) -> EigenPair:
    """Block LOBPCG (Jacobi-preconditioned) for the smallest non-null pair."""
    n = graph.n
    d, s, lap, y0 = _reduction(graph)
    sqrt_d = np.sqrt(d)
    k = max(1, min(cfg.block_size, (n - 1) // 3 if n > 4 else 1))
    precond = 1.0 / np.maximum(np.diag(lap), 1e-12)

    rng = np.random.default_rng(cfg.seed)
    x = _svqb(_project_out(rng.standard_normal((n, k)), y0))
    if x.shape[1] == 0:
        raise ConvergenceError("could not build a start block", float("inf"))
    lx = lap @ x
    theta, c = np.linalg.eigh(x.T @ lx)
    x, lx = x @ c, lx @ c
    p = None
    best = np.inf
    for it in range(cfg.max_iter):
        r = lx - x * theta
        # convergence is judged on the generalized residual of the leading pair
        res0 = np.linalg.norm(sqrt_d * r[:, 0]) / np.linalg.norm(sqrt_d * x[:, 0])
        best = min(best, res0)
        if res0 <= cfg.tol:
            log.debug("lobpcg converged in %d iterations (residual %.3g)", it, res0)
            return _finish(graph, theta[0], x[:, 0], s)
        w = _project_out(precond[:, None] * r, y0)
        blocks = [x, w] if p is None else [x, w, p]
        basis = _svqb(_project_out(np.hstack(blocks), y0))
        lbasis = lap @ basis
        h = basis.T @ lbasis
        h = (h + h.T) / 2.0
        vals, vecs = np.linalg.eigh(h)
        m = min(k, basis.shape[1])
        c = vecs[:, :m]
        x_new = basis @ c
        lx_new = lbasis @ c
        # search direction: the new iterate minus its component along the old one
        p = x_new - x[:, :m] @ (x[:, :m].T @ x_new)
        x, lx, theta = x_new, lx_new, vals[:m]
        k = m
    raise ConvergenceError(
        f"lobpcg did not converge in {cfg.max_iter} iterations (best residual {best:.3g})", best
    )


def fiedler_pair(graph: AffinityGraph, cfg: SolverConfig = SolverConfig(), method: str = "auto") -> EigenPair:
    """Second-smallest eigenpair of (D - W) z = lambda D z.

    ``method`` is ``"dense"``, ``"lobpcg"`` or ``"auto"`` (dense up to
    ``cfg.dense_below`` nodes). The vector has unit D-norm and its largest
    magnitude entry is positive.
    """
    if method not in ("auto", "dense", "lobpcg"):
        raise ValueError(f"unknown method {method!r}")
    if graph.n < 2:
        raise EmptyGraphError(f"a Fiedler pair needs at least 2 nodes, got {graph.n}")
    if method == "auto":
        method = "dense" if graph.n <= cfg.dense_below else "lobpcg"
    # LOBPCG needs room for a block beside the deflated null vector
    if method == "dense" or graph.n < 5:
        return _dense_fiedler(graph)
    pair = lobpcg_fiedler(graph, cfg)
    if pair.residual > cfg.tol:
        raise ConvergenceError(f"residual {pair.residual:.3g} above tolerance {cfg.tol}", pair.residual)
    return pair
