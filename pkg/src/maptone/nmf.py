"""Graph-regularized sparse NMF for estimating weighting maps.

Minimizes 0.5*||X - WH||_F^2 + 0.5*lam*Tr(H L H^T) + eta*||H||_1/2 by
multiplicative updates, where ||H||_1/2 sums entrywise square roots and L
is a k-NN graph Laplacian over the columns of X.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .tensor import make_rng


class NmfError(ValueError):
    pass


@dataclass
class NmfConfig:
    rank: int = 20
    lam: float = 1.0
    eta: float = 0.1
    k_neighbors: int = 5
    max_iters: int = 200
    epsilon_floor: float = 1e-12
    tol: float = 1e-7
    graph_weights: str = "binary"   # "binary" or "heat"
    heat_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise NmfError(f"rank must be >= 1, got {self.rank}")
        if self.lam < 0 or self.eta < 0:
            raise NmfError("lam and eta must be non-negative")
        if self.epsilon_floor <= 0:
            raise NmfError("epsilon_floor must be positive")


@dataclass
class GraphLaplacian:
    """L = D - A for a symmetric k-NN adjacency over sample columns."""

    adjacency: sp.csr_matrix
    degrees: np.ndarray

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def dense_laplacian(self) -> np.ndarray:
        return np.diag(self.degrees) - self.adjacency.toarray()

    def quadratic(self, h: np.ndarray) -> float:
        """Tr(H L H^T) for H with one column per graph node."""
        hl = h * self.degrees - (self.adjacency @ h.T).T
        return float(np.sum(h * hl))


@dataclass
class NmfFactors:
    w: np.ndarray
    h: np.ndarray
    rank: int
    objective_trace: list = field(default_factory=list)


def check_motion_features(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise NmfError(f"motion features must be 2D, got shape {x.shape}")
    if np.any(x < 0):
        raise NmfError("motion features must be non-negative")
    if np.any(~x.any(axis=0)):
        raise NmfError("motion features contain an all-zero column")
    return x


def build_knn_graph(x: np.ndarray, k: int, weights: str = "binary",
                    heat_sigma: float = 1.0) -> GraphLaplacian:
    """Symmetric (OR) k-NN graph over the columns of x.

    Neighbors by Euclidean distance; ties broken toward the lower column
    index. Binary weights by default, exp(-d^2/sigma^2) with "heat".
    """
    x = np.asarray(x, dtype=np.float64)
    pts = x.T
    n = pts.shape[0]
    if not 0 < k < n:
        raise NmfError(f"k_neighbors must be in [1, {n - 1}], got {k}")

    rows = np.empty((n, k), dtype=np.int64)
    vals = np.empty((n, k), dtype=np.float64)
    chunk = max(1, int(2**22 // max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = cdist(pts[start:stop], pts)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        if n - 1 <= k + 16:
            # stable sort keeps lower indices first among equal distances
            order = np.argsort(d, axis=1, kind="stable")[:, :k]
        else:
            # refine only k+16 candidates; exact unless >16-way distance
            # ties straddle the cut
            cand = np.argpartition(d, k + 15, axis=1)[:, :k + 16]
            cd = np.take_along_axis(d, cand, axis=1)
            order = np.empty((stop - start, k), dtype=np.int64)
            for r in range(stop - start):
                order[r] = [idx for _, idx in sorted(zip(cd[r], cand[r]))[:k]]
        rows[start:stop] = order
        vals[start:stop] = np.take_along_axis(d, order, axis=1)

    src = np.repeat(np.arange(n), k)
    dst = rows.ravel()
    if weights == "binary":
        w = np.ones(n * k)
    elif weights == "heat":
        w = np.exp(-(vals.ravel() ** 2) / (heat_sigma ** 2))
    else:
        raise NmfError(f"unknown graph weight scheme: {weights}")
    a = sp.coo_matrix((w, (src, dst)), shape=(n, n)).tocsr()
    a = a.maximum(a.T)          # symmetrize by OR; self excluded above
    deg = np.asarray(a.sum(axis=1)).ravel()
    return GraphLaplacian(adjacency=a, degrees=deg)


def nmf_objective(x: np.ndarray, w: np.ndarray, h: np.ndarray,
                  graph: GraphLaplacian | None, lam: float, eta: float) -> float:
    if np.any(w < 0) or np.any(h < 0):
        raise NmfError("objective requires non-negative factors")
    resid = x - w @ h
    value = 0.5 * float(np.sum(resid * resid))
    if lam and graph is not None:
        value += 0.5 * lam * graph.quadratic(h)
    if eta:
        value += eta * float(np.sum(np.sqrt(h)))
    return value


def nmf_factorize(x: np.ndarray, config: NmfConfig,
                  graph: GraphLaplacian | None = None) -> NmfFactors:
    """Multiplicative-update factorization with manifold + L1/2 terms.

    The H update uses the graph-regularized numerator/denominator split
    (lam*H A up, lam*H D down) plus the (eta/2)*H^(-1/2) subgradient term
    in the denominator; entries floored at epsilon_floor each iteration.
    """
    x = check_motion_features(x)
    f, s = x.shape
    r = config.rank
    eps = config.epsilon_floor
    if graph is None and config.lam > 0:
        graph = build_knn_graph(x, min(config.k_neighbors, s - 1),
                                weights=config.graph_weights,
                                heat_sigma=config.heat_sigma)

    rng = make_rng(config.seed)
    scale = np.sqrt(max(x.mean(), eps) / r)
    w = np.abs(rng.standard_normal((f, r))) * scale + eps
    h = np.abs(rng.standard_normal((r, s))) * scale + eps

    use_graph = config.lam > 0 and graph is not None
    if use_graph:
        adj = graph.adjacency
        deg = graph.degrees

    trace: list[float] = []
    prev = None
    for it in range(config.max_iters):
        w *= (x @ h.T) / (w @ (h @ h.T) + eps)
        np.maximum(w, eps, out=w)

        num = w.T @ x
        den = (w.T @ w) @ h
        if use_graph:
            num = num + config.lam * (adj @ h.T).T
            den = den + config.lam * (h * deg)
        if config.eta > 0:
            den = den + (config.eta / 2.0) / np.sqrt(h)
        h *= num / (den + eps)
        np.maximum(h, eps, out=h)

        obj = nmf_objective(x, w, h, graph if use_graph else None,
                            config.lam, config.eta)
        if not np.isfinite(obj):
            raise NmfError(f"objective diverged (NaN/Inf) at iteration {it}")
        trace.append(obj)
        if prev is not None and abs(prev - obj) <= config.tol * max(abs(prev), 1e-300):
            break
        prev = obj

    # resolve scale ambiguity: unit-max rows of H, W rescaled inversely
    row_max = h.max(axis=1)
    h /= row_max[:, None]
    w *= row_max[None, :]
    return NmfFactors(w=w, h=h, rank=r, objective_trace=trace)
