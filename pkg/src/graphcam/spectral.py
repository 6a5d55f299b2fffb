"""Graph Laplacians, Chebyshev filtering and partial-correlation networks.

Everything here is dense numpy; graphs in this domain have at most a few
hundred nodes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

LAMBDA_TOL = 1e-7
LAMBDA_MAX_ITERS = 1000


@dataclass
class Graph:
    """Symmetric, non-negative weighted adjacency with zero diagonal."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError(f"adjacency must be square, got shape {w.shape}")
        if w.shape[0] < 2:
            raise ValidationError("a graph needs at least 2 nodes")
        if not np.all(np.isfinite(w)):
            raise ValidationError("adjacency contains non-finite weights")
        if not np.array_equal(w, w.T):
            raise ValidationError("adjacency is not symmetric")
        if np.any(w < 0):
            raise ValidationError("adjacency has negative weights")
        if np.any(np.diag(w) != 0):
            raise ValidationError("adjacency diagonal must be zero")
        self.weights = w

    @property
    def num_nodes(self) -> int:
        return self.weights.shape[0]

    def permuted(self, perm) -> "Graph":
        perm = np.asarray(perm)
        return Graph(self.weights[np.ix_(perm, perm)])


@dataclass
class ScaledLaplacian:
    matrix: np.ndarray
    lambda_max: float
    converged: bool = True

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_graph(cls, graph: Graph, tol=LAMBDA_TOL, max_iters=LAMBDA_MAX_ITERS):
        lap = normalized_laplacian(graph)
        lam, converged = estimate_lambda_max(lap, tol=tol, max_iters=max_iters)
        return scale_laplacian(lap, lam, converged=converged)


def normalized_laplacian(graph: Graph) -> np.ndarray:
    """``I - D^-1/2 W D^-1/2``; isolated nodes get a unit diagonal entry."""
    w = graph.weights
    if not np.all(np.isfinite(w)):
        raise ValidationError("adjacency contains non-finite weights")
    deg = w.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(w.shape[0]) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    # exact symmetry regardless of rounding in the scaling above
    return 0.5 * (lap + lap.T)


def _start_vector(lap: np.ndarray) -> np.ndarray:
    # Built from row magnitudes so that relabelling the nodes permutes the
    # iterates instead of changing them.
    r = np.abs(lap).sum(axis=1)
    v = r + r * r
    return v / np.linalg.norm(v)


def _fallback_vector(n: int) -> np.ndarray:
    v = np.cos(np.arange(1, n + 1) * 1.3) + 0.1
    return v / np.linalg.norm(v)


def estimate_lambda_max(lap, tol=LAMBDA_TOL, max_iters=LAMBDA_MAX_ITERS):
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Returns ``(lambda_max, converged)``. Without convergence the
    normalized-Laplacian bound ``(2.0, False)`` is returned.
    """
    lap = np.asarray(lap, dtype=np.float64)
    if tol <= 0:
        raise ValidationError("tol must be positive")
    n = lap.shape[0]
    v = _start_vector(lap)
    w = lap @ v
    if np.linalg.norm(w) <= 1e-12:
        # start vector sits in the null space (e.g. regular graphs)
        v = _fallback_vector(n)
        w = lap @ v
    rayleigh = float(v @ w)
    for _ in range(max_iters):
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, True
        v = w / norm
        w = lap @ v
        new = float(v @ w)
        if abs(new - rayleigh) < tol:
            return new, True
        rayleigh = new
    return 2.0, False


def scale_laplacian(lap, lambda_max, converged=True) -> ScaledLaplacian:
    """Map the spectrum into [-1, 1]: ``(2 / lambda_max) L - I``."""
    if not lambda_max > 0:
        raise ValidationError(f"lambda_max must be positive, got {lambda_max}")
    lap = np.asarray(lap, dtype=np.float64)
    mat = (2.0 / lambda_max) * lap - np.eye(lap.shape[0])
    return ScaledLaplacian(0.5 * (mat + mat.T), float(lambda_max), bool(converged))


def _as_matrix(ltilde):
    return ltilde.matrix if isinstance(ltilde, ScaledLaplacian) else np.asarray(ltilde)


def cheb_apply(ltilde, x, num_coeffs: int) -> np.ndarray:
    """Stack ``[T_0(L)x, ..., T_{K-1}(L)x]`` along a new leading axis.

    ``x`` has nodes on its second-to-last axis, so both ``(nodes, F)`` and
    batched ``(batch, nodes, F)`` inputs work.
    """
    mat = _as_matrix(ltilde)
    x = np.asarray(x, dtype=np.float64)
    if num_coeffs < 1:
        raise ValidationError("num_coeffs must be >= 1")
    if x.ndim < 2 or x.shape[-2] != mat.shape[0] or x.shape[-1] < 1:
        raise ValidationError(
            f"signal shape {x.shape} does not match a {mat.shape[0]}-node Laplacian"
        )
    out = np.empty((num_coeffs,) + x.shape)
    out[0] = x
    if num_coeffs > 1:
        out[1] = mat @ x
    for k in range(2, num_coeffs):
        out[k] = 2.0 * (mat @ out[k - 1]) - out[k - 2]
    if not np.all(np.isfinite(out)):
        raise NumericalError("Chebyshev recursion produced non-finite values")
    return out


def cheb_adjoint(ltilde, coeff_signals) -> np.ndarray:
    """``sum_k T_k(L) y_k`` for a stack ``y`` (Clenshaw recurrence).

    Since every ``T_k(L)`` is symmetric this is the adjoint of ``cheb_apply``.
    """
    mat = _as_matrix(ltilde)
    y = np.asarray(coeff_signals, dtype=np.float64)
    num = y.shape[0]
    b1 = np.zeros(y.shape[1:])
    b2 = np.zeros(y.shape[1:])
    for k in range(num - 1, 0, -1):
        b1, b2 = y[k] + 2.0 * (mat @ b1) - b2, b1
    return y[0] + mat @ b1 - b2


def cheb_polynomials(ltilde, num_coeffs: int) -> np.ndarray:
    """Explicit ``T_k(L)`` matrices, shape ``(K, n, n)``."""
    mat = _as_matrix(ltilde)
    return cheb_apply(mat, np.eye(mat.shape[0]), num_coeffs)


def partial_correlation(ts, rho: float = 0.0) -> np.ndarray:
    """L2-regularised partial correlation between the columns of ``ts``.

    ``ts`` is ``T x d`` (observations by variables). The diagonal of the
    result is zero.
    """
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 2:
        raise ValidationError("timeseries must be a 2-D (T x d) matrix")
    if ts.shape[0] < 2:
        raise ValidationError("need at least 2 observations")
    if not np.all(np.isfinite(ts)):
        raise ValidationError("timeseries contains non-finite values")
    if rho < 0:
        raise ValidationError("rho must be non-negative")
    d = ts.shape[1]
    centered = ts - ts.mean(axis=0)
    cov = centered.T @ centered / (ts.shape[0] - 1)
    reg = cov + rho * np.eye(d)
    try:
        if np.linalg.cond(reg) > 1e14:
            raise np.linalg.LinAlgError
        prec = np.linalg.inv(reg)
    except np.linalg.LinAlgError:
        raise NumericalError("regularized covariance (Sigma + rho*I) is singular") from None
    scale = np.sqrt(np.diag(prec))
    pc = -prec / np.outer(scale, scale)
    pc = 0.5 * (pc + pc.T)
    np.fill_diagonal(pc, 0.0)
    return np.clip(pc, -1.0, 1.0)


def build_group_graph(connectomes, knn=None) -> Graph:
    """Mean absolute connectivity across subjects, optionally k-NN sparsified."""
    mats = [np.asarray(m, dtype=np.float64) for m in connectomes]
    if not mats:
        raise ValidationError("need at least one connectome")
    d = mats[0].shape[0]
    for m in mats:
        if m.shape != (d, d):
            raise ValidationError(f"connectome shape {m.shape} differs from ({d}, {d})")
    w = np.mean(np.abs(np.stack(mats)), axis=0)
    w = 0.5 * (w + w.T)
    np.fill_diagonal(w, 0.0)
    if knn is not None:
        if knn < 1 or knn >= d:
            raise ValidationError(f"knn must be in [1, {d - 1}], got {knn}")
        keep = np.zeros_like(w, dtype=bool)
        for i in range(d):
            scores = w[i].copy()
            scores[i] = -np.inf
            # stable order: larger weight first, then smaller index
            order = np.lexsort((np.arange(d), -scores))
            keep[i, order[:knn]] = True
        sparse = np.where(keep, w, 0.0)
        w = np.maximum(sparse, sparse.T)
    return Graph(w)
