"""Point-cloud spatial search and set-to-set distances.

kNN graphs (dimension-generic blocked scan), Chamfer distance, and Earth
Mover's Distance with an exact Hungarian-style solver and an epsilon-scaling
auction approximation.  All functions are pure; solvers are single-threaded
per call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from . import tensor
from .tensor import Tensor

EXACT_ASSIGNMENT_CAP = 512


class SolverError(RuntimeError):
    """Assignment solver failed to converge."""


@dataclass
class Assignment:
    """A bijection between two equal-size point sets and its mean matched cost."""

    perm: np.ndarray  # row i of x is matched to row perm[i] of y
    cost: float


@dataclass
class PairTransform:
    """Invertible joint normalization: shift to the common centroid, scale to unit radius."""

    center: np.ndarray
    scale: float  # multiplier applied after centering
    degenerate: bool = False

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.center) * self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return pts / self.scale + self.center


def _check_cloud(p, name="points") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty N x d array, got shape {p.shape}")
    if not np.isfinite(p).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return p


def knn_indices(points, k: int) -> np.ndarray:
    """Indices of the k nearest rows to each row, self excluded.

    Euclidean distance, ascending, ties broken by lower index.  One
    dimension-generic code path: a blocked exhaustive scan with explicit
    differences, so distances (and hence tie behavior) match the naive
    O(N^2) computation exactly.
    """
    x = np.asarray(points, dtype=np.float64)
    n, d = x.shape
    if k >= n:
        raise ValueError(f"knn_indices: k={k} must be smaller than the point count {n}")
    out = np.empty((n, k), dtype=np.int64)
    block = max(1, int(8e6) // max(1, n * d))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        diff = x[lo:hi, None, :] - x[None, :, :]
        d2 = (diff * diff).sum(axis=-1)
        d2[np.arange(lo, hi) - lo, np.arange(lo, hi)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[lo:hi] = order[:, :k]
    return out


def chamfer(x, y) -> float:
    """Chamfer distance: both directed mean squared nearest-neighbor distances, summed."""
    x = _check_cloud(x, "x")
    y = _check_cloud(y, "y")
    d_xy, _ = cKDTree(y).query(x)
    d_yx, _ = cKDTree(x).query(y)
    return float((d_xy**2).mean() + (d_yx**2).mean())


def _distance_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def emd_exact(x, y, cap: int = EXACT_ASSIGNMENT_CAP) -> Assignment:
    """Optimal bijection minimizing the mean Euclidean matched distance."""
    x = _check_cloud(x, "x")
    y = _check_cloud(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"emd_exact: point counts differ, {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] > cap:
        raise ValueError(f"emd_exact: N={x.shape[0]} exceeds the exact-solver cap {cap}")
    dmat = _distance_matrix(x, y)
    rows, cols = linear_sum_assignment(dmat)
    perm = np.empty(x.shape[0], dtype=np.int64)
    perm[rows] = cols
    return Assignment(perm=perm, cost=float(dmat[rows, cols].mean()))


def _auction_round(benefit: np.ndarray, prices: np.ndarray, eps: float, max_bids: int) -> np.ndarray:
    """One full auction at fixed eps; returns person -> object, updates prices in place."""
    n = benefit.shape[0]
    owner = np.full(n, -1, dtype=np.int64)
    assigned = np.full(n, -1, dtype=np.int64)
    queue = list(range(n))
    bids = 0
    while queue:
        i = queue.pop()
        bids += 1
        if bids > max_bids:
            raise SolverError(f"auction did not converge (eps={eps:g}, {bids} bids)")
        values = benefit[i] - prices
        if n == 1:
            j, gap = 0, 0.0
        else:
            top2 = np.argpartition(-values, 1)[:2]
            if values[top2[0]] < values[top2[1]]:
                top2 = top2[::-1]
            j = int(top2[0])
            gap = float(values[top2[0]] - values[top2[1]])
        prices[j] += gap + eps
        prev = owner[j]
        owner[j] = i
        assigned[i] = j
        if prev >= 0:
            assigned[prev] = -1
            queue.append(prev)
    return assigned


def emd_approx(x, y, tol: float = 0.01, scaling: float = 5.0, max_bids: int = 20_000_000) -> Assignment:
    """Epsilon-scaling auction assignment, within (1 + tol) of the exact cost.

    The final epsilon is sized from a lower bound on the optimal total cost
    (sum of row minima), so the standard n*eps suboptimality bound implies
    the relative tolerance.
    """
    x = _check_cloud(x, "x")
    y = _check_cloud(y, "y")
    n = x.shape[0]
    if n != y.shape[0]:
        raise ValueError(f"emd_approx: point counts differ, {n} vs {y.shape[0]}")
    dmat = _distance_matrix(x, y)
    benefit = -dmat
    lower_bound = dmat.min(axis=1).sum()
    span = float(dmat.max() - dmat.min())
    eps_final = max(tol * lower_bound / n, 1e-12 * max(span, 1.0), 1e-300)
    eps = max(span / 2.0, eps_final)
    prices = np.zeros(n)
    while True:
        assigned = _auction_round(benefit, prices, eps, max_bids)
        if eps <= eps_final:
            break
        eps = max(eps / scaling, eps_final)
    cost = float(dmat[np.arange(n), assigned].mean())
    return Assignment(perm=assigned, cost=cost)


def emd(x, y, cap: int = EXACT_ASSIGNMENT_CAP, tol: float = 0.01) -> Assignment:
    """EMD with the exact solver up to `cap` points, the auction above it."""
    x = np.asarray(x)
    if x.shape[0] <= cap:
        return emd_exact(x, y, cap=cap)
    return emd_approx(x, y, tol=tol)


def emd_loss(pred: Tensor, target, cap: int = EXACT_ASSIGNMENT_CAP) -> Tensor:
    """Differentiable mean matched distance with the assignment held fixed.

    The bijection is solved on the current values; the gradient of each
    predicted point is the unit vector away from its matched target scaled
    by 1/N (zero when coincident).
    """
    target = _check_cloud(target, "target")
    if pred.data.shape != target.shape:
        raise ValueError(f"emd_loss: shapes differ, {pred.data.shape} vs {target.shape}")
    assignment = emd(pred.data, target, cap=cap)
    matched = target[assignment.perm].astype(pred.data.dtype)
    diffs = pred.data - matched
    dists = np.sqrt((diffs * diffs).sum(axis=1))
    n = pred.data.shape[0]

    def bwd(g):
        safe = np.where(dists > 0, dists, 1)
        rows = np.where(dists[:, None] > 0, diffs / safe[:, None], 0) / n
        tensor.accumulate_grad(pred, g * rows)

    return tensor.make_op(np.asarray(dists.mean(), dtype=pred.data.dtype), (pred,), bwd)


def normalize_pair(x, y) -> tuple[np.ndarray, np.ndarray, PairTransform]:
    """Jointly shift both clouds to their common centroid and scale to unit max radius."""
    x = _check_cloud(x, "x")
    y = _check_cloud(y, "y")
    stacked = np.vstack([x, y])
    center = stacked.mean(axis=0)
    radius = float(np.linalg.norm(stacked - center, axis=1).max())
    if radius <= 0:
        transform = PairTransform(center=center, scale=1.0, degenerate=True)
    else:
        transform = PairTransform(center=center, scale=1.0 / radius)
    return transform.apply(x), transform.apply(y), transform
