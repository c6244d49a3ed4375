"""Shared oracles and helpers: finite differences, brute-force spatial scans,
and exhaustive assignment enumeration."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from dpci import tensor


def numeric_gradient(value_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function that reads x in place."""
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(x.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value_fn()
        flat[i] = orig - h
        down = value_fn()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


def check_grad(build_loss, x_data: np.ndarray, h: float = 1e-5, tol: float = 1e-4) -> float:
    """FD-verify d(loss)/dx for a tensor-valued loss builder: build_loss(Tensor) -> scalar Tensor."""
    x = tensor.Tensor(x_data.astype(np.float64), requires_grad=True)
    loss = build_loss(x)
    tensor.backward(loss)
    analytic = x.grad.copy()

    def value():
        with tensor.no_grad():
            return float(build_loss(x).data)

    numeric = numeric_gradient(value, x.data, h=h)
    err = max_rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: max rel error {err:.3e}"
    return err


# ---------------------------------------------------------------------------
# Brute-force oracles (independent of the library code paths they check)
# ---------------------------------------------------------------------------

def oracle_knn(points: np.ndarray, k: int) -> np.ndarray:
    """O(N^2) per-row scan with explicit stable tie-breaking by lower index."""
    n = points.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        d2 = ((points - points[i]) ** 2).sum(axis=1)
        d2[i] = np.inf
        order = sorted(range(n), key=lambda j: (d2[j], j))
        out[i] = order[:k]
    return out


def oracle_chamfer(x: np.ndarray, y: np.ndarray) -> float:
    """Exhaustive double loop, squared distances, each direction averaged by
    its own cloud size."""
    fwd = sum(min(((xi - yj) ** 2).sum() for yj in y) for xi in x) / len(x)
    back = sum(min(((xi - yj) ** 2).sum() for xi in x) for yj in y) / len(y)
    return fwd + back


_PERM_CACHE: dict[int, np.ndarray] = {}


def oracle_emd(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Minimum mean matched distance over all N! bijections."""
    n = x.shape[0]
    if n not in _PERM_CACHE:
        _PERM_CACHE[n] = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    perms = _PERM_CACHE[n]
    dmat = np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1))
    costs = dmat[np.arange(n), perms].sum(axis=1)
    best = int(np.argmin(costs))
    return float(costs[best] / n), perms[best]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
