"""Classical warping: DTW with path extraction, band-constrained DTW, soft-DTW.

Indices are 0-based throughout. The DP tables are filled one anti-diagonal
at a time so each step is a vectorized numpy operation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import as_array

METRICS = ("sqeuclid", "euclid")


@dataclass(frozen=True)
class WarpPath:
    """Monotone, continuous alignment from (0, 0) to (I-1, J-1)."""

    steps: tuple[tuple[int, int], ...]
    shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.steps)

    def matrix(self) -> np.ndarray:
        """Binary I x J matrix with a one at every step."""
        m = np.zeros(self.shape)
        rows, cols = zip(*self.steps)
        m[list(rows), list(cols)] = 1.0
        return m


def local_cost_matrix(a, b, metric: str = "sqeuclid") -> np.ndarray:
    a, b = as_array(a), as_array(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diff, diff)
    if metric == "sqeuclid":
        return sq
    if metric == "euclid":
        return np.sqrt(sq)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def band_mask(n: int, m: int, window: int | None) -> np.ndarray:
    """Admissible cells of a Sakoe-Chiba band around the scaled diagonal.

    Cell (i, j) is admissible when ``|j - i * (m-1)/(n-1)| <= window``;
    for equal lengths this is the usual ``|i - j| <= window``.
    """
    if window is None:
        return np.ones((n, m), dtype=bool)
    if window < 0:
        raise ValueError(f"window must be non-negative, got {window}")
    slope = (m - 1) / (n - 1) if n > 1 else 0.0
    i = np.arange(n)[:, None]
    j = np.arange(m)[None, :]
    return np.abs(j - i * slope) <= window + 1e-9


def _diagonals(n: int, m: int):
    for k in range(1, n + m - 1):
        i = np.arange(max(0, k - m + 1), min(n, k + 1))
        yield i, k - i


def accumulated_cost(cost: np.ndarray) -> np.ndarray:
    """Cumulative cost table for the symmetric1 step pattern.

    Infinite entries in ``cost`` mark forbidden cells.
    """
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i, j in _diagonals_full(n, m):
        prev = np.minimum(np.minimum(acc[i, j], acc[i, j + 1]), acc[i + 1, j])
        acc[i + 1, j + 1] = cost[i, j] + prev
    return acc


def _diagonals_full(n: int, m: int):
    yield np.array([0]), np.array([0])
    yield from _diagonals(n, m)


def _backtrace(acc: np.ndarray) -> list[tuple[int, int]]:
    i, j = acc.shape[0] - 2, acc.shape[1] - 2
    steps = [(i, j)]
    while i > 0 or j > 0:
        # tie-break: diagonal, then (i-1, j), then (i, j-1)
        options = (acc[i, j], acc[i, j + 1], acc[i + 1, j])
        best = int(np.argmin(options))
        if best == 0:
            i, j = i - 1, j - 1
        elif best == 1:
            i -= 1
        else:
            j -= 1
        steps.append((i, j))
    steps.reverse()
    return steps


def dtw(a, b, window: int | None = None, metric: str = "sqeuclid") -> tuple[float, WarpPath]:
    """DTW distance (sum of local costs on the optimal path) and that path.

    ``window=None`` means no band constraint. Raises ``ValueError`` when the
    band admits no boundary-to-boundary path.
    """
    cost = local_cost_matrix(a, b, metric)
    n, m = cost.shape
    mask = band_mask(n, m, window)
    acc = accumulated_cost(np.where(mask, cost, np.inf))
    total = acc[n, m]
    if not np.isfinite(total):
        raise ValueError(f"window {window} admits no warping path for lengths {n} and {m}")
    return float(total), WarpPath(tuple(_backtrace(acc)), (n, m))


def dtw_distance(a, b, window: int | None = None, metric: str = "sqeuclid") -> float:
    cost = local_cost_matrix(a, b, metric)
    n, m = cost.shape
    acc = accumulated_cost(np.where(band_mask(n, m, window), cost, np.inf))
    if not np.isfinite(acc[n, m]):
        raise ValueError(f"window {window} admits no warping path for lengths {n} and {m}")
    return float(acc[n, m])


def dtw_target_matrix(a, b, window: int | None = None, metric: str = "sqeuclid") -> np.ndarray:
    """Binary I x J matrix of the DTW path, the pre-training target."""
    return dtw(a, b, window, metric)[1].matrix()


def _softmin3(x: np.ndarray, y: np.ndarray, z: np.ndarray, gamma: float) -> np.ndarray:
    stack = np.stack([x, y, z])
    lo = stack.min(axis=0)
    finite = np.isfinite(lo)
    safe_lo = np.where(finite, lo, 0.0)
    with np.errstate(invalid="ignore"):
        s = np.exp(-(stack - safe_lo) / gamma).sum(axis=0)
    return np.where(finite, safe_lo - gamma * np.log(s), np.inf)


def soft_dtw(a, b, gamma: float = 1.0, window: int | None = None,
             metric: str = "sqeuclid") -> float:
    """Soft-DTW value: DTW with ``min`` replaced by a log-sum-exp soft minimum."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    cost = local_cost_matrix(a, b, metric)
    n, m = cost.shape
    cost = np.where(band_mask(n, m, window), cost, np.inf)
    r = np.full((n + 1, m + 1), np.inf)
    r[0, 0] = 0.0
    for i, j in _diagonals_full(n, m):
        r[i + 1, j + 1] = cost[i, j] + _softmin3(r[i, j], r[i, j + 1], r[i + 1, j], gamma)
    if not np.isfinite(r[n, m]):
        raise ValueError(f"window {window} admits no warping path for lengths {n} and {m}")
    return float(r[n, m])


def pairwise(fn, queries, references, **kwargs) -> np.ndarray:
    """Distance matrix ``fn(q, r)`` for every query/reference pair."""
    out = np.empty((len(queries), len(references)))
    for qi, q in enumerate(queries):
        for ri, r in enumerate(references):
            out[qi, ri] = fn(q, r, **kwargs)
    return out
