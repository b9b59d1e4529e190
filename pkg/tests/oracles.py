"""Independent brute-force references used by several test files."""

import functools
import itertools

import numpy as np


def all_warping_paths(n: int, m: int):
    """Every monotone, continuous path from (0, 0) to (n-1, m-1)."""
    def extend(path):
        i, j = path[-1]
        if (i, j) == (n - 1, m - 1):
            yield path
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                yield from extend(path + [(i + di, j + dj)])

    yield from extend([(0, 0)])


def brute_force_dtw(a: np.ndarray, b: np.ndarray, window=None) -> float:
    """Minimum summed squared-Euclidean cost over all admissible paths."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    n, m = len(a), len(b)
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    slope = (m - 1) / (n - 1) if n > 1 else 0.0
    best = np.inf
    for path in all_warping_paths(n, m):
        if window is not None and any(abs(j - i * slope) > window + 1e-9 for i, j in path):
            continue
        best = min(best, sum(cost[i, j] for i, j in path))
    return best


@functools.lru_cache(maxsize=None)
def path_table(n: int, m: int) -> np.ndarray:
    """All warping paths of an ``n x m`` grid as rows of flat cell indices.

    Shorter paths are padded with ``n * m``, an extra cell of zero cost.
    """
    paths = [[i * m + j for i, j in p] for p in all_warping_paths(n, m)]
    width = n + m - 1
    table = np.full((len(paths), width), n * m, dtype=np.int64)
    for row, p in enumerate(paths):
        table[row, :len(p)] = p
    return table


def exhaustive_dtw(a: np.ndarray, b: np.ndarray) -> float:
    """Unconstrained DTW as the minimum over every enumerated path (vectorized)."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    flat = np.append(cost.ravel(), 0.0)
    # sequential accumulation along each path, the order a DP recursion adds costs in
    return float(np.cumsum(flat[path_table(len(a), len(b))], axis=1)[:, -1].min())


def brute_force_soft_dtw(a, b, gamma: float) -> float:
    """``-gamma log sum_paths exp(-cost / gamma)`` over all paths."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    totals = np.array([sum(cost[i, j] for i, j in p)
                       for p in all_warping_paths(len(a), len(b))])
    lo = totals.min()
    return float(lo - gamma * np.log(np.sum(np.exp(-(totals - lo) / gamma))))


def brute_force_eer(genuine, forgery, grid_points: int = 10_000) -> float:
    """EER from a dense uniform threshold grid, interpolating the crossing.

    Scores must lie on a grid much coarser than the threshold grid so every
    distinct operating point is visited.
    """
    genuine, forgery = np.asarray(genuine), np.asarray(forgery)
    lo = min(genuine.min(), forgery.min()) - 1e-3
    hi = max(genuine.max(), forgery.max()) + 1e-3
    ts = np.linspace(lo, hi, grid_points)
    far = np.array([(forgery <= t).mean() for t in ts])
    frr = np.array([(genuine > t).mean() for t in ts])
    # collapse to distinct operating points in sweep order
    pts = [(far[0], frr[0])]
    for f, r in zip(far[1:], frr[1:]):
        if (f, r) != pts[-1]:
            pts.append((f, r))
    for (f0, r0), (f1, r1) in itertools.pairwise(pts):
        d0, d1 = f0 - r0, f1 - r1
        if d0 == 0:
            return float(f0)
        if d0 < 0 <= d1:
            if d1 == 0:
                return float(f1)
            alpha = -d0 / (d1 - d0)
            return float(f0 + alpha * (f1 - f0))
    f, r = pts[-1]
    return float(0.5 * (f + r))
