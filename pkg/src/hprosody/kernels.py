"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names (``dtw_accumulate``, ``dtw_backtrack``, ``crossing_events``)
are bound to the numba versions unless numba is unavailable or disabled via
``HPROSODY_NUMBA=0``. Both variants are importable under ``*_numba`` and
``*_numpy`` so tests and benchmarks can compare them directly.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# DTW accumulated cost
# ---------------------------------------------------------------------------
# The accumulated-cost table is padded with one row/column of +inf so that
# acc[i + 1, j + 1] holds the best cost of reaching cell (i, j).


@njit(cache=True)
def _dtw_accumulate_jit(cost):
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[1, 1] = cost[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = acc[i, j]
            if acc[i, j + 1] < best:
                best = acc[i, j + 1]
            if acc[i + 1, j] < best:
                best = acc[i + 1, j]
            acc[i + 1, j + 1] = cost[i, j] + best
    return acc


def dtw_accumulate_numba(cost):
    return _dtw_accumulate_jit(np.ascontiguousarray(cost, dtype=np.float64))


def dtw_accumulate_numpy(cost):
    """Anti-diagonal wavefront; cells on one diagonal are independent."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[1, 1] = cost[0, 0]
    for k in range(1, n + m - 1):
        i = np.arange(max(0, k - m + 1), min(n - 1, k) + 1)
        j = k - i
        best = np.minimum(np.minimum(acc[i, j], acc[i, j + 1]), acc[i + 1, j])
        acc[i + 1, j + 1] = cost[i, j] + best
    return acc


@njit(cache=True)
def _dtw_backtrack_jit(acc):
    n = acc.shape[0] - 1
    m = acc.shape[1] - 1
    path = np.empty((n + m - 1, 2), dtype=np.int64)
    i = n - 1
    j = m - 1
    k = 0
    path[k, 0] = i
    path[k, 1] = j
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag = acc[i, j]
            up = acc[i, j + 1]
            left = acc[i + 1, j]
            if diag <= up and diag <= left:
                i -= 1
                j -= 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        k += 1
        path[k, 0] = i
        path[k, 1] = j
    return path[: k + 1][::-1].copy()


def dtw_backtrack_numba(acc):
    return _dtw_backtrack_jit(np.ascontiguousarray(acc, dtype=np.float64))


def dtw_backtrack_numpy(acc):
    n = acc.shape[0] - 1
    m = acc.shape[1] - 1
    i, j = n - 1, m - 1
    path = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = acc[i, j], acc[i, j + 1], acc[i + 1, j]
            # tie order: diagonal, then (1, 0), then (0, 1)
            if diag <= up and diag <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    return np.array(path[::-1], dtype=np.int64)


# ---------------------------------------------------------------------------
# Zero-crossing events for the DIO-style F0 estimator
# ---------------------------------------------------------------------------


@njit(cache=True)
def _crossing_events_jit(x, rising):
    n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    k = 0
    for t in range(n - 1):
        a = x[t]
        b = x[t + 1]
        if rising:
            hit = a < 0.0 and b >= 0.0
        else:
            hit = a > 0.0 and b <= 0.0
        if hit:
            out[k] = t + a / (a - b)
            k += 1
    return out[:k].copy()


def crossing_events_numba(x, rising):
    return _crossing_events_jit(np.ascontiguousarray(x, dtype=np.float64), bool(rising))


def crossing_events_numpy(x, rising):
    """Sub-sample positions of zero crossings (linear interpolation).

    ``rising=True`` collects negative-to-positive crossings, otherwise
    positive-to-negative ones.
    """
    x = np.asarray(x, dtype=np.float64)
    a, b = x[:-1], x[1:]
    if rising:
        hit = (a < 0.0) & (b >= 0.0)
    else:
        hit = (a > 0.0) & (b <= 0.0)
    t = np.flatnonzero(hit)
    return t + a[t] / (a[t] - b[t])


if USE_NUMBA:
    dtw_accumulate = dtw_accumulate_numba
    dtw_backtrack = dtw_backtrack_numba
    crossing_events = crossing_events_numba
else:
    dtw_accumulate = dtw_accumulate_numpy
    dtw_backtrack = dtw_backtrack_numpy
    crossing_events = crossing_events_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
