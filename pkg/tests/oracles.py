"""Independent brute-force reference implementations used by the tests."""
from __future__ import annotations

import itertools
from collections import deque

import numpy as np


def exhaustive_ncut(W: np.ndarray) -> tuple[float, np.ndarray]:
    """Minimum Ncut over every proper bipartition of a small dense graph."""
    W = np.asarray(W, dtype=float)
    n = len(W)
    d = W.sum(axis=1)
    best, best_side = np.inf, None
    for bits in range(1, 2 ** (n - 1)):
        side = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        cut = W[side][:, ~side].sum()
        a, b = d[side].sum(), d[~side].sum()
        if a == 0 or b == 0:
            continue
        c = cut / a + cut / b
        if c < best:
            best, best_side = c, side
    return best, best_side


def dense_ncut(W: np.ndarray, side) -> float:
    W = np.asarray(W, dtype=float)
    side = np.asarray(side, dtype=bool)
    cut = W[side][:, ~side].sum()
    d = W.sum(axis=1)
    return cut / d[side].sum() + cut / d[~side].sum()


def flood_fill_components(mask: np.ndarray) -> int:
    """Number of 26-connected components of a boolean 3-D array, by BFS."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    count = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        q = deque([start])
        while q:
            x, y, z = q.popleft()
            for dx, dy, dz in offs:
                p = (x + dx, y + dy, z + dz)
                if all(0 <= p[i] < mask.shape[i] for i in range(3)) and mask[p] and not seen[p]:
                    seen[p] = True
                    q.append(p)
    return count


def naive_correlation_graph(data: np.ndarray, mask: np.ndarray) -> dict[tuple, float]:
    """Edge dict {(coord_a, coord_b): max(corr, 0)} over 26-adjacent masked voxels."""
    edges = {}
    coords = [tuple(c) for c in np.argwhere(mask)]
    cs = set(coords)
    for a in coords:
        for o in itertools.product((-1, 0, 1), repeat=3):
            b = (a[0] + o[0], a[1] + o[1], a[2] + o[2])
            if b <= a or b not in cs:
                continue
            x, y = data[a], data[b]
            if x.std() == 0 or y.std() == 0:
                continue
            r = float(np.corrcoef(x, y)[0, 1])
            if r > 0:
                edges[(a, b)] = r
    return edges


def ols_normal_equations(y, X):
    """beta, se, residuals via explicit (X'X)^-1."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    XtX_inv = np.linalg.inv(X.T @ X)
    beta = XtX_inv @ X.T @ y
    r = y - X @ beta
    s2 = r @ r / (len(y) - X.shape[1])
    return beta, np.sqrt(np.diag(XtX_inv) * s2), r


def loo_by_refit(y, X):
    """Explicit leave-one-out refits: predictions and 95% interval half-widths."""
    from scipy import stats

    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    pred, half = np.empty(n), np.empty(n)
    for i in range(n):
        keep = np.arange(n) != i
        Xi, yi = X[keep], y[keep]
        G = np.linalg.inv(Xi.T @ Xi)
        b = G @ Xi.T @ yi
        r = yi - Xi @ b
        s2 = r @ r / (n - 1 - p)
        pred[i] = X[i] @ b
        half[i] = stats.t.ppf(0.975, n - 1 - p) * np.sqrt(s2 * (1 + X[i] @ G @ X[i]))
    return pred, half


def mann_kendall_z(x) -> float:
    """Mann-Kendall trend statistic (normal approximation, no tie correction)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    s = sum(np.sign(x[j] - x[i]) for i in range(n - 1) for j in range(i + 1, n))
    var = n * (n - 1) * (2 * n + 5) / 18
    if s > 0:
        return (s - 1) / np.sqrt(var)
    if s < 0:
        return (s + 1) / np.sqrt(var)
    return 0.0


def hrf_reference(t):
    """Double-gamma response written directly from its closed form."""
    t = float(t)
    return (t / 5.4) ** 6 * np.exp(-(t - 5.4) / 0.9) - 0.35 * (t / 10.8) ** 12 * np.exp(-(t - 10.8) / 0.9)


def random_connected_graph(rng, n_lo=4, n_hi=12, p=0.5):
    while True:
        n = int(rng.integers(n_lo, n_hi + 1))
        A = np.triu(rng.random((n, n)) < p, 1)
        W = np.triu(rng.random((n, n)), 1) * A
        W = W + W.T
        from scipy.sparse.csgraph import connected_components
        if connected_components(W > 0)[0] == 1:
            return W


def canonical_min_corr(A, B) -> float:
    """Smallest canonical correlation between the column spaces of centred A and B."""
    qa, _ = np.linalg.qr(A - A.mean(axis=0))
    qb, _ = np.linalg.qr(B - B.mean(axis=0))
    return float(np.linalg.svd(qa.T @ qb, compute_uv=False).min())
