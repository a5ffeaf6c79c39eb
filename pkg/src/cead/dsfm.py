"""Dynamic semiparametric factor model for one cluster of voxels.

Model: ``Y[t, j] = (1, Z[t, 1..L]) @ A @ psi(X_j) + eps[t, j]`` with ``psi`` a
tensor-product quadratic B-spline basis over the cluster's bounding box.
The least-squares problem is bilinear in (Z, A) and is solved by exact
alternating least squares.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.interpolate import BSpline

from .errors import ValidationError

log = logging.getLogger(__name__)

DEGREE = 2
RIDGE = 1e-10


@dataclass(frozen=True)
class AxisBasis:
    lo: int
    hi: int
    degree: int
    knots: np.ndarray      # full clamped knot vector; empty for a constant axis

    @property
    def size(self) -> int:
        if self.degree == 0:
            return 1
        return len(self.knots) - self.degree - 1

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < self.lo) or np.any(x > self.hi):
            raise ValidationError("coordinate outside basis support")
        if self.degree == 0:
            return np.ones((len(x), 1))
        return BSpline.design_matrix(x, self.knots, self.degree).toarray()


def _axis_basis(values: np.ndarray, interior: int) -> tuple[AxisBasis, bool]:
    lo, hi = int(values.min()), int(values.max())
    distinct = len(np.unique(values))
    if distinct == 1:
        return AxisBasis(lo, hi, 0, np.empty(0)), False
    if distinct == 2:
        return AxisBasis(lo, hi, 1, np.array([lo, lo, hi, hi], float)), True
    use = max(0, min(interior, distinct - DEGREE - 1))
    inner = np.linspace(lo, hi, use + 2)
    knots = np.r_[[float(lo)] * DEGREE, inner, [float(hi)] * DEGREE]
    return AxisBasis(lo, hi, DEGREE, knots), use != interior


@dataclass(frozen=True)
class SplineBasis:
    """Tensor product of per-axis B-spline bases, evaluated at the cluster voxels."""

    axes: tuple[AxisBasis, AxisBasis, AxisBasis]
    coords: np.ndarray
    psi: np.ndarray         # (J, K) basis values at ``coords``
    reduced: bool = False

    @property
    def K(self) -> int:
        return self.psi.shape[1]

    @property
    def knots_per_axis(self) -> tuple[int, int, int]:
        return tuple(a.size - a.degree - 1 if a.degree else 0 for a in self.axes)

    def evaluate(self, coords) -> np.ndarray:
        coords = np.atleast_2d(np.asarray(coords))
        bx, by, bz = (ax.evaluate(coords[:, i]) for i, ax in enumerate(self.axes))
        return np.einsum("ja,jb,jc->jabc", bx, by, bz).reshape(len(coords), -1)


def build_basis(cluster_coords, knots_per_axis=(2, 2, 2)) -> SplineBasis:
    """Quadratic tensor B-splines on equidistant knots spanning the bounding box.

    Axes with a single coordinate value get one constant function; knot
    counts that would give more functions than distinct coordinates along an
    axis are reduced (with a warning).
    """
    coords = np.atleast_2d(np.asarray(cluster_coords, dtype=np.int64))
    if coords.shape[0] == 0:
        raise ValidationError("empty cluster")
    if np.isscalar(knots_per_axis):
        knots_per_axis = (int(knots_per_axis),) * 3
    axes, reduced = [], False
    for i in range(3):
        ax, red = _axis_basis(coords[:, i], int(knots_per_axis[i]))
        axes.append(ax)
        reduced |= red
    basis = SplineBasis(tuple(axes), coords, np.empty((0, 0)), reduced)
    psi = basis.evaluate(coords)
    if reduced:
        warnings.warn("knot count reduced to fit cluster extent", RuntimeWarning, stacklevel=2)
    return SplineBasis(tuple(axes), coords, psi, reduced)


@dataclass
class FactorFit:
    L: int
    Z_hat: np.ndarray           # (T, L) identified loadings, intercept excluded
    A_hat: np.ndarray           # (L + 1, K)
    objective: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)   # RSS after every half-step
    rank_deficient: bool = False
    identified: bool = True

    def design(self) -> np.ndarray:
        return np.column_stack([np.ones(len(self.Z_hat)), self.Z_hat])


def _solve_spd(G: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve G X = B for symmetric PSD G, adding a tiny ridge when singular."""
    scale = max(np.trace(G) / max(len(G), 1), np.finfo(float).tiny)
    try:
        c = sla.cho_factor(G, lower=True, check_finite=False)
        rcond = np.min(np.diag(c[0])) ** 2 / np.max(np.diag(c[0])) ** 2
        if rcond > 1e-13:
            return sla.cho_solve(c, B, check_finite=False), False
    except sla.LinAlgError:
        pass
    Gr = G + RIDGE * scale * np.eye(len(G))
    return sla.solve(Gr, B, assume_a="pos", check_finite=False), True


def _rss(Y, Zf, M) -> float:
    R = Y - Zf @ M
    return float(np.einsum("ij,ij->", R, R))


def fit_dsfm(Y, basis: SplineBasis, L: int = 1, tol: float = 1e-8,
             max_iter: int = 200, seed: int = 0) -> FactorFit:
    """Fit the factor model to a (T, J) cluster series by alternating least squares.

    Loadings are initialized from the leading principal directions of the
    time-demeaned data.  After convergence they are centred, whitened
    (sample variance 1), rotated so that the spatial factors are orthogonal,
    and signed to correlate non-negatively with the cluster mean; ``A_hat``
    absorbs the compensating transform so fitted values are unchanged.
    """
    Y = np.asarray(Y, dtype=np.float64)
    T, J = Y.shape
    psi = basis.psi
    if psi.shape[0] != J:
        raise ValidationError(f"basis has {psi.shape[0]} voxels, data has {J}")
    if L < 1:
        raise ValidationError("L must be positive")
    if T <= L + 1:
        raise ValidationError("need T > L + 1")
    if not np.all(np.isfinite(Y)):
        raise ValidationError("Y contains non-finite values")
    if J < basis.K:
        log.debug("cluster has %d voxels for %d basis functions", J, basis.K)

    G = psi.T @ psi
    Yc = Y - Y.mean(axis=0)
    U, s, _ = sla.svd(Yc, full_matrices=False, check_finite=False)
    if s.size >= L and s[L - 1] > 1e-12 * max(s[0], 1e-300):
        Z = U[:, :L] * s[:L]
    else:
        Z = np.random.default_rng(seed).standard_normal((T, L))
    Zf = np.column_stack([np.ones(T), Z])

    history: list[float] = []
    rank_def = False
    converged = False
    prev = np.inf
    it = 0
    floor = 1e-28 * max(float(np.einsum("ij,ij->", Y, Y)), 1e-300)
    for it in range(1, max_iter + 1):
        # (i) A given Z: (Zf'Zf) A G = Zf' Y psi
        left, rd1 = _solve_spd(Zf.T @ Zf, Zf.T @ Y @ psi)
        A, rd2 = _solve_spd(G, left.T)
        A = A.T
        rank_def |= rd1 or rd2
        M = A @ psi.T
        history.append(_rss(Y, Zf, M))
        # (ii) Z given A, intercept component fixed at 1
        M1 = M[1:]
        zt, rd3 = _solve_spd(M1 @ M1.T, M1 @ (Y - M[0]).T)
        rank_def |= rd3
        Zf = np.column_stack([np.ones(T), zt.T])
        cur = _rss(Y, Zf, M)
        history.append(cur)
        if cur <= floor or (prev - cur) <= tol * max(prev, floor) and np.isfinite(prev):
            converged = True
            break
        prev = cur
    # one more A-step so A is optimal for the final Z
    left, _ = _solve_spd(Zf.T @ Zf, Zf.T @ Y @ psi)
    A = _solve_spd(G, left.T)[0].T
    obj = _rss(Y, Zf, A @ psi.T)
    history.append(obj)

    Zh, Ah, ok = _identify(Zf[:, 1:], A, G, Y.mean(axis=1))
    objective = _rss(Y, np.column_stack([np.ones(T), Zh]), Ah @ psi.T)
    if not converged:
        log.warning("DSFM did not converge in %d iterations", max_iter)
    return FactorFit(L, Zh, Ah, objective, it, converged, history, rank_def, ok)


def _identify(Z, A, G, mean_series):
    T, L = Z.shape
    A = A.copy()
    mu = Z.mean(axis=0)
    Zc = Z - mu
    A[0] += mu @ A[1:]
    S = Zc.T @ Zc / (T - 1)
    e, V = np.linalg.eigh(S)
    if e.min() <= 1e-14 * max(e.max(), 1e-300):
        return Zc, A, False
    Zw = Zc @ (V / np.sqrt(e))
    A1 = (np.sqrt(e)[:, None] * V.T) @ A[1:]
    # rotate so spatial factors are orthogonal over the cluster, largest first
    lam, R = np.linalg.eigh(A1 @ G @ A1.T)
    R = R[:, np.argsort(lam)[::-1]]
    Zw = Zw @ R
    A1 = R.T @ A1
    m = mean_series - mean_series.mean()
    for l in range(L):
        c = float(Zw[:, l] @ m)
        flip = c < 0 or (c == 0 and Zw[0, l] < 0)
        if flip:
            Zw[:, l] *= -1
            A1[l] *= -1
    A[1:] = A1
    return Zw, A, True


def fitted_values(fit: FactorFit, basis: SplineBasis, coords=None) -> np.ndarray:
    """(T, J) fitted values ``(1, Z_t) A psi(X_j)``."""
    psi = basis.psi if coords is None else basis.evaluate(coords)
    return fit.design() @ fit.A_hat @ psi.T


def cluster_average(Y) -> np.ndarray:
    """Plain average over the cluster's voxels (the comparator series)."""
    return np.asarray(Y, dtype=np.float64).mean(axis=1)
