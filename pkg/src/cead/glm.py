"""HRF, design matrices, first/group-level GLM tests and activation thresholds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage, special, stats
from scipy.sparse import csgraph

from .errors import RankDeficientError, ValidationError
from .volume import CONNECTIVITY_26, EventTable

Z_CAP = 38.0
Z_THRESH = 3.09
EXTENT = 20
HRF_LENGTH_S = 32.0


def hrf(t):
    """Double-gamma haemodynamic response, peak at 5.4 s; zero for t < 0."""
    t = np.asarray(t, dtype=np.float64)
    tp = np.maximum(t, 0.0)
    h = (tp / 5.4) ** 6 * np.exp(-(tp - 5.4) / 0.9) - 0.35 * (tp / 10.8) ** 12 * np.exp(-(tp - 10.8) / 0.9)
    return np.where(t < 0, 0.0, h)


@dataclass(frozen=True)
class Hrf:
    tr_s: float
    values: np.ndarray

    @classmethod
    def sampled(cls, tr_s: float, length_s: float = HRF_LENGTH_S) -> "Hrf":
        grid = np.arange(0.0, length_s + 1e-9, tr_s)
        return cls(tr_s, hrf(grid))


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    names: tuple[str, ...]

    @property
    def shape(self):
        return self.X.shape

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.names.index(name)]


def stimulus_train(events: EventTable, nt: int, tr_s: float) -> np.ndarray:
    """Boxcars sampled at the TR grid; zero-duration events become impulses."""
    s = np.zeros(nt)
    for onset, dur, amp in zip(events.onset_s, events.duration_s, events.amplitude):
        first = int(np.floor(onset / tr_s))
        last = max(first + 1, int(np.ceil((onset + dur) / tr_s))) if dur > 0 else first + 1
        s[first:min(last, nt)] += amp
    return s


def regressor(events: EventTable, nt: int, tr_s: float) -> np.ndarray:
    h = Hrf.sampled(tr_s).values
    return np.convolve(stimulus_train(events, nt, tr_s), h)[:nt]


def make_design(events: EventTable, nt: int, tr_s: float, conditions=None,
                pool: bool = False, intercept: bool = True) -> DesignMatrix:
    """HRF-convolved regressors, one per condition (or one pooled), plus intercept."""
    events.validate_for(nt, tr_s)
    if conditions is None:
        conditions = sorted(set(int(c) for c in events.condition_id))
    conditions = [int(c) for c in conditions]
    groups = [conditions] if pool else [[c] for c in conditions]
    cols, names = [], []
    for grp in groups:
        ev = events.select(grp)
        if len(ev) == 0:
            raise ValidationError(f"no events for condition(s) {grp}")
        col = regressor(ev, nt, tr_s)
        if not np.any(col):
            raise ValidationError(f"regressor for condition(s) {grp} is identically zero")
        cols.append(col)
        names.append("all" if pool else f"cond{grp[0]}")
    if intercept:
        cols.append(np.ones(nt))
        names.append("intercept")
    return DesignMatrix(np.column_stack(cols), tuple(names))


def z_from_t(t, df) -> np.ndarray:
    """Sign-preserving probit transform of the Student-t CDF, capped at +-38."""
    t = np.asarray(t, dtype=np.float64)
    z = np.zeros_like(t)
    pos = t > 0
    neg = t < 0
    with np.errstate(divide="ignore", over="ignore"):
        z[pos] = -special.ndtri_exp(stats.t.logsf(t[pos], df))
        z[neg] = special.ndtri_exp(stats.t.logcdf(t[neg], df))
    z[np.isnan(t)] = np.nan
    return np.clip(z, -Z_CAP, Z_CAP)


@dataclass
class GlmResult:
    beta: np.ndarray     # (p,) or (p, N)
    se: np.ndarray
    t: np.ndarray
    z: np.ndarray
    df: int
    names: tuple[str, ...] = ()
    rho: float | None = None
    residuals: np.ndarray | None = None

    def row(self, name: str):
        i = self.names.index(name)
        return self.beta[i], self.se[i], self.t[i], self.z[i]


def _ar1_transform(y, X):
    b, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ b
    r0 = r - r.mean(axis=0)
    rho = float(np.sum(r0[1:] * r0[:-1]) / np.sum(r0 * r0)) if np.any(r0) else 0.0
    y2 = y[1:] - rho * y[:-1]
    X2 = X[1:] - rho * X[:-1]
    return y2, X2, rho


def first_level(series, design, prewhiten: bool = False) -> GlmResult:
    """OLS fit of one or many series (T,) / (T, N) on the design.

    Optional AR(1) Cochrane-Orcutt prewhitening (single series only).
    """
    X = design.X if isinstance(design, DesignMatrix) else np.asarray(design, dtype=np.float64)
    names = design.names if isinstance(design, DesignMatrix) else tuple(f"x{i}" for i in range(X.shape[1]))
    y = np.asarray(series, dtype=np.float64)
    T, p = X.shape
    if y.shape[0] != T:
        raise ValidationError(f"series length {y.shape[0]} != design rows {T}")
    if T <= p:
        raise ValidationError("need more time points than regressors")
    rho = None
    if prewhiten:
        if y.ndim != 1:
            raise ValidationError("prewhitening supports a single series")
        y, X, rho = _ar1_transform(y, X)
        T = X.shape[0]
    if np.linalg.matrix_rank(X) < p:
        raise RankDeficientError("design matrix is rank deficient")
    Q, R = np.linalg.qr(X)
    beta = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ beta
    df = T - p
    s2 = np.sum(resid * resid, axis=0) / df
    Rinv = np.linalg.solve(R, np.eye(p))
    diag = np.sum(Rinv * Rinv, axis=1)
    se = np.sqrt(np.multiply.outer(diag, s2)) if y.ndim > 1 else np.sqrt(diag * s2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / np.where(se > 0, se, 1.0), np.sign(beta) * np.inf)
    t = np.where((se == 0) & (beta == 0), 0.0, t)
    return GlmResult(beta, se, t, z_from_t(t, df), df, names, rho, resid)


@dataclass
class GroupResult:
    t: float
    z: float
    p: float
    mean: float
    se: float
    n: int
    degenerate: bool = False


def group_level(betas) -> GroupResult:
    """One-sample t-test of subject betas against zero (summary-statistics model)."""
    b = np.asarray(betas, dtype=np.float64)
    n = b.size
    if n < 3:
        raise ValidationError("group test needs at least 3 subjects")
    mean = float(b.mean())
    sd = float(b.std(ddof=1))
    if sd <= 1e-12 * max(1.0, abs(mean)):
        if mean == 0:
            return GroupResult(0.0, 0.0, 0.5, 0.0, 0.0, n, True)
        z = float(np.copysign(Z_CAP, mean))
        return GroupResult(float(np.copysign(np.inf, mean)), z, float(stats.norm.sf(z)), mean, 0.0, n, True)
    se = sd / np.sqrt(n)
    t = mean / se
    z = float(z_from_t(np.array([t]), n - 1)[0])
    return GroupResult(t, z, float(stats.t.sf(t, n - 1)), mean, se, n)


def group_level_map(betas) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized one-sample t-test over units; ``betas`` is (n_subjects, ...)."""
    b = np.asarray(betas, dtype=np.float64)
    n = b.shape[0]
    if n < 3:
        raise ValidationError("group test needs at least 3 subjects")
    mean = b.mean(axis=0)
    sd = b.std(axis=0, ddof=1)
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(flat, np.sign(mean) * np.inf, mean / (sd / np.sqrt(n)))
    t = np.where(flat & (mean == 0), 0.0, t)
    return t, z_from_t(t, n - 1)


def threshold_activation(zmap, adjacency=None, z_thresh: float = Z_THRESH, extent: int = EXTENT) -> np.ndarray:
    """Boolean map of activated units.

    Without ``adjacency`` each unit (e.g. a cluster loading) is tested on its
    own.  With ``adjacency="26"`` (``zmap`` a 3-D voxel map) or a sparse
    adjacency matrix, supra-threshold units are kept only within connected
    components of at least ``extent`` members.
    """
    z = np.asarray(zmap, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("Z map must be finite")
    supra = z > z_thresh
    if adjacency is None:
        return supra
    if isinstance(adjacency, str):
        if adjacency != "26" or z.ndim != 3:
            raise ValidationError("grid adjacency needs a 3-D map and adjacency='26'")
        lab, nlab = ndimage.label(supra, structure=CONNECTIVITY_26)
    else:
        A = sp.csr_matrix(adjacency)
        idx = np.flatnonzero(supra.ravel())
        sub = A[idx][:, idx]
        nc, comp = csgraph.connected_components(sub, directed=False)
        lab = np.zeros(supra.size, dtype=np.int64)
        lab[idx] = comp + 1
        lab = lab.reshape(supra.shape)
        nlab = nc
    if nlab == 0:
        return supra
    sizes = np.bincount(lab.ravel(), minlength=nlab + 1)
    keep = sizes >= extent
    keep[0] = False
    return keep[lab]
