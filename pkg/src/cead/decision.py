"""Post-stimulus reaction statistics, risk-attitude regression and LOO forecasting."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import RankDeficientError, ValidationError
from .volume import EventTable

log = logging.getLogger(__name__)

N_LAGS = 4
UNIFORM = np.full(N_LAGS, 0.25)
ALPHA = 0.05


def check_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (N_LAGS,):
        raise ValidationError(f"weights must have {N_LAGS} entries")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValidationError("weights must lie on the simplex (non-negative, sum 1 within 1e-12)")
    return w


@dataclass(frozen=True)
class ReactionStat:
    subject_id: str
    cluster_id: str
    values: np.ndarray       # per-event weighted change
    aggregate: float
    lag_means: np.ndarray    # mean of Z[r+tau] - Z[r] over used events, tau = 1..4
    weights: np.ndarray
    excluded: int


def lag_differences(Z, events: EventTable, tr_s: float) -> tuple[np.ndarray, int]:
    """(n_used, 4) array of ``Z[r+tau] - Z[r]`` with ``r = floor(onset / tr)``."""
    Z = np.asarray(Z, dtype=np.float64)
    T = len(Z)
    r = np.floor(np.asarray(events.onset_s) / tr_s).astype(np.int64)
    ok = r + N_LAGS < T
    r = r[ok]
    taus = np.arange(1, N_LAGS + 1)
    D = Z[r[:, None] + taus] - Z[r][:, None]
    return D, int((~ok).sum())


def reaction_stat(Z, events: EventTable, tr_s: float, weights=UNIFORM,
                  subject_id: str = "", cluster_id: str = "") -> ReactionStat:
    w = check_weights(weights)
    D, excluded = lag_differences(Z, events, tr_s)
    if len(D) == 0:
        raise ValidationError("no event has a full post-stimulus window")
    if excluded:
        log.info("%d events excluded for insufficient lookahead", excluded)
    vals = D @ w
    return ReactionStat(subject_id, cluster_id, vals, float(vals.mean()), D.mean(axis=0), w, excluded)


@dataclass
class RiskRegression:
    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r2: float
    adj_r2: float
    with_intercept: bool
    df: int
    residuals: np.ndarray

    def significant(self, alpha: float = ALPHA) -> list[str]:
        return [n for n, pv in zip(self.names, self.p) if n != "intercept" and pv < alpha]


def _design(X, with_intercept):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(len(X)), X]) if with_intercept else X


def fit_risk_regression(phi, X, names=None, with_intercept: bool = True) -> RiskRegression:
    """OLS of risk attitudes on reaction aggregates.

    Without an intercept, R^2 and adjusted R^2 use the uncentered total sum
    of squares.
    """
    y = np.asarray(phi, dtype=np.float64)
    A = _design(X, with_intercept)
    n, p = A.shape
    k = p - int(with_intercept)
    names = tuple(names) if names is not None else tuple(f"x{i + 1}" for i in range(k))
    if len(names) != k:
        raise ValidationError("names do not match regressors")
    if with_intercept:
        names = ("intercept",) + names
    if n < p + 1:
        raise ValidationError(f"need at least {p + 1} subjects for {p} coefficients")
    if np.linalg.matrix_rank(A) < p:
        raise RankDeficientError("regressors are collinear")
    Q, R = np.linalg.qr(A)
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - A @ coef
    df = n - p
    rss = float(resid @ resid)
    s2 = rss / df
    Rinv = np.linalg.solve(R, np.eye(p))
    se = np.sqrt(np.sum(Rinv * Rinv, axis=1) * s2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / np.where(se > 0, se, 1.0), np.sign(coef) * np.inf)
    t = np.where((se == 0) & (coef == 0), 0.0, t)
    pv = 2 * stats.t.sf(np.abs(t), df)
    tss = float(np.sum((y - y.mean()) ** 2)) if with_intercept else float(y @ y)
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    dof_tot = n - 1 if with_intercept else n
    adj = 1.0 - (1.0 - r2) * dof_tot / df
    return RiskRegression(names, coef, se, t, pv, r2, adj, with_intercept, df, resid)


def reduce_model(phi, X, names, alpha: float = ALPHA):
    """Fit with intercept, keep regressors with p < alpha, refit without intercept.

    Returns ``(full, reduced, kept_columns)``; ``reduced`` is None when no
    regressor is significant.
    """
    full = fit_risk_regression(phi, X, names, with_intercept=True)
    keep = [i for i, n in enumerate(names) if n in full.significant(alpha)]
    if not keep:
        return full, None, []
    X = np.asarray(X, dtype=np.float64)
    reduced = fit_risk_regression(phi, X[:, keep], [names[i] for i in keep], with_intercept=False)
    return full, reduced, keep


@dataclass
class LooResult:
    predicted: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    inside: np.ndarray
    mae: float

    @property
    def coverage(self) -> float:
        return float(self.inside.mean())


def _loo_parts(y, X):
    n, p = X.shape
    G = X.T @ X
    if np.linalg.matrix_rank(X) < p:
        raise RankDeficientError("degenerate leave-one-out design")
    Ginv = np.linalg.inv(G)
    h = np.einsum("ij,jk,ik->i", X, Ginv, X)
    if np.any(h >= 1 - 1e-12):
        raise RankDeficientError("a leave-one-out fold is degenerate")
    e = y - X @ (Ginv @ (X.T @ y))
    return e, h


def loo_predict(phi, X) -> LooResult:
    """Leave-one-subject-out forecasts from the no-intercept model on ``X``.

    Uses the closed-form deletion identities, so each fold equals an explicit
    refit without subject i.
    """
    y = np.asarray(phi, dtype=np.float64)
    X = _design(X, False)
    n, p = X.shape
    if n < 4:
        raise ValidationError("leave-one-out needs at least 4 subjects")
    if n - 1 - p < 1:
        raise ValidationError("too few subjects for the number of regressors")
    e, h = _loo_parts(y, X)
    loo_e = e / (1 - h)
    pred = y - loo_e
    rss = float(e @ e)
    df = n - 1 - p
    s2 = np.maximum(rss - e * e / (1 - h), 0.0) / df
    half = stats.t.ppf(0.975, df) * np.sqrt(s2 / (1 - h))
    lo, hi = pred - half, pred + half
    tol = 1e-9 * max(1.0, float(np.max(np.abs(y))))
    inside = (y >= lo - tol) & (y <= hi + tol)
    return LooResult(pred, lo, hi, inside, float(np.mean(np.abs(loo_e))))


def _batched_loo_mae(y, Xs):
    """LOO MAE for a stack of designs ``Xs`` of shape (m, n, p); inf if degenerate."""
    G = np.einsum("mni,mnj->mij", Xs, Xs)
    det_ok = np.linalg.matrix_rank(Xs) == Xs.shape[2]
    G[~det_ok] = np.eye(Xs.shape[2])
    Ginv = np.linalg.inv(G)
    h = np.einsum("mni,mij,mnj->mn", Xs, Ginv, Xs)
    beta = np.einsum("mij,mnj,n->mi", Ginv, Xs, y)
    e = y[None, :] - np.einsum("mni,mi->mn", Xs, beta)
    with np.errstate(divide="ignore", invalid="ignore"):
        mae = np.mean(np.abs(e / (1 - h)), axis=1)
    bad = ~det_ok | np.any(h >= 1 - 1e-12, axis=1) | ~np.isfinite(mae)
    mae[bad] = np.inf
    return mae


@dataclass(frozen=True)
class WeightSearch:
    weights: np.ndarray
    mae: float
    uniform_mae: float
    index: int          # 0 = uniform baseline, i >= 1 = i-th Dirichlet draw
    n_candidates: int


def optimize_weights(phi, lag_means, iters: int = 10000, seed: int = 0, chunk: int = 2048) -> WeightSearch:
    """Monte-Carlo search over lag weights minimising the LOO forecast MAE.

    ``lag_means`` is (n_subjects, n_regressors, 4).  Candidates are the uniform
    weights followed by ``iters`` Dirichlet(1,1,1,1) draws; ties go to the
    lowest candidate index, so the result never exceeds the uniform MAE.
    """
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    y = np.asarray(phi, dtype=np.float64)
    L = np.asarray(lag_means, dtype=np.float64)
    if L.ndim == 2:
        L = L[:, None, :]
    if L.shape[0] != len(y) or L.shape[2] != N_LAGS:
        raise ValidationError("lag_means must be (n_subjects, n_regressors, 4)")
    rng = np.random.default_rng(seed)
    cand = np.vstack([UNIFORM, rng.dirichlet(np.ones(N_LAGS), size=iters)])
    maes = np.empty(len(cand))
    for s in range(0, len(cand), chunk):
        W = cand[s:s + chunk]
        Xs = np.einsum("nkt,mt->mnk", L, W)
        maes[s:s + chunk] = _batched_loo_mae(y, Xs)
    best = int(np.argmin(maes))    # first minimum wins
    return WeightSearch(cand[best], float(maes[best]), float(maes[0]), best, len(cand))


DECISION_HEADER = ["section", "name", "value", "se", "t", "p"]
