"""Stationarity and dependence diagnostics for loading series."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

# Trend-stationarity KPSS table; its 10/5/1% points are 0.119/0.146/0.216.
KPSS_CRIT = {
    "ct": {0.10: 0.119, 0.05: 0.146, 0.025: 0.176, 0.01: 0.216},
    "c": {0.10: 0.347, 0.05: 0.463, 0.025: 0.574, 0.01: 0.739},
}
# Dickey-Fuller without deterministic terms (asymptotic).
ADF_CRIT = {0.01: -2.58, 0.05: -1.95, 0.10: -1.62}
MIN_T = 20


def _check(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if len(x) < MIN_T:
        raise ValidationError(f"series needs at least {MIN_T} points")
    if not np.all(np.isfinite(x)):
        raise ValidationError("series has non-finite values")
    if np.ptp(x) <= 1e-12 * max(1.0, float(np.max(np.abs(x)))):
        raise ValidationError("series has zero variance")
    return x


def kpss_lags(T: int) -> int:
    return int(np.floor(4 * (T / 100) ** 0.25))


def kpss(series, lags: int | None = None, trend: str = "ct") -> float:
    """KPSS statistic with Bartlett long-run variance.

    ``trend="ct"`` tests trend stationarity (default), ``"c"`` level stationarity.
    """
    x = _check(series)
    T = len(x)
    if trend == "c":
        e = x - x.mean()
    elif trend == "ct":
        tt = np.arange(1, T + 1, dtype=np.float64)
        X = np.column_stack([np.ones(T), tt])
        e = x - X @ np.linalg.lstsq(X, x, rcond=None)[0]
    else:
        raise ValidationError("trend must be 'c' or 'ct'")
    l = kpss_lags(T) if lags is None else int(lags)
    if l < 0 or l >= T:
        raise ValidationError("lag truncation out of range")
    s2 = e @ e / T
    for k in range(1, l + 1):
        s2 += 2 * (1 - k / (l + 1)) * (e[k:] @ e[:-k]) / T
    S = np.cumsum(e)
    return float(S @ S / (T * T * s2))


def adf_lags(T: int) -> int:
    return int(np.floor(12 * (T / 100) ** 0.25))


def adf(series, lags: int | None = None) -> float:
    """Augmented Dickey-Fuller t-statistic, no constant or trend.

    ``dy_t = rho * y_{t-1} + sum_i g_i dy_{t-i} + e_t`` over the common sample.
    """
    x = _check(series)
    T = len(x)
    p = adf_lags(T) if lags is None else int(lags)
    if p < 0 or T - p - 1 < p + 2:
        raise ValidationError("too many lags for the series length")
    dy = np.diff(x)
    rows = np.arange(p, T - 1)
    cols = [x[rows]] + [dy[rows - i] for i in range(1, p + 1)]
    X = np.column_stack(cols)
    y = dy[rows]
    Q, R = np.linalg.qr(X)
    b = np.linalg.solve(R, Q.T @ y)
    r = y - X @ b
    df = len(y) - X.shape[1]
    s2 = r @ r / df
    Rinv = np.linalg.solve(R, np.eye(X.shape[1]))
    return float(b[0] / np.sqrt(s2 * (Rinv[0] @ Rinv[0])))


def acf(series, max_lag: int) -> np.ndarray:
    """Sample autocorrelations at lags 0..max_lag (biased autocovariance)."""
    x = _check(series)
    if not 0 <= max_lag < len(x):
        raise ValidationError("max_lag must be in [0, T)")
    d = x - x.mean()
    g0 = d @ d
    return np.array([1.0] + [(d[k:] @ d[:-k]) / g0 for k in range(1, max_lag + 1)])


def rolling_corr(a, b, window: int) -> np.ndarray:
    """Pearson correlation over each trailing window; NaN where a window is flat."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("series must be 1-D and of equal length")
    if not 2 <= window <= len(a):
        raise ValidationError("window must be in [2, T]")
    A = sliding_window_view(a, window)
    B = sliding_window_view(b, window)
    A = A - A.mean(axis=1, keepdims=True)
    B = B - B.mean(axis=1, keepdims=True)
    saa = np.einsum("ij,ij->i", A, A)
    sbb = np.einsum("ij,ij->i", B, B)
    sab = np.einsum("ij,ij->i", A, B)
    scale = np.maximum(np.abs(a).max(), np.abs(b).max()) ** 2 * window
    flat = (saa <= 1e-24 * scale) | (sbb <= 1e-24 * scale)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = sab / np.sqrt(saa * sbb)
    r[flat] = np.nan
    return np.clip(r, -1.0, 1.0)


@dataclass
class DiagnosticsReport:
    kpss_stat: float
    adf_stat: float
    acf: np.ndarray
    rolling: dict[int, np.ndarray] = field(default_factory=dict)
    kpss_crit: dict = field(default_factory=lambda: dict(KPSS_CRIT["ct"]))
    adf_crit: dict = field(default_factory=lambda: dict(ADF_CRIT))

    @property
    def kpss_reject_5(self) -> bool:
        return self.kpss_stat > self.kpss_crit[0.05]

    @property
    def adf_reject_5(self) -> bool:
        return self.adf_stat < self.adf_crit[0.05]


def diagnose(series, other=None, windows=(250, 500), max_lag: int = 20, trend: str = "ct") -> DiagnosticsReport:
    x = _check(series)
    rolling = {}
    if other is not None:
        rolling = {int(w): rolling_corr(x, other, int(w)) for w in windows if w <= len(x)}
    return DiagnosticsReport(kpss(x, trend=trend), adf(x), acf(x, min(max_lag, len(x) - 1)),
                             rolling, dict(KPSS_CRIT[trend]))
