"""Mean-variance valuation and one-parameter logistic estimation of risk attitudes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .errors import ValidationError
from .volume import ChoiceTable

SAFE_RETURN_PCT = 5.0
SIGN_MODES = ("inverse", "direct")
MIN_TRIALS = 10
_Z975 = 1.959963984540054


def mv_value(mean_pct, sd_pct, phi):
    """Value of a risky option: mean minus ``phi`` times standard deviation."""
    sd = np.asarray(sd_pct, dtype=np.float64)
    if np.any(sd < 0):
        raise ValidationError("sd_pct must be non-negative")
    return np.asarray(mean_pct, dtype=np.float64) - phi * sd


def _k(sign: str) -> float:
    # P(risky) = expit(k * (V - 5)); "inverse" lowers P as value rises.
    if sign not in SIGN_MODES:
        raise ValidationError(f"logit sign must be one of {SIGN_MODES}, got {sign!r}")
    return -1.0 if sign == "inverse" else 1.0


def choice_probability(mean_pct, sd_pct, phi, sign: str = "inverse"):
    """P(risky) = 1 / (1 + exp(mean - phi*sd - 5)) in the default ``inverse`` mode.

    The ``direct`` mode flips the exponent so that higher value raises
    the probability of the risky choice.
    """
    u = _k(sign) * (mv_value(mean_pct, sd_pct, phi) - SAFE_RETURN_PCT)
    return expit(u)


def log_likelihood(phi: float, mean_pct, sd_pct, chose, sign: str = "inverse") -> float:
    u = _k(sign) * (np.asarray(mean_pct, float) - phi * np.asarray(sd_pct, float) - SAFE_RETURN_PCT)
    y = np.asarray(chose, dtype=bool)
    return float(np.sum(np.where(y, log_expit(u), log_expit(-u))))


@dataclass(frozen=True)
class RiskAttitude:
    subject_id: str
    phi_hat: float
    se: float
    ci95: tuple[float, float]
    n_trials: int
    log_likelihood: float
    flag: str = ""          # "", "separation", "unidentified" or "nonconverged"
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.flag == ""


def _newton(m, s, y, k, max_iter=100, tol=1e-10):
    phi = 0.0
    ll = log_likelihood(phi, m, s, y, "inverse" if k < 0 else "direct")
    sign = "inverse" if k < 0 else "direct"
    for it in range(1, max_iter + 1):
        p = expit(k * (m - phi * s - SAFE_RETURN_PCT))
        score = -k * np.sum((y - p) * s)
        info = np.sum(p * (1 - p) * s * s)
        if info <= 0:
            return phi, ll, info, it, False
        step = score / info
        t = 1.0
        while True:
            cand = phi + t * step
            cll = log_likelihood(cand, m, s, y, sign)
            if cll >= ll - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        phi, ll = cand, cll
        if abs(t * step) < tol * max(1.0, abs(phi)):
            p = expit(k * (m - phi * s - SAFE_RETURN_PCT))
            return phi, ll, float(np.sum(p * (1 - p) * s * s)), it, True
    return phi, ll, info, max_iter, False


def estimate_phi(choices: ChoiceTable, sign: str = "inverse", subject_id: str | None = None) -> RiskAttitude:
    """Maximum-likelihood risk attitude with observed-information Wald CI.

    When every trial with positive spread has the same outcome the
    likelihood increases without bound; the result is then flagged
    ``separation`` with infinite estimate and CI (-inf, inf).
    """
    k = _k(sign)
    n = len(choices)
    sid = subject_id if subject_id is not None else (str(choices.subject_id[0]) if n else "")
    if n < MIN_TRIALS:
        raise ValidationError(f"need at least {MIN_TRIALS} trials, got {n}")
    m = choices.mean_return_pct.astype(np.float64)
    s = choices.sd_return_pct.astype(np.float64)
    y = choices.chose_risky.astype(np.float64)
    informative = s > 0
    if not informative.any():
        return RiskAttitude(sid, np.nan, np.inf, (-np.inf, np.inf), n, np.nan, "unidentified")
    yi = y[informative]
    if np.all(yi == yi[0]):
        # P(risky) is monotone in phi with direction -k, so the MLE runs off to
        # +inf when all informative trials are risky (inverse sign) and -inf otherwise.
        direction = -k if yi[0] == 1 else k
        phi = float(np.copysign(np.inf, direction))
        ll = float(np.sum(np.where(y[~informative] == 1,
                                   log_expit(k * (m[~informative] - SAFE_RETURN_PCT)),
                                   log_expit(-k * (m[~informative] - SAFE_RETURN_PCT)))))
        return RiskAttitude(sid, phi, np.inf, (-np.inf, np.inf), n, ll, "separation")
    phi, ll, info, it, conv = _newton(m, s, y, k)
    se = 1.0 / np.sqrt(info) if info > 0 else np.inf
    flag = "" if conv and np.isfinite(se) else "nonconverged"
    return RiskAttitude(sid, float(phi), float(se), (phi - _Z975 * se, phi + _Z975 * se), n, ll, flag, it)


def estimate_all(choices: ChoiceTable, sign: str = "inverse") -> list[RiskAttitude]:
    return [estimate_phi(choices.for_subject(s), sign, s) for s in choices.subjects()]


def rolling_phi(choices: ChoiceTable, window: int = 100, sign: str = "inverse") -> list[RiskAttitude]:
    """Estimates on every run of ``window`` consecutive trials (time-ordered)."""
    n = len(choices)
    if window < MIN_TRIALS or window > n:
        raise ValidationError(f"window must be in [{MIN_TRIALS}, {n}]")
    order = np.argsort(choices.trial_index, kind="stable")
    cols = [getattr(choices, c)[order] for c in ("subject_id", "trial_index", "mean_return_pct",
                                                  "sd_return_pct", "condition", "chose_risky", "onset_s")]
    out = []
    for start in range(n - window + 1):
        sl = slice(start, start + window)
        out.append(estimate_phi(ChoiceTable(*(c[sl] for c in cols)), sign))
    return out


def classify(att: RiskAttitude) -> str:
    """``seeking`` / ``averse`` when the 95% CI excludes 0, else ``neutral``."""
    lo, hi = att.ci95
    if np.isnan(att.phi_hat):
        return "neutral"
    if hi < 0:
        return "seeking"
    if lo > 0:
        return "averse"
    return "neutral"


PHI_HEADER = ["subject", "phi", "se", "lo", "hi", "n", "flag"]


def phi_rows(atts):
    for a in atts:
        yield a.subject_id, a.phi_hat, a.se, a.ci95[0], a.ci95[1], a.n_trials, a.flag or "ok"
