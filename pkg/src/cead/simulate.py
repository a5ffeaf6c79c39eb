"""Synthetic BOLD volumes and behavioural/neural panels with known ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from .behavior import choice_probability
from .decision import N_LAGS
from .errors import ValidationError
from .glm import regressor
from .volume import CONDITIONS, ChoiceTable, EventTable, VolumeSeries

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
KERNEL_MODES = ("sigma", "fwhm")
SETUPS = ("a", "b", "c", "d")
FIELD_CENTRE = (6.0, 8.0, 6.0)

MEANS_PCT = (5.0, 7.0, 9.0, 11.0)
SDS_PCT = (2.0, 4.0, 6.0, 8.0)
# per (mean, sd) cell: 8 single, 4 correlated, 4 uncorrelated presentations
REPS = {"single": 8, "correlated": 4, "uncorrelated": 4}


def factor_field(dims, centre=FIELD_CENTRE) -> np.ndarray:
    """Distance of each 1-based grid coordinate to ``centre``, shape ``dims``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValidationError("dims must be three positive integers")
    g = np.indices(dims).astype(np.float64) + 1.0
    c = np.asarray(centre, dtype=np.float64).reshape(3, 1, 1, 1)
    return np.sqrt(np.sum((g - c) ** 2, axis=0))


def kernel_sigma_vox(width_mm: float, voxel_mm, mode: str = "sigma") -> np.ndarray:
    """Per-axis Gaussian sigma in voxels.

    ``mode="sigma"`` reads ``width_mm`` as the kernel's standard deviation;
    ``mode="fwhm"`` converts it from a full width at half maximum.
    """
    if mode not in KERNEL_MODES:
        raise ValidationError(f"kernel mode must be one of {KERNEL_MODES}")
    if not width_mm > 0:
        raise ValidationError("kernel width must be positive")
    s = width_mm * (FWHM_TO_SIGMA if mode == "fwhm" else 1.0)
    return s / np.broadcast_to(np.asarray(voxel_mm, dtype=np.float64), (3,))


def gaussian_kernel1d(sigma_vox: float) -> np.ndarray:
    """Gaussian weights truncated at 3 sigma, normalized to unit sum."""
    r = int(np.ceil(3.0 * sigma_vox))
    if r == 0 or sigma_vox < 1e-6:
        return np.ones(1)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def kernel3d(sigma_vox) -> np.ndarray:
    kx, ky, kz = (gaussian_kernel1d(s) for s in sigma_vox)
    return np.einsum("i,j,k->ijk", kx, ky, kz)


def _sep(arr: np.ndarray, kernels) -> np.ndarray:
    out = arr
    for axis, k in enumerate(kernels):
        if len(k) > 1:
            out = ndimage.convolve1d(out, k, axis=axis, mode="constant", cval=0.0)
    return out


def _normalized_conv(data: np.ndarray, support: np.ndarray, kernels):
    """Convolve ``data`` (x, y, z[, t]) restricted to ``support``, renormalizing
    the kernel over in-grid, in-support voxels.  Returns (smoothed, norm)."""
    s = support.astype(np.float64)
    norm = _sep(s, kernels)
    sd = s[..., None] if data.ndim == 4 else s
    num = _sep(data * sd, kernels)
    safe = np.where(norm > 0, norm, 1.0)
    out = num / (safe[..., None] if data.ndim == 4 else safe)
    return out, norm


def smooth_noise(dims, nt: int, fwhm_mm: float = 8.0, voxel_mm=(3.0, 3.0, 3.0), seed: int = 0,
                 mode: str = "sigma", mask=None, rng=None) -> np.ndarray:
    """Spatially correlated N(0, 1) noise, shape (nx, ny, nz, nt).

    Each time point is an i.i.d. standard normal field smoothed with the
    boundary-renormalized Gaussian kernel, then divided by its exact
    per-voxel standard deviation so that marginal variance is 1.
    """
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed) if rng is None else rng
    e = rng.standard_normal(dims + (int(nt),))
    support = np.ones(dims, bool) if mask is None else np.asarray(mask, bool)
    kernels = [gaussian_kernel1d(s) for s in kernel_sigma_vox(fwhm_mm, voxel_mm, mode)]
    out, norm = _normalized_conv(e, support, kernels)
    sq = _sep(support.astype(np.float64), [k * k for k in kernels])
    with np.errstate(invalid="ignore", divide="ignore"):
        sd = np.sqrt(sq) / norm
    sd = np.where(support & (norm > 0), sd, 1.0)
    out = out / sd[..., None]
    out[~support] = 0.0
    return out


def gaussian_smooth(v: VolumeSeries, fwhm_mm: float = 8.0, mode: str = "sigma") -> VolumeSeries:
    """Smooth every time point within the mask; no variance rescaling."""
    kernels = [gaussian_kernel1d(s) for s in kernel_sigma_vox(fwhm_mm, v.voxel_size_mm, mode)]
    out, _ = _normalized_conv(np.asarray(v.data, dtype=np.float64), v.mask, kernels)
    out[~v.mask] = 0.0
    return v.replace_data(out)


def even_onsets(n_events: int, nt: int, tr_s: float) -> np.ndarray:
    return np.arange(n_events) * (nt * tr_s / n_events)


def ar2_series(n: int, coef=(0.5, 0.2), burn_in: int = 500, rng=None) -> np.ndarray:
    rng = np.random.default_rng(0) if rng is None else rng
    e = rng.standard_normal(n + burn_in)
    y = signal.lfilter([1.0], [1.0, -coef[0], -coef[1]], e)
    return y[burn_in:]


def ar_stationary(coef) -> bool:
    # roots of 1 - a1 z - a2 z^2 must lie outside the unit circle
    roots = np.roots(np.trim_zeros([-coef[1], -coef[0], 1.0], "f"))
    return bool(np.all(np.abs(roots) > 1.0))


@dataclass(frozen=True)
class SimConfig:
    setup: str = "b"
    dims: tuple[int, int, int] = (6, 7, 6)
    nt: int = 1400
    tr_s: float = 2.0
    voxel_mm: tuple[float, float, float] = (3.0, 3.0, 3.0)
    noise_sd: float = 1.0
    fwhm_mm: float = 8.0
    kernel: str = "sigma"
    amplitude: float = 0.4
    ar: tuple[float, float] = (0.5, 0.2)
    burn_in: int = 500
    n_events: int = 64
    onsets: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ValidationError(f"setup must be one of {SETUPS}")
        if len(self.dims) != 3 or min(self.dims) < 1 or self.nt < 1:
            raise ValidationError("dims and nt must be positive")
        if not self.fwhm_mm > 0:
            raise ValidationError("fwhm_mm must be positive")
        if self.kernel not in KERNEL_MODES:
            raise ValidationError(f"kernel must be one of {KERNEL_MODES}")
        if self.setup == "d" and not ar_stationary(self.ar):
            raise ValidationError("AR(2) coefficients are not stationary")

    def events(self) -> EventTable:
        on = np.asarray(self.onsets, float) if self.onsets is not None else even_onsets(self.n_events, self.nt, self.tr_s)
        return EventTable.from_onsets(on)


@dataclass
class SimResult:
    volume: VolumeSeries
    truth: np.ndarray        # true loading series Z_t
    stimulus: np.ndarray     # HRF-convolved event regressor (unit amplitude)
    events: EventTable
    field: np.ndarray        # m(X) over the grid
    config: SimConfig


def gen_bold(cfg: SimConfig) -> SimResult:
    """Y_t(X) = Z_t * m(X) + noise for one of the four simulation setups.

    (a) stimulus loading, i.i.d. noise; (b) stimulus loading, smoothed noise;
    (c) constant loading, smoothed noise; (d) AR(2) loading, smoothed noise.
    """
    ss_noise, ss_ar = np.random.SeedSequence(cfg.seed).spawn(2)
    events = cfg.events()
    stim = regressor(events, cfg.nt, cfg.tr_s)
    m = factor_field(cfg.dims)
    if cfg.setup in ("a", "b"):
        Z = cfg.amplitude * stim
    elif cfg.setup == "c":
        Z = np.ones(cfg.nt)
    else:
        Z = cfg.amplitude * ar2_series(cfg.nt, cfg.ar, cfg.burn_in, np.random.default_rng(ss_ar))
    rng = np.random.default_rng(ss_noise)
    if cfg.setup == "a":
        eps = rng.standard_normal(tuple(cfg.dims) + (cfg.nt,))
    else:
        eps = smooth_noise(cfg.dims, cfg.nt, cfg.fwhm_mm, cfg.voxel_mm, mode=cfg.kernel, rng=rng)
    data = m[..., None] * Z[None, None, None, :] + cfg.noise_sd * eps
    vol = VolumeSeries(data, np.ones(cfg.dims, bool), cfg.voxel_mm, cfg.tr_s)
    return SimResult(vol, Z, stim, events, m, cfg)


def gen_planted_volumes(n_subjects: int, dims=(6, 7, 6), nt: int = 1400, tr_s: float = 2.0,
                        amplitude: float = 0.4, noise_sd: float = 1.0, n_events: int = 64,
                        seed: int = 0):
    """Subjects whose lower-x half carries the stimulus response and the rest noise only.

    Returns ``(volumes, events, planted_mask)``.
    """
    dims = tuple(int(d) for d in dims)
    events = EventTable.from_onsets(even_onsets(n_events, nt, tr_s))
    stim = regressor(events, nt, tr_s)
    planted = np.zeros(dims, bool)
    planted[: dims[0] // 2] = True
    m = factor_field(dims) * planted
    vols = []
    for ss in np.random.SeedSequence(seed).spawn(n_subjects):
        eps = np.random.default_rng(ss).standard_normal(dims + (nt,))
        data = amplitude * m[..., None] * stim + noise_sd * eps
        vols.append(VolumeSeries(data, np.ones(dims, bool), (3.0, 3.0, 3.0), tr_s))
    return vols, events, planted


def trial_design(rng) -> list[tuple[float, float, str]]:
    """The 256-trial (mean, sd, condition) schedule in a random order."""
    trials = [(m, s, c) for m in MEANS_PCT for s in SDS_PCT for c, r in REPS.items() for _ in range(r)]
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


@dataclass
class Panel:
    choices: ChoiceTable
    loadings: dict[str, np.ndarray]    # subject -> (T, n_clusters)
    events: EventTable                 # shared trial onsets
    phi: np.ndarray                    # true attitudes
    regressors: np.ndarray             # (n_subjects, n_clusters) planted aggregates
    lag_means: np.ndarray              # (n_subjects, n_clusters, 4)
    coefficients: np.ndarray
    clusters: tuple[str, ...]
    subjects: tuple[str, ...]
    tr_s: float = 2.0
    extra: dict = field(default_factory=dict)


def gen_panel(n_subjects: int, coefficients=(-1.5, -1.1, 0.0), noise_sd: float = 0.2, seed: int = 0,
              phi_range=(-0.1, 1.1), clusters=("aINS_l", "aINS_r", "DMPFC"), lag_profile=(1, 1, 1, 1),
              distractor_sd: float = 0.0, series_noise_sd: float = 0.0, sign: str = "inverse",
              nt: int = 1400, tr_s: float = 2.0, true_phi=None) -> Panel:
    """Multi-subject panel with a planted linear link between reactions and attitudes.

    Subject i gets a signal s_i ~ U(phi_range) and per-cluster aggregates
    x_i = s_i * a / |a|^2 + v_i with v_i orthogonal to the coefficient vector
    a, so x_i @ a = s_i.  The true attitude is phi_i = s_i + noise.  Each
    cluster series is a train of responses whose uniform-weight post-stimulus
    change equals x_ic exactly; ``lag_profile`` shapes the response over the
    four lags and ``distractor_sd`` adds subject-specific lag offsets.
    """
    if n_subjects < 4:
        raise ValidationError("a panel needs at least 4 subjects")
    a = np.asarray(coefficients, dtype=np.float64)
    if len(a) != len(clusters) or not np.any(a):
        raise ValidationError("need one non-zero coefficient vector entry per cluster")
    prof = np.asarray(lag_profile, dtype=np.float64)
    if prof.shape != (N_LAGS,) or prof.sum() <= 0:
        raise ValidationError("lag_profile must have 4 entries with positive sum")
    root = np.random.SeedSequence(seed)
    ss_panel, ss_subj = root.spawn(2)
    rng = np.random.default_rng(ss_panel)
    k = len(a)
    s = rng.uniform(*phi_range, size=n_subjects) if true_phi is None else None
    V = rng.standard_normal((n_subjects, k))
    V -= np.outer(V @ a / (a @ a), a)
    eps = rng.standard_normal(n_subjects) * noise_sd
    if true_phi is not None:
        phi = np.asarray(true_phi, dtype=np.float64)
        s = phi - eps
    else:
        phi = s + eps
    X = np.outer(s, a / (a @ a)) + 0.3 * V

    n_trials = sum(REPS.values()) * len(MEANS_PCT) * len(SDS_PCT)
    onsets = np.arange(n_trials) * (nt * tr_s / n_trials)
    r = np.floor(onsets / tr_s).astype(int)
    subjects = tuple(f"sub{i + 1:02d}" for i in range(n_subjects))
    loadings, lag_means, tables = {}, np.zeros((n_subjects, k, N_LAGS)), []
    design_cond = None
    for i, (sid, ss) in enumerate(zip(subjects, ss_subj.spawn(n_subjects))):
        srng = np.random.default_rng(ss)
        trials = trial_design(srng)
        mu = np.array([t[0] for t in trials])
        sd = np.array([t[1] for t in trials])
        cond = np.array([t[2] for t in trials])
        chose = srng.random(n_trials) < choice_probability(mu, sd, phi[i], sign)
        tables.append(ChoiceTable([sid] * n_trials, np.arange(n_trials), mu, sd, cond, chose, onsets))
        if design_cond is None:
            design_cond = np.array([CONDITIONS.index(c) for c in cond])
        Zs = np.zeros((nt, k))
        for c in range(k):
            b = N_LAGS * X[i, c] * prof / prof.sum() + srng.standard_normal(N_LAGS) * distractor_sd
            lag_means[i, c] = b
            z = np.zeros(nt)
            for tau in range(N_LAGS):
                idx = r + tau + 1
                z[idx[idx < nt]] += b[tau]
            z += srng.standard_normal(nt) * series_noise_sd
            Zs[:, c] = z
        loadings[sid] = Zs
    events = EventTable(onsets, 0.0, design_cond, 1.0)
    return Panel(ChoiceTable.concat(tables), loadings, events, phi, X, lag_means, a,
                 tuple(clusters), subjects, tr_s)



@dataclass
class MethodScores:
    glm_max: float
    dsfm: float
    average_s: float
    average: float
    corr: float              # Corr(fitted loading, stimulus regressor)
    zmap: np.ndarray         # voxelwise Z on the pre-smoothed data

    def as_dict(self) -> dict[str, float]:
        return {"glm_max": self.glm_max, "dsfm": self.dsfm, "average_s": self.average_s,
                "average": self.average}


def method_zscores(sim: SimResult, knots=(2, 2, 2), L: int = 1) -> MethodScores:
    """Z-scores of the stimulus regressor under the four detection methods.

    ``glm_max``: largest voxelwise Z on pre-smoothed data; ``dsfm``: Z of the
    fitted loading on the raw data; ``average_s`` / ``average``: Z of the
    cluster mean of the smoothed / raw data.
    """
    from .dsfm import build_basis, cluster_average, fit_dsfm
    from .glm import DesignMatrix, first_level

    cfg = sim.config
    X = DesignMatrix(np.column_stack([sim.stimulus, np.ones(cfg.nt)]), ("stim", "intercept"))
    v = sim.volume
    sm = gaussian_smooth(v, cfg.fwhm_mm, cfg.kernel)
    coords = v.masked_coords()
    Y = v.masked_series()
    Ys = sm.masked_series()
    fit = fit_dsfm(Y, build_basis(coords, knots), L=L)
    z_vox = first_level(Ys, X).z[0]
    zmap = np.zeros(v.mask.shape)
    zmap[coords[:, 0], coords[:, 1], coords[:, 2]] = z_vox
    return MethodScores(
        float(z_vox.max()),
        float(first_level(fit.Z_hat[:, 0], X).z[0]),
        float(first_level(cluster_average(Ys), X).z[0]),
        float(first_level(cluster_average(Y), X).z[0]),
        float(np.corrcoef(fit.Z_hat[:, 0], sim.stimulus)[0, 1]),
        zmap,
    )
