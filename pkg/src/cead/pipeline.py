"""Stage functions behind the command line: cluster, fit, activate, phi, decide, diag.

Every stage reads and writes plain files so that it can run on its own or as
part of :func:`run_pipeline`.  Outputs depend only on inputs, configuration
and seed; worker threads never change the order of any reduction.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import behavior, decision, diagnostics, glm
from .dsfm import build_basis, fit_dsfm
from .errors import CeadError, ValidationError
from .ncut import parcellate
from .simgraph import build_graph
from .volume import (
    ChoiceTable,
    EventTable,
    LabelVolume,
    read_labels,
    read_tsv,
    read_volume,
    write_labels,
    write_tsv,
)

log = logging.getLogger("cead")

VOLUME_SUFFIX = ".ceadvol"
LABEL_SUFFIX = ".ceadlab"
ACTIVATION_HEADER = ["subject", "cluster", "factor", "regressor", "beta", "se", "t", "z", "p", "activated"]
GROUP_HEADER = ["x", "y", "z", "t", "z_score", "activated"]
CLUSTER_HEADER = ["cluster", "label", "n_voxels", "creation_cost"]
FIT_HEADER = ["cluster", "label", "n_voxels", "n_basis", "rss", "iterations", "converged", "reduced_basis"]
DECISION_HEADER = ["section", "name", "estimate", "se", "t", "p", "lo", "hi", "flag"]
DIAG_HEADER = ["subject", "cluster", "factor", "kpss", "adf", "acf1", "kpss_reject_5", "adf_reject_5"]
ROLLING_PHI_HEADER = ["subject", "index", "phi", "se", "flag"]
ROLLING_HEADER = ["subject", "cluster_a", "cluster_b", "window", "index", "corr"]


@dataclass
class PipelineConfig:
    """Flat pipeline configuration; serialized as ``key=value`` lines."""

    volumes: str = ""
    events: str = ""
    choices: str = ""
    output: str = "cead_out"
    profile: str = "full"
    C: int = 1000
    L: int = 1
    knots: int = 2
    z: float = 3.09
    extent: int = 20
    conditions: str = "all"
    weights: str = "uniform"
    mc_iters: int = 10000
    seed: int = 0
    logit_sign: str = "inverse"
    window: int = 100
    clusters: str = ""
    n_roi: int = 3
    workers: int = 1

    def __post_init__(self):
        if self.profile not in ("full", "desk"):
            raise ValidationError("profile must be 'full' or 'desk'")
        if self.weights not in ("uniform", "optimize"):
            raise ValidationError("weights must be 'uniform' or 'optimize'")
        if self.logit_sign not in behavior.SIGN_MODES:
            raise ValidationError(f"logit_sign must be one of {behavior.SIGN_MODES}")
        for name in ("C", "L", "knots", "mc_iters", "workers", "n_roi"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.extent < 0:
            raise ValidationError("extent must be >= 0")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "PipelineConfig":
        kw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"config line {lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            kw[k.replace("-", "_")] = v
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(kw)

    @classmethod
    def from_mapping(cls, kw: dict) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kw) - set(types)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        out = {}
        for k, v in kw.items():
            t = types[k]
            try:
                out[k] = int(v) if t in (int, "int") else float(v) if t in (float, "float") else str(v)
            except ValueError as exc:
                raise ValidationError(f"config key {k}: cannot parse {v!r}") from exc
        if out.get("profile") == "desk" and "C" not in kw:
            out["C"] = 20
        return cls(**out)


# -- helpers -----------------------------------------------------------------

def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0] % (2**31))


def cluster_name(label: int) -> str:
    return f"c{label:04d}"


def _pmap(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


class Stage:
    """Context manager logging one line per stage with wall time and metrics."""

    def __init__(self, name: str):
        self.name = name
        self.metrics: dict = {}

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage=%s status=start", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        dt = time.perf_counter() - self.t0
        extra = " ".join(f"{k}={v}" for k, v in self.metrics.items())
        status = "ok" if exc is None else f"error error={type(exc).__name__}"
        log.info("stage=%s status=%s wall_s=%.3f %s", self.name, status, dt, extra)
        if exc is not None and isinstance(exc, CeadError) and not getattr(exc, "stage", None):
            exc.stage = self.name
        return False


def list_volumes(spec: str) -> list[Path]:
    """Volumes from a directory, a single file or a comma-separated list."""
    if not spec:
        raise ValidationError("no input volumes given")
    paths: list[Path] = []
    for part in spec.split(","):
        p = Path(part.strip())
        if p.is_dir():
            paths.extend(sorted(p.glob(f"*{VOLUME_SUFFIX}")))
        elif p.is_file():
            paths.append(p)
        else:
            raise ValidationError(f"volume path not found: {p}")
    if not paths:
        raise ValidationError(f"no {VOLUME_SUFFIX} files in {spec}")
    return paths


def subject_of(path: Path) -> str:
    return path.name[: -len(VOLUME_SUFFIX)] if path.name.endswith(VOLUME_SUFFIX) else path.stem


# -- cluster -----------------------------------------------------------------

def cluster_volume(volume_path, C: int, seed: int, out_labels, out_table=None) -> LabelVolume:
    v = read_volume(volume_path)
    g = build_graph(v)
    par = parcellate(g, C, seed=seed, dims=v.mask.shape)
    for w in par.warnings:
        log.warning("cluster %s: %s", volume_path, w)
    par.labels.check_invariants()
    write_labels(par.labels, out_labels)
    if out_table is not None:
        write_tsv(out_table, CLUSTER_HEADER,
                  ((cluster_name(k), k, n, c) for k, (n, c) in
                   enumerate(zip(par.sizes, par.creation_cost), start=1)))
    return par.labels


# -- fit -----------------------------------------------------------------------

def fit_subject(volume_path, labels_path, out_dir, L: int = 1, knots: int = 2, names=None) -> list[str]:
    """DSFM fit of every cluster; writes loadings, coefficients and a summary table."""
    import warnings

    v = read_volume(volume_path)
    lab = read_labels(labels_path)
    if lab.dims != v.mask.shape:
        raise ValidationError("label grid does not match the volume")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(lab, out / f"labels{LABEL_SUFFIX}")
    coords = v.masked_coords()
    Y = v.masked_series()
    node_lab = lab.labels[coords[:, 0], coords[:, 1], coords[:, 2]]
    C = lab.n_clusters
    names = list(names) if names else [cluster_name(k) for k in range(1, C + 1)]
    if len(names) != C:
        raise ValidationError(f"{len(names)} cluster names for {C} clusters")
    summary = []
    for k, name in enumerate(names, start=1):
        sel = node_lab == k
        if not sel.any():
            raise ValidationError(f"cluster {k} has no masked voxels")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            basis = build_basis(coords[sel], (knots,) * 3)
        fit = fit_dsfm(Y[:, sel], basis, L=L)
        write_tsv(out / f"{name}_loadings.tsv", ["t"] + [f"z{l + 1}" for l in range(L)],
                  ([t, *fit.Z_hat[t]] for t in range(len(fit.Z_hat))))
        write_tsv(out / f"{name}_coefficients.tsv", ["term"] + [f"a{j + 1}" for j in range(basis.K)],
                  ([("intercept" if i == 0 else f"z{i}"), *fit.A_hat[i]] for i in range(L + 1)))
        summary.append((name, k, int(sel.sum()), basis.K, fit.objective, fit.iterations,
                        fit.converged, basis.reduced))
    write_tsv(out / "clusters.tsv", FIT_HEADER, summary)
    write_tsv(out / "meta.tsv", ["key", "value"], [("tr_s", v.tr_s), ("nt", v.nt)])
    return names


def read_fits(fits_dir) -> dict[str, dict]:
    """subject -> {"names": [...], "labels": LabelVolume, "Z": {name: (T, L) array}}."""
    root = Path(fits_dir)
    subs = sorted(p for p in root.iterdir() if (p / "clusters.tsv").is_file()) if root.is_dir() else []
    if not subs:
        raise ValidationError(f"no fitted subjects under {fits_dir}")
    out = {}
    for sdir in subs:
        rows = read_tsv(sdir / "clusters.tsv", FIT_HEADER)
        names = [r["cluster"] for r in rows]
        Z = {}
        for n in names:
            body = read_tsv(sdir / f"{n}_loadings.tsv")
            cols = [c for c in body[0] if c != "t"] if body else []
            Z[n] = np.array([[float(r[c]) for c in cols] for r in body])
        meta = {r["key"]: r["value"] for r in read_tsv(sdir / "meta.tsv", ["key", "value"])}
        out[sdir.name] = {
            "names": names,
            "tr_s": float(meta["tr_s"]),
            "labels": read_labels(sdir / f"labels{LABEL_SUFFIX}"),
            "Z": Z,
            "label_of": {r["cluster"]: int(r["label"]) for r in rows},
        }
    return out


# -- activate ------------------------------------------------------------------

def parse_conditions(spec: str):
    """``all`` pools every condition into one regressor; ``0,2`` gives one each."""
    if spec.strip() == "all":
        return None, True
    try:
        return [int(c) for c in spec.split(",") if c.strip()], False
    except ValueError as exc:
        raise ValidationError(f"bad condition list {spec!r}") from exc


def activate(fits: dict, events: EventTable, conditions: str = "all",
             z_thresh: float = glm.Z_THRESH, extent: int = glm.EXTENT):
    """First-level tests of every loading series, plus a voxel-level group map.

    Returns ``(rows, group_rows)``; ``group_rows`` is empty for fewer than 3
    subjects or when subjects do not share a grid.
    """
    conds, pool = parse_conditions(conditions)
    rows = []
    beta_maps = []
    for sid, f in fits.items():
        nt = len(next(iter(f["Z"].values())))
        X = glm.make_design(events, nt, f["tr_s"], conds, pool=pool)
        bmap = np.zeros(f["labels"].dims)
        for name in f["names"]:
            Z = f["Z"][name]
            for l in range(Z.shape[1]):
                res = glm.first_level(Z[:, l], X)
                for j, reg in enumerate(X.names):
                    if reg == "intercept":
                        continue
                    z = float(res.z[j])
                    p = float(stats.t.sf(res.t[j], res.df))
                    act = bool(glm.threshold_activation(np.array([z]), None, z_thresh)[0])
                    rows.append((sid, name, l + 1, reg, res.beta[j], res.se[j], res.t[j], z, p, act))
                    if l == 0 and j == 0:
                        bmap[f["labels"].labels == f["label_of"][name]] = res.beta[j]
        beta_maps.append(bmap)
    group_rows = []
    dims = {b.shape for b in beta_maps}
    if len(beta_maps) >= 3 and len(dims) == 1:
        B = np.stack(beta_maps)
        inside = next(iter(fits.values()))["labels"].labels > 0
        t, zg = glm.group_level_map(B)
        zg = np.where(inside, zg, 0.0)
        active = glm.threshold_activation(zg, "26", z_thresh, extent)
        for x, y, zz in zip(*np.nonzero(inside)):
            group_rows.append((x, y, zz, t[x, y, zz], zg[x, y, zz], bool(active[x, y, zz])))
    return rows, group_rows


# -- phi -----------------------------------------------------------------------

def phi_stage(choices: ChoiceTable, sign: str, window: int | None = None, workers: int = 1):
    subs = choices.subjects()
    atts = _pmap(lambda s: behavior.estimate_phi(choices.for_subject(s), sign, s), subs, workers)
    rolling = []
    if window:
        for s in subs:
            ch = choices.for_subject(s)
            if window <= len(ch):
                for i, a in enumerate(behavior.rolling_phi(ch, window, sign)):
                    rolling.append((s, i, a.phi_hat, a.se, a.flag or "ok"))
    return atts, rolling


def read_phi(path) -> dict[str, float]:
    rows = read_tsv(path, behavior.PHI_HEADER)
    return {r["subject"]: float(r["phi"]) for r in rows if r["flag"] == "ok"}


# -- decide ----------------------------------------------------------------------

def select_rois(fits: dict, activation_rows, names: list[str] | None, n_roi: int) -> dict[str, list[str]]:
    """Per subject, the named clusters or else the ``n_roi`` most activated ones."""
    out = {}
    for sid, f in fits.items():
        if names:
            missing = [n for n in names if n not in f["Z"]]
            if missing:
                raise ValidationError(f"subject {sid} lacks clusters {missing}")
            out[sid] = list(names)
            continue
        zs = {r[1]: r[7] for r in activation_rows if r[0] == sid and r[2] == 1}
        if not zs:
            zs = {n: 0.0 for n in f["names"]}
        ranked = sorted(f["names"], key=lambda n: (-zs.get(n, -np.inf), f["label_of"][n]))
        out[sid] = ranked[:n_roi]
    return out


def decide(phi: dict[str, float], fits: dict, rois: dict[str, list[str]], events_for,
           weights_mode: str = "uniform", mc_iters: int = 10000, seed: int = 0) -> list[tuple]:
    subjects = [s for s in fits if s in phi]
    if len(subjects) < 4:
        raise ValidationError(f"decision step needs >= 4 subjects with phi, found {len(subjects)}")
    k = len(rois[subjects[0]])
    if any(len(rois[s]) != k for s in subjects):
        raise ValidationError("subjects have different numbers of regions")
    reg_names = list(rois[subjects[0]]) if all(rois[s] == rois[subjects[0]] for s in subjects) \
        else [f"roi{i + 1}" for i in range(k)]
    y = np.array([phi[s] for s in subjects])
    lag = np.zeros((len(subjects), k, decision.N_LAGS))
    for i, s in enumerate(subjects):
        ev = events_for(s)
        for c, name in enumerate(rois[s]):
            lag[i, c] = decision.reaction_stat(fits[s]["Z"][name][:, 0], ev, fits[s]["tr_s"]).lag_means
    rows: list[tuple] = []
    if weights_mode == "optimize":
        ws = decision.optimize_weights(y, lag, mc_iters, seed)
        w = ws.weights
        rows.append(("weights", "loo_mae_uniform", ws.uniform_mae, "", "", "", "", "", ""))
        rows.append(("weights", "loo_mae_selected", ws.mae, "", "", "", "", "", f"candidate={ws.index}"))
    else:
        w = decision.UNIFORM
    for t, wt in enumerate(w, start=1):
        rows.append(("weights", f"w{t}", wt, "", "", "", "", "", ""))
    X = lag @ w
    for s, name in zip(subjects, [rois[s] for s in subjects]):
        rows.append(("roi", s, "", "", "", "", "", "", ",".join(name)))
    full, reduced, keep = decision.reduce_model(y, X, reg_names)
    for tag, fit in (("full", full), ("reduced", reduced)):
        if fit is None:
            rows.append((tag, "none", "", "", "", "", "", "", "no significant regressor"))
            continue
        for n, b, se, t, p in zip(fit.names, fit.coef, fit.se, fit.t, fit.p):
            rows.append((tag, n, b, se, t, p, "", "", ""))
        rows.append((tag, "r2", fit.r2, "", "", "", "", "", ""))
        rows.append((tag, "adj_r2", fit.adj_r2, "", "", "", "", "", ""))
    cols = keep if keep else list(range(k))
    if len(subjects) - 1 - len(cols) >= 1:
        loo = decision.loo_predict(y, X[:, cols])
        for s, yy, p, lo, hi, ins in zip(subjects, y, loo.predicted, loo.lo, loo.hi, loo.inside):
            rows.append(("loo", s, p, "", "", "", lo, hi, "inside" if ins else "outside"))
        rows.append(("loo", "mae", loo.mae, "", "", "", "", "", ""))
    return rows


# -- diag ----------------------------------------------------------------------

def diag_stage(fits: dict, windows=(250, 500)):
    rows, roll = [], []
    for sid, f in fits.items():
        for name in f["names"]:
            Z = f["Z"][name]
            for l in range(Z.shape[1]):
                try:
                    rep = diagnostics.diagnose(Z[:, l])
                except ValidationError as exc:
                    log.warning("diag %s/%s: %s", sid, name, exc)
                    continue
                rows.append((sid, name, l + 1, rep.kpss_stat, rep.adf_stat, rep.acf[1],
                             rep.kpss_reject_5, rep.adf_reject_5))
        names = f["names"]
        for a in range(len(names)):
            for b in range(a + 1, len(names)):
                za, zb = f["Z"][names[a]][:, 0], f["Z"][names[b]][:, 0]
                for w in windows:
                    if w <= len(za):
                        for i, r in enumerate(diagnostics.rolling_corr(za, zb, w)):
                            roll.append((sid, names[a], names[b], w, i, r))
    return rows, roll


# -- manifest and full run -------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, complete: bool, failed_stage: str | None = None) -> Path:
    out_dir = Path(out_dir)
    man = out_dir / "manifest.jsonl"
    files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p != man)
    lines = [json.dumps({"path": p.relative_to(out_dir).as_posix(), "sha256": sha256(p),
                         "bytes": p.stat().st_size}, sort_keys=True) for p in files]
    lines.append(json.dumps({"complete": complete, "failed_stage": failed_stage}, sort_keys=True))
    man.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return man


def run_pipeline(cfg: PipelineConfig) -> Path:
    """cluster -> fit -> activate -> (phi -> decide) for every subject.

    Returns the manifest path.  On failure the manifest is still written,
    marked incomplete with the failing stage, and the error re-raised.
    """
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8", newline="\n")
    stage_name = "setup"
    try:
        vols = list_volumes(cfg.volumes)
        subjects = [subject_of(p) for p in vols]
        if len(set(subjects)) != len(subjects):
            raise ValidationError("duplicate subject names among volumes")
        events = EventTable.read(cfg.events)

        stage_name = "cluster"
        with Stage("cluster") as st:
            (out / "clusters").mkdir(exist_ok=True)

            def do_cluster(item):
                i, p = item
                sid = subject_of(p)
                cluster_volume(p, cfg.C, derive_seed(cfg.seed, i), out / "clusters" / f"{sid}{LABEL_SUFFIX}",
                               out / "clusters" / f"{sid}_clusters.tsv")
            _pmap(do_cluster, enumerate(vols), cfg.workers)
            st.metrics.update(subjects=len(vols), C=cfg.C)

        stage_name = "fit"
        with Stage("fit") as st:
            _pmap(lambda p: fit_subject(p, out / "clusters" / f"{subject_of(p)}{LABEL_SUFFIX}",
                                        out / "fits" / subject_of(p), cfg.L, cfg.knots), vols, cfg.workers)
            st.metrics.update(L=cfg.L, knots=cfg.knots)

        stage_name = "activate"
        with Stage("activate") as st:
            fits = read_fits(out / "fits")
            rows, group = activate(fits, events, cfg.conditions, cfg.z, cfg.extent)
            write_tsv(out / "activation.tsv", ACTIVATION_HEADER, rows)
            if group:
                write_tsv(out / "group_activation.tsv", GROUP_HEADER, group)
            st.metrics.update(tests=len(rows), activated=sum(r[-1] for r in rows))

        if cfg.choices:
            stage_name = "phi"
            with Stage("phi") as st:
                choices = ChoiceTable.read(cfg.choices)
                atts, rolling = phi_stage(choices, cfg.logit_sign, cfg.window, cfg.workers)
                write_tsv(out / "phi.tsv", behavior.PHI_HEADER, behavior.phi_rows(atts))
                write_tsv(out / "phi_rolling.tsv", ROLLING_PHI_HEADER, rolling)
                st.metrics.update(subjects=len(atts), flagged=sum(not a.ok for a in atts))

            stage_name = "decide"
            with Stage("decide") as st:
                phi = {a.subject_id: a.phi_hat for a in atts if a.ok}
                names = [n for n in cfg.clusters.split(",") if n] or None
                rois = select_rois(fits, rows, names, cfg.n_roi)

                def events_for(sid):
                    ch = choices.for_subject(sid)
                    return EventTable.from_onsets(np.sort(ch.onset_s))
                drows = decide(phi, fits, rois, events_for, cfg.weights, cfg.mc_iters, cfg.seed)
                write_tsv(out / "decision.tsv", DECISION_HEADER, drows)
                st.metrics.update(rows=len(drows))
    except Exception:
        write_manifest(out, False, stage_name)
        raise
    return write_manifest(out, True)
