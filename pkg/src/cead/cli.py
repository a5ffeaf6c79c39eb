"""``cead`` command line: simulate, cluster, fit, activate, phi, decide, diag, pipeline.

Exit status: 0 on success, 2 for invalid input, 3 for numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import behavior, pipeline as pl
from .errors import NumericalError, ValidationError
from .simulate import KERNEL_MODES, SETUPS, SimConfig, gen_bold, gen_panel, gen_planted_volumes
from .volume import ChoiceTable, EventTable, write_tsv, write_volume

log = logging.getLogger("cead")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _cmd_simulate(a) -> None:
    if a.setup == "panel":
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        vols, events, planted = gen_planted_volumes(a.subjects, nt=a.nt, amplitude=a.amplitude, seed=a.seed)
        for i, v in enumerate(vols, start=1):
            write_volume(v, out / f"sub{i:02d}{pl.VOLUME_SUFFIX}")
        events.write(a.events or out / "events.tsv")
        panel = gen_panel(max(a.subjects, 4), seed=a.seed, nt=a.nt)
        keep = [f"sub{i:02d}" for i in range(1, a.subjects + 1)]
        ChoiceTable.concat(panel.choices.for_subject(s) for s in keep).write(out / "choices.tsv")
        truth = a.truth or out / "truth.tsv"
        write_tsv(truth, ["x", "y", "z", "planted"], ((x, y, z, planted[x, y, z])
                                                      for x, y, z in np.ndindex(planted.shape)))
        log.info("stage=simulate setup=panel subjects=%d out=%s", a.subjects, out)
        return
    cfg = SimConfig(setup=a.setup, nt=a.nt, amplitude=a.amplitude, fwhm_mm=a.fwhm,
                    kernel=a.kernel, seed=a.seed)
    sim = gen_bold(cfg)
    write_volume(sim.volume, a.out)
    if a.events:
        sim.events.write(a.events)
    if a.truth:
        write_tsv(a.truth, ["t", "loading", "stimulus"],
                  ((t, sim.truth[t], sim.stimulus[t]) for t in range(cfg.nt)))
    log.info("stage=simulate setup=%s seed=%d out=%s", a.setup, a.seed, a.out)


def _cmd_cluster(a) -> None:
    C = a.C if a.C is not None else (20 if a.profile == "desk" else 1000)
    lab = pl.cluster_volume(a.volume, C, a.seed, a.output, a.table)
    log.info("stage=cluster C=%d clusters=%d out=%s", C, lab.n_clusters, a.output)


def _cmd_fit(a) -> None:
    sid = a.subject or pl.subject_of(Path(a.volume))
    names = [n for n in a.names.split(",") if n] if a.names else None
    got = pl.fit_subject(a.volume, a.labels, Path(a.output) / sid, a.L, a.knots, names)
    log.info("stage=fit subject=%s clusters=%d", sid, len(got))


def _cmd_activate(a) -> None:
    fits = pl.read_fits(a.fits)
    rows, group = pl.activate(fits, EventTable.read(a.events), a.conditions, a.z, a.extent)
    write_tsv(a.output, pl.ACTIVATION_HEADER, rows)
    if a.group_output and group:
        write_tsv(a.group_output, pl.GROUP_HEADER, group)
    log.info("stage=activate tests=%d activated=%d", len(rows), sum(r[-1] for r in rows))


def _cmd_phi(a) -> None:
    choices = ChoiceTable.read(a.choices)
    atts, rolling = pl.phi_stage(choices, a.logit_sign, a.window if a.rolling_output else None)
    write_tsv(a.output, behavior.PHI_HEADER, behavior.phi_rows(atts))
    if a.rolling_output:
        write_tsv(a.rolling_output, pl.ROLLING_PHI_HEADER, rolling)
    log.info("stage=phi subjects=%d flagged=%d", len(atts), sum(not x.ok for x in atts))


def _cmd_decide(a) -> None:
    fits = pl.read_fits(a.fits)
    phi = pl.read_phi(a.phi)
    events = EventTable.read(a.events)
    names = [n for n in a.clusters.split(",") if n] or None
    act = []
    if names is None:
        act, _ = pl.activate(fits, events, "all")
    rois = pl.select_rois(fits, act, names, a.n_roi)
    rows = pl.decide(phi, fits, rois, lambda s: events, a.weights, a.mc_iters, a.seed)
    write_tsv(a.output, pl.DECISION_HEADER, rows)
    log.info("stage=decide rows=%d", len(rows))


def _cmd_diag(a) -> None:
    fits = pl.read_fits(a.fits)
    windows = tuple(int(w) for w in a.windows.split(",") if w)
    rows, roll = pl.diag_stage(fits, windows)
    write_tsv(a.output, pl.DIAG_HEADER, rows)
    if a.rolling_output:
        write_tsv(a.rolling_output, pl.ROLLING_HEADER, roll)
    log.info("stage=diag series=%d", len(rows))


_PIPE_FLAGS = {
    "volumes": str, "events": str, "choices": str, "output": str, "profile": str,
    "C": int, "L": int, "knots": int, "z": float, "extent": int, "conditions": str,
    "weights": str, "mc_iters": int, "seed": int, "logit_sign": str, "window": int,
    "clusters": str, "n_roi": int, "workers": int,
}


def _cmd_pipeline(a) -> None:
    text = Path(a.config).read_text(encoding="utf-8") if a.config else ""
    overrides = {k: getattr(a, k) for k in _PIPE_FLAGS}
    cfg = pl.PipelineConfig.from_text(text, **overrides)
    if a.write_config:
        Path(a.write_config).write_text(cfg.to_text(), encoding="utf-8")
    man = pl.run_pipeline(cfg)
    log.info("stage=pipeline status=complete manifest=%s", man)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cead", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic volume or a multi-subject panel")
    s.add_argument("--setup", choices=SETUPS + ("panel",), default="b")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="volume file, or output directory for --setup panel")
    s.add_argument("--events")
    s.add_argument("--truth")
    s.add_argument("--subjects", type=int, default=4)
    s.add_argument("--nt", type=int, default=1400)
    s.add_argument("--amplitude", type=float, default=0.4)
    s.add_argument("--fwhm", type=float, default=8.0)
    s.add_argument("--kernel", choices=KERNEL_MODES, default="sigma")
    s.set_defaults(func=_cmd_simulate)

    s = sub.add_parser("cluster", help="NCUT parcellation of one volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--C", type=int)
    s.add_argument("--profile", choices=("full", "desk"), default="full")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.add_argument("--table")
    s.set_defaults(func=_cmd_cluster)

    s = sub.add_parser("fit", help="DSFM fit of every cluster of one subject")
    s.add_argument("--volume", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--L", type=int, default=1)
    s.add_argument("--knots", type=int, default=2)
    s.add_argument("--subject")
    s.add_argument("--names", help="comma-separated cluster names in label order")
    s.add_argument("--output", required=True, help="fits directory")
    s.set_defaults(func=_cmd_fit)

    s = sub.add_parser("activate", help="first-level tests of loadings (and group map)")
    s.add_argument("--fits", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--conditions", default="all")
    s.add_argument("--z", type=float, default=3.09)
    s.add_argument("--extent", type=int, default=20)
    s.add_argument("--output", required=True)
    s.add_argument("--group-output")
    s.set_defaults(func=_cmd_activate)

    s = sub.add_parser("phi", help="risk attitudes from choices")
    s.add_argument("--choices", required=True)
    s.add_argument("--window", type=int, default=100)
    s.add_argument("--logit-sign", choices=behavior.SIGN_MODES, default="inverse")
    s.add_argument("--output", required=True)
    s.add_argument("--rolling-output")
    s.set_defaults(func=_cmd_phi)

    s = sub.add_parser("decide", help="risk-attitude regression and LOO forecasts")
    s.add_argument("--phi", required=True)
    s.add_argument("--fits", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--clusters", default="")
    s.add_argument("--n-roi", type=int, default=3)
    s.add_argument("--weights", choices=("uniform", "optimize"), default="optimize")
    s.add_argument("--mc-iters", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(func=_cmd_decide)

    s = sub.add_parser("diag", help="KPSS/ADF/ACF and rolling correlations of loadings")
    s.add_argument("--fits", required=True)
    s.add_argument("--windows", default="250,500")
    s.add_argument("--output", required=True)
    s.add_argument("--rolling-output")
    s.set_defaults(func=_cmd_diag)

    s = sub.add_parser("pipeline", help="cluster -> fit -> activate -> decide")
    s.add_argument("--config")
    s.add_argument("--write-config")
    for name, typ in _PIPE_FLAGS.items():
        s.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)
    s.set_defaults(func=_cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(message)s", force=True)
    try:
        args.func(args)
    except ValidationError as exc:
        log.error("stage=%s error=%s", getattr(exc, "stage", args.command), exc)
        return EXIT_INVALID
    except NumericalError as exc:
        log.error("stage=%s error=%s", getattr(exc, "stage", args.command), exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        log.error("stage=%s error=%s", args.command, exc)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
