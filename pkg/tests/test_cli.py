import json
import warnings

import numpy as np
import pytest

from cead import pipeline as pl
from cead.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main
from cead.errors import ValidationError
from cead.volume import EventTable, read_labels, read_tsv


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["-q", "simulate", "--setup", "panel", "--subjects", "6", "--nt", "600",
                 "--seed", "2", "--out", str(d)]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def run(sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["-q", "pipeline", "--volumes", str(sim), "--events", str(sim / "events.tsv"),
                 "--choices", str(sim / "choices.tsv"), "--output", str(out), "--profile", "desk",
                 "--mc-iters", "500", "--weights", "optimize"])
    assert code == EXIT_OK
    return out


def test_config_round_trip_and_overrides():
    cfg = pl.PipelineConfig(volumes="v", events="e", C=7, z=2.5, weights="optimize", seed=3)
    again = pl.PipelineConfig.from_text(cfg.to_text())
    assert again == cfg
    assert pl.PipelineConfig.from_text(cfg.to_text(), C=9, seed=None).C == 9
    assert pl.PipelineConfig.from_text("profile=desk\n").C == 20
    assert pl.PipelineConfig.from_text("profile=desk\nC=50\n").C == 50
    assert pl.PipelineConfig.from_text("# comment\n\nL=2  # two factors\n").L == 2
    for bad in ("nonsense", "C=abc", "colour=red", "weights=best", "C=0"):
        with pytest.raises(ValidationError):
            pl.PipelineConfig.from_text(bad)


def test_missing_and_malformed_inputs_exit_2(tmp_path):
    assert main(["-q", "cluster", "--volume", str(tmp_path / "none.ceadvol"), "--output", str(tmp_path / "l")]) == EXIT_INVALID
    bad = tmp_path / "bad.ceadvol"
    bad.write_bytes(b"not a volume")
    assert main(["-q", "cluster", "--volume", str(bad), "--output", str(tmp_path / "l")]) == EXIT_INVALID
    cfg = tmp_path / "c.txt"
    cfg.write_text("volumes\n")
    assert main(["-q", "pipeline", "--config", str(cfg)]) == EXIT_INVALID


def test_rank_deficient_design_exits_3(run, tmp_path):
    ev = EventTable([10.0, 10.0, 300.0, 300.0], 0.0, [0, 1, 0, 1], 1.0)
    ev.write(tmp_path / "dup.tsv")
    code = main(["-q", "activate", "--fits", str(run / "fits"), "--events", str(tmp_path / "dup.tsv"),
                 "--conditions", "0,1", "--output", str(tmp_path / "a.tsv")])
    assert code == EXIT_NUMERICAL


def test_pipeline_outputs_and_manifest(run):
    for name in ("config.txt", "activation.tsv", "group_activation.tsv", "phi.tsv", "phi_rolling.tsv",
                 "decision.tsv", "manifest.jsonl"):
        assert (run / name).is_file(), name
    lines = [json.loads(l) for l in (run / "manifest.jsonl").read_text().splitlines()]
    assert lines[-1] == {"complete": True, "failed_stage": None}
    files = [l["path"] for l in lines[:-1]]
    assert files == sorted(files)
    for entry in lines[:3]:
        assert entry["sha256"] == pl.sha256(run / entry["path"])
    assert pl.PipelineConfig.from_text((run / "config.txt").read_text()).C == 20


def test_planted_region_activates(sim, run):
    planted = {(int(r["x"]), int(r["y"]), int(r["z"])): r["planted"] in ("1", "True", "true")
               for r in read_tsv(sim / "truth.tsv")}
    rows = read_tsv(run / "activation.tsv", pl.ACTIVATION_HEADER)
    fits = pl.read_fits(run / "fits")
    hits_in, hits_out, quiet_in, quiet_out = 0, 0, 0, 0
    for r in rows:
        f = fits[r["subject"]]
        lab = f["labels"].labels == f["label_of"][r["cluster"]]
        frac = np.mean([planted[tuple(int(c) for c in xyz)] for xyz in np.argwhere(lab)])
        active = r["activated"] in ("1", "True", "true")
        if frac > 0.5:
            hits_in += active
            quiet_in += not active
        else:
            hits_out += active
            quiet_out += not active
    assert hits_in > 0
    assert hits_in / (hits_in + hits_out) >= 0.9
    assert quiet_out / (hits_out + quiet_out) >= 0.9


def test_stage_subcommands(sim, tmp_path):
    vol = sim / "sub01.ceadvol"
    lab = tmp_path / "sub01.ceadlab"
    assert main(["-q", "cluster", "--volume", str(vol), "--C", "6", "--output", str(lab),
                 "--table", str(tmp_path / "cl.tsv")]) == EXIT_OK
    assert read_labels(lab).n_clusters == 6
    fits = tmp_path / "fits"
    assert main(["-q", "fit", "--volume", str(vol), "--labels", str(lab), "--output", str(fits)]) == EXIT_OK
    assert len(read_tsv(fits / "sub01" / "clusters.tsv", pl.FIT_HEADER)) == 6
    assert main(["-q", "activate", "--fits", str(fits), "--events", str(sim / "events.tsv"),
                 "--output", str(tmp_path / "act.tsv")]) == EXIT_OK
    assert len(read_tsv(tmp_path / "act.tsv", pl.ACTIVATION_HEADER)) == 6
    assert main(["-q", "phi", "--choices", str(sim / "choices.tsv"), "--output", str(tmp_path / "phi.tsv"),
                 "--rolling-output", str(tmp_path / "roll.tsv")]) == EXIT_OK
    assert len(read_tsv(tmp_path / "phi.tsv")) == 6
    assert main(["-q", "diag", "--fits", str(fits), "--output", str(tmp_path / "diag.tsv"),
                 "--windows", "250"]) == EXIT_OK
    assert len(read_tsv(tmp_path / "diag.tsv", pl.DIAG_HEADER)) >= 6


def test_decide_subcommand(sim, run, tmp_path):
    code = main(["-q", "decide", "--phi", str(run / "phi.tsv"), "--fits", str(run / "fits"),
                 "--events", str(sim / "events.tsv"), "--n-roi", "1", "--mc-iters", "200",
                 "--output", str(tmp_path / "dec.tsv")])
    assert code == EXIT_OK
    rows = read_tsv(tmp_path / "dec.tsv", pl.DECISION_HEADER)
    assert {r["section"] for r in rows} >= {"full"}


def test_simulate_single_setup(tmp_path):
    out = tmp_path / "b.ceadvol"
    assert main(["-q", "simulate", "--setup", "c", "--nt", "50", "--out", str(out),
                 "--events", str(tmp_path / "e.tsv"), "--truth", str(tmp_path / "t.tsv")]) == EXIT_OK
    assert out.is_file() and len(read_tsv(tmp_path / "t.tsv")) == 50
