"""End-to-end acceptance checks, one test per criterion, at the stated tolerances.

Seeds are fixed in advance (0..N-1 unless noted) and never tuned.
"""
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest

from cead.behavior import choice_probability, estimate_phi
from cead.decision import UNIFORM, loo_predict, optimize_weights
from cead.dsfm import build_basis, fit_dsfm
from cead.glm import DesignMatrix, first_level, hrf, threshold_activation
from cead.ncut import parcellate, spectral_bipartition
from cead.simgraph import SimilarityGraph, build_graph
from cead.simulate import SimConfig, even_onsets, gen_bold, gen_panel, method_zscores, smooth_noise, trial_design
from cead.glm import regressor
from cead.volume import ChoiceTable, EventTable, VolumeSeries

from oracles import canonical_min_corr, dense_ncut, exhaustive_ncut, flood_fill_components, random_connected_graph

pytestmark = pytest.mark.slow


def test_c01_setup_a_recovery(acceptance):
    t0 = time.perf_counter()
    corr = [method_zscores(gen_bold(SimConfig(setup="a", seed=s))).corr for s in range(20)]
    dt = time.perf_counter() - t0
    med = float(np.median(corr))
    acceptance.check(1, "setup (a) recovery", med >= 0.97 and dt < 60,
                     f"median corr {med:.4f} (>= 0.97), {dt:.1f}s (< 60s)")


def test_c02_setup_b_recovery(acceptance):
    corr = [method_zscores(gen_bold(SimConfig(setup="b", seed=s))).corr for s in range(20)]
    med = float(np.median(corr))
    acceptance.check(2, "setup (b) recovery", 0.5 <= med <= 0.7, f"median corr {med:.4f} in [0.50, 0.70]")


def test_c03_method_ordering(acceptance):
    scores = [method_zscores(gen_bold(SimConfig(setup="b", seed=s))) for s in range(20)]
    mean = {k: float(np.mean([s.as_dict()[k] for s in scores])) for k in scores[0].as_dict()}
    all_above = all(min(s.as_dict().values()) > 20 for s in scores)
    glm_top = np.mean([s.glm_max >= max(s.dsfm, s.average_s, s.average) for s in scores])
    ok = mean["dsfm"] > mean["average"] and all_above and glm_top >= 0.7
    detail = ", ".join(f"{k} {v:.2f}" for k, v in mean.items())
    acceptance.check(3, "method ordering on setup (b)", ok,
                     f"means {detail}; all > 20: {all_above}; GLM max largest in {glm_top:.0%}")


@pytest.mark.parametrize("setup", ["c", "d"])
def test_c04_null_setups(acceptance, setup):
    quiet = 0
    worst = -np.inf
    for s in range(40):
        sc = method_zscores(gen_bold(SimConfig(setup=setup, seed=s)))
        top = max(sc.as_dict().values())
        worst = max(worst, top)
        units = np.array([sc.dsfm, sc.average_s, sc.average])
        empty = not threshold_activation(sc.zmap, "26").any() and not threshold_activation(units).any()
        quiet += top < 3.09 and empty
    acceptance.check(4, f"null setup ({setup})", quiet / 40 >= 0.95,
                     f"max Z < 3.09 and nothing activated in {quiet}/40 seeds (>= 95%); largest Z {worst:.2f}")


def test_c05_spatial_noise_calibration(acceptance):
    e = smooth_noise((6, 7, 6), 1400, 8.0, (3.0, 3.0, 3.0), seed=0)
    r = float(np.corrcoef(e[2, 3, 2], e[3, 3, 2])[0, 1])
    acceptance.check(5, "adjacent-voxel noise correlation", abs(r - 0.97) <= 0.03, f"corr {r:.4f} (0.97 +- 0.03)")


def test_c06_hrf_values(acceptance):
    h0, hp = float(hrf(0.0)), float(hrf(5.4))
    ok = h0 == 0.0 and abs(hp - 0.9655) <= 0.0005
    acceptance.check(6, "HRF values", ok, f"h(0)={h0} (exactly 0), h(5.4)={hp:.5f} (0.9655 +- 0.0005)")


@pytest.mark.xfail(strict=True, reason="the undershoot term moves the maximum of the closed form to 5.24 s; "
                                       "see decisions ledger")
def test_c06_hrf_argmax(acceptance):
    grid = np.round(np.arange(0, 32.0001, 0.01), 2)
    peak = float(grid[np.argmax(hrf(grid))])
    acceptance.check(6, "HRF argmax", abs(peak - 5.4) < 1e-9, f"argmax on 0.01 s grid = {peak:.2f}s (target 5.40s)")


def test_c07_ncut_optimality_and_contiguity(acceptance):
    rng = np.random.default_rng(7)
    good = 0
    for i in range(200):
        W = random_connected_graph(rng, p=0.3 if i % 2 else 0.5)
        res = spectral_bipartition(SimilarityGraph.from_weights(W), seed=i)
        assert abs(res.ncut_cost - dense_ncut(W, res.side)) < 1e-9
        good += res.ncut_cost <= 1.05 * exhaustive_ncut(W)[0] + 1e-12
    contiguous = 0
    n_par = 20
    for s in range(n_par):
        r = np.random.default_rng(100 + s)
        dims = tuple(int(d) for d in r.integers(3, 7, size=3))
        mask = r.random(dims) < 0.8
        data = r.standard_normal(dims + (60,)) * mask[..., None]
        g = build_graph(VolumeSeries(data, mask))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            par = parcellate(g, int(r.integers(2, 9)), seed=s, dims=dims)
        lab = par.labels.labels
        contiguous += all(flood_fill_components(lab == k) == 1 for k in range(1, par.C + 1))
    ok = good / 200 >= 0.95 and contiguous == n_par
    acceptance.check(7, "NCUT optimality and contiguity", ok,
                     f"{good}/200 within 1.05x of exhaustive (>= 95%); {contiguous}/{n_par} parcellations contiguous")


def test_c08_dsfm_exact_recovery(acceptance):
    rng = np.random.default_rng(8)
    worst_rss, worst_corr = 0.0, 1.0
    for i in range(50):
        L = 1 + i % 2
        dims = rng.integers(3, 7, size=3)
        coords = np.argwhere(np.ones(dims, bool))
        coords = coords[rng.random(len(coords)) < 0.8]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            basis = build_basis(coords, (2, 2, 2))
        T = int(rng.integers(100, 300))
        Z = rng.standard_normal((T, L))
        A = rng.standard_normal((L + 1, basis.K))
        Y = np.column_stack([np.ones(T), Z]) @ A @ basis.psi.T
        fit = fit_dsfm(Y, basis, L=L)
        worst_rss = max(worst_rss, fit.objective)
        worst_corr = min(worst_corr, canonical_min_corr(Z, fit.Z_hat))
    ok = worst_rss < 1e-12 and worst_corr >= 0.999
    acceptance.check(8, "DSFM exact recovery", ok,
                     f"max RSS {worst_rss:.2e} (< 1e-12), min loading corr {worst_corr:.6f} (>= 0.999)")


def test_c09_glm_null_calibration(acceptance):
    rng = np.random.default_rng(9)
    stim = regressor(EventTable.from_onsets(even_onsets(64, 1400, 2.0)), 1400, 2.0)
    X = DesignMatrix(np.column_stack([stim, np.ones(1400)]), ("stim", "intercept"))
    z = first_level(rng.standard_normal((1400, 5000)), X).z[0]
    fpr = float(np.mean(z > 3.09))
    acceptance.check(9, "GLM null calibration", 0.0005 <= fpr <= 0.003, f"FPR {fpr:.4f} in [0.0005, 0.003]")


def test_c10_behavioral_consistency(acceptance):
    rng = np.random.default_rng(10)
    within = covered = 0
    n = 500
    for _ in range(n):
        phi = rng.uniform(-0.1, 1.1)
        trials = trial_design(rng)
        mu = np.array([t[0] for t in trials])
        sd = np.array([t[1] for t in trials])
        y = rng.random(len(trials)) < choice_probability(mu, sd, phi)
        ch = ChoiceTable(["s"] * len(trials), np.arange(len(trials)), mu, sd, [t[2] for t in trials],
                         y, np.zeros(len(trials)))
        a = estimate_phi(ch)
        within += abs(a.phi_hat - phi) <= 3 * a.se
        covered += a.ci95[0] <= phi <= a.ci95[1]
    ok = within / n >= 0.95 and 0.90 <= covered / n <= 0.99
    acceptance.check(10, "risk attitude recovery", ok,
                     f"within 3 se {within / n:.1%} (>= 95%), CI coverage {covered / n:.1%} in [90%, 99%]")


def test_c11_decision_oracle(acceptance):
    cov = []
    never_worse = True
    for rep in range(200):
        p = gen_panel(19, noise_sd=0.2, seed=rep)
        cov.append(loo_predict(p.phi, p.lag_means @ UNIFORM).coverage)
        if rep < 20:
            ws = optimize_weights(p.phi, p.lag_means, iters=500, seed=rep)
            never_worse &= ws.mae <= ws.uniform_mae
    p = gen_panel(19, noise_sd=0.2, seed=0, distractor_sd=0.3)
    t0 = time.perf_counter()
    ws = optimize_weights(p.phi, p.lag_means, iters=10000, seed=0)
    dt = time.perf_counter() - t0
    never_worse &= ws.mae <= ws.uniform_mae
    c = float(np.mean(cov))
    ok = 0.85 <= c <= 0.99 and never_worse and dt < 120
    acceptance.check(11, "decision pipeline oracle", ok,
                     f"LOO coverage {c:.1%} in [85%, 99%]; optimized MAE <= uniform on every seed: {never_worse}; "
                     f"10000 iterations in {dt:.2f}s (< 120s)")


def test_c12_pipeline_determinism(acceptance, tmp_path):
    sim = tmp_path / "sim"
    cead = [sys.executable, "-m", "cead.cli", "-q"]
    subprocess.run(cead + ["simulate", "--setup", "panel", "--subjects", "6", "--seed", "3", "--out", str(sim)],
                   check=True)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"volumes={sim}\nevents={sim / 'events.tsv'}\nchoices={sim / 'choices.tsv'}\n"
                   f"output={tmp_path / 'out'}\nprofile=desk\nweights=optimize\nmc_iters=2000\nseed=5\n")
    manifests = []
    for _ in range(2):
        subprocess.run(["rm", "-rf", str(tmp_path / "out")], check=True)
        subprocess.run(cead + ["pipeline", "--config", str(cfg)], check=True)
        manifests.append((tmp_path / "out" / "manifest.jsonl").read_bytes())
    n_files = manifests[0].count(b"\n") - 1
    ok = manifests[0] == manifests[1] and b'"complete": true' in manifests[0]
    acceptance.check(12, "pipeline determinism", ok, f"manifests byte-identical across reruns ({n_files} files)")
