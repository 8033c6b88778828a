"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines are printed even with output capture on) or directly
with ``python tests/test_acceptance.py``.
"""
import json
import math
import os
import subprocess
import sys
import tempfile
import time

import numpy as np
import pytest
import scipy.linalg

sys.path.insert(0, os.path.dirname(__file__))

from aeromag import cli
from aeromag.classifier import TrainingConfig, gradient_check, init_model, make_blobs, predict, train_mlp
from aeromag.euler import EulerConfig, SolutionSet, euler_sweep
from aeromag.filters import derivative, upward_continue
from aeromag.geodata import Grid, GridGeoref
from aeromag.pipeline import preset_config, run_pipeline
from aeromag.products import ProfileSpec, depth_histogram, extract_profile
from aeromag.spatialstats import csr_tests, descriptive_stats, pca
from aeromag.synthetics import DipoleSource, HomogeneousSource, dipole_tmi, homogeneous_field, synth_homogeneous
from conftest import interior, rel_l2

# Tolerances and budgets, as stated by the acceptance criteria.
EXACT_POS_REL = 1e-6
EXACT_RMS = 1e-9
EXACT_RUNTIME_S = 1.0
SELECTIVITY_FRACTION = 0.95
NOISY_DEPTH_REL = 0.10
NOISY_RUNTIME_S = 60.0
CSR_BAND = (0.95, 1.05)
LATTICE_TOL = 1e-9
PCA_TRACE_REL = 1e-9
PCA_ORTHO = 1e-9
PCA_ORACLE = 1e-8
GRAD_CHECK_MAX = 1e-5
BLOB_ACCURACY = 0.95
SEMIGROUP_REL = 1e-6
DERIVATIVE_REL = 1e-3

# Expected row labels of the statistics report, in order.
TABLE_LABELS = [
    "1%-tile", "5%-tile", "10%-tile", "25%-tile", "50%-tile", "75%-tile", "90%-tile", "95%-tile",
    "99%-tile", "Minimum", "Maximum", "Mean", "Median", "Geometric Mean", "Harmonic Mean",
    "Root Mean Square", "Trim Mean (10%)", "Interquartile Mean", "Midrange", "Winsorized Mean",
    "TriMean", "Variance", "Standard Deviation", "Interquartile Range", "Range", "Mean Difference",
    "Median Abs. Deviation", "Average Abs. Deviation", "Quartile Dispersion", "Relative Mean Diff.",
    "Standard Error", "Coef. of Variation", "Skewness", "Kurtosis", "Sum", "Sum Absolute",
    "Sum Squares", "Mean Square",
]


def homogeneous_n2():
    g = GridGeoref(0.0, 0.0, 100.0, 128, 128)
    x, y = g.cell_center(64, 64)
    src = HomogeneousSource(x, y, 200.0, 1000.0 * 200.0**2, 2.0)
    return src, synth_homogeneous(src, g, gradients=True)


def criterion_1():
    src, grids = homogeneous_n2()
    t = time.perf_counter()
    sols = euler_sweep(*grids)
    elapsed = time.perf_counter() - t
    pos_err = max(
        np.max(np.abs(sols.x0 - src.x0)) / abs(src.x0),
        np.max(np.abs(sols.y0 - src.y0)) / abs(src.y0),
        np.max(np.abs(sols.z0 - src.z0)) / src.z0,
    )
    worst_rms = float(sols.rms.max())
    ok = len(sols) > 0 and pos_err <= EXACT_POS_REL and worst_rms <= EXACT_RMS and elapsed < EXACT_RUNTIME_S
    return ok, (f"{len(sols)} solutions, max position err {pos_err:.2e} rel, max rms {worst_rms:.2e}, "
                f"sweep {elapsed:.2f} s on 128x128")


def criterion_2():
    _, grids = homogeneous_n2()
    # open every acceptance gate so each window reports its minimum-rms index
    cfg = EulerConfig(rms_accept=1e300, max_depth=1e300, depth_uncertainty_max=1e300)
    sols = euler_sweep(*grids, config=cfg)
    n_windows = sols.provenance["n_windows"]
    frac = float(np.sum(sols.si == 2.0)) / n_windows
    return frac >= SELECTIVITY_FRACTION, f"{frac:.4f} of {n_windows} windows select si = 2.0"


def criterion_3():
    cfg = preset_config("noisy_survey", seed=7)
    src = cfg["input"]["sources"][0]
    with tempfile.TemporaryDirectory() as out:
        t = time.perf_counter()
        run_pipeline(cfg, out)
        elapsed = time.perf_counter() - t
        with open(os.path.join(out, "summary.json")) as f:
            summary = json.load(f)
    top = summary["clusters"][0]
    depth_err = abs(top["z0"] - src["z0"]) / src["z0"]
    ok = (summary["modal_si"] == 3.0 and top["modal_si"] == 3.0 and depth_err <= NOISY_DEPTH_REL
          and elapsed < NOISY_RUNTIME_S)
    return ok, (f"modal si {summary['modal_si']}, top cluster si {top['modal_si']} at z0 {top['z0']:.1f} m "
                f"({depth_err:.1%} off), run {elapsed:.1f} s on 256x256")


def criterion_4():
    cfg = EulerConfig()
    snap = cfg.to_dict()
    ok = (snap["window_size"] == 3 and snap["si_set"] == [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
          and snap["rms_accept"] == 8.9e-3)
    return ok, f"window {snap['window_size']}, si_set {snap['si_set']}, rms_accept {snap['rms_accept']}"


def criterion_5():
    rs, ss = [], []
    n = 1000
    for seed in range(100):
        xy = np.random.default_rng(seed).uniform(0.0, 1000.0, size=(n, 2))
        rep = csr_tests(xy, area_m2=1e6)
        rs.append(rep.clark_evans)
        ss.append(rep.skellam / (2 * n))
    lat = np.array([(float(i), float(j)) for i in range(3) for j in range(3)])
    rep = csr_tests(lat)
    mr, ms = float(np.mean(rs)), float(np.mean(ss))
    ok = (CSR_BAND[0] <= mr <= CSR_BAND[1] and CSR_BAND[0] <= ms <= CSR_BAND[1]
          and abs(rep.clark_evans - 3.0) <= LATTICE_TOL and abs(rep.lambda_intensity - 2.25) <= LATTICE_TOL)
    return ok, (f"mean R {mr:.4f}, mean S/2n {ms:.4f}; lattice R {rep.clark_evans:.12g}, "
                f"lambda {rep.lambda_intensity:.12g}")


def criterion_6():
    n = 5000
    s = descriptive_stats(np.full(n, 100.0))
    rows = json.loads(s.to_json())
    pct_ok = all(rows[f"{p}%-tile"] == 100.0 for p in (1, 5, 10, 25, 50, 75, 90, 95, 99))
    ok = (list(rows) == TABLE_LABELS and pct_ok and rows["Variance"] == 0.0 and rows["Sum"] == 100.0 * n
          and rows["Minimum"] == rows["Maximum"] == rows["Mean"] == 100.0)
    return ok, (f"{len(rows)} rows, labels match: {list(rows) == TABLE_LABELS}, percentiles all 100: {pct_ok}, "
                f"variance {rows['Variance']}, sum {rows['Sum']:.0f}")


def criterion_7():
    worst_trace = worst_ortho = worst_oracle = 0.0
    for seed in range(50):
        r = np.random.default_rng(1000 + seed)
        X = r.normal(size=(20, 3)) @ r.normal(size=(3, 3))
        res = pca(X)
        C = np.cov(X, rowvar=False, ddof=1)
        w, V = scipy.linalg.eigh(C)
        order = np.argsort(w)[::-1]
        w, V = w[order], V[:, order]
        for j in range(3):
            if V[np.argmax(np.abs(V[:, j])), j] < 0:
                V[:, j] = -V[:, j]
        worst_trace = max(worst_trace, abs(res.eigenvalues.sum() - np.trace(C)) / np.trace(C))
        worst_ortho = max(worst_ortho, np.abs(res.loadings.T @ res.loadings - np.eye(3)).max())
        worst_oracle = max(worst_oracle, np.abs(res.eigenvalues - w).max() / w[0],
                           np.abs(res.loadings - V).max())
    ok = worst_trace <= PCA_TRACE_REL and worst_ortho <= PCA_ORTHO and worst_oracle <= PCA_ORACLE
    return ok, (f"trace err {worst_trace:.1e}, orthonormality err {worst_ortho:.1e}, "
                f"oracle err {worst_oracle:.1e} over 50 matrices")


def criterion_8():
    r = np.random.Generator(np.random.Philox(key=2024))
    model = init_model(r, 6, 100, 6)
    model.b1 = r.normal(scale=0.1, size=100)
    model.b2 = r.normal(scale=0.1, size=6)
    X = r.normal(size=(32, 6))
    y = r.integers(0, 6, 32)
    gc = gradient_check(model, X, y)
    Xb, yb = make_blobs(100, seed=17)
    cfg = TrainingConfig(seed=9, max_epochs=300)
    m1, h1 = train_mlp(Xb, yb, cfg)
    m2, _ = train_mlp(Xb, yb, cfg)
    same = np.array_equal(m1.flat(), m2.flat())
    Xh, yh = make_blobs(50, seed=18)
    held = float(np.mean(np.argmax(predict(m1, Xh), axis=1) == yh))
    ok = gc <= GRAD_CHECK_MAX and h1.validation_accuracy >= BLOB_ACCURACY and same
    return ok, (f"6-100-6 gradient check {gc:.2e}, blob validation accuracy {h1.validation_accuracy:.3f} "
                f"(held-out {held:.3f}), reproducible: {same}")


def criterion_9():
    g = GridGeoref(0.0, 0.0, 100.0, 256, 256)
    X, Y = g.mesh()
    cx, cy = g.cell_center(128, 128)
    # semigroup on a dipole anomaly
    T = Grid(g, dipole_tmi(DipoleSource(cx, cy, 400.0, 1e10, 60.0, 5.0), X, Y, 60.0, 5.0))
    semi = rel_l2(interior(upward_continue(upward_continue(T, 150.0), 150.0).values),
                  interior(upward_continue(T, 300.0).values))
    # derivatives of a harmonic stack of unit-index poles, shallowest at z0 = 400 m = 4 cells
    fields = np.zeros((4,) + g.shape)
    for k, a in enumerate((1e6, -2e6, 1e6)):
        fields += np.array(homogeneous_field(HomogeneousSource(cx, cy, 400.0 + 200.0 * k, a, 1.0), X, Y))
    Tg = Grid(g, fields[0])
    errs = {a: rel_l2(interior(derivative(Tg, a).values), interior(ref))
            for a, ref in zip("xyz", fields[1:])}
    # horizontal derivatives of an index-2 source, also at cell = z0/4 (its r**-2 field is
    # not harmonic, so the vertical operator does not apply to it)
    g2 = GridGeoref(0.0, 0.0, 50.0, 128, 128)
    T2, Tx2, Ty2, _ = homogeneous_field(HomogeneousSource(*g2.cell_center(64, 64), 200.0, 1e8, 2.0), *g2.mesh())
    G2 = Grid(g2, T2)
    for a, ref in (("x", Tx2), ("y", Ty2)):
        errs[f"{a} (index 2)"] = rel_l2(interior(derivative(G2, a).values), interior(ref))
    ok = semi <= SEMIGROUP_REL and max(errs.values()) <= DERIVATIVE_REL
    return ok, (f"semigroup {semi:.1e}; derivatives at cell = z0/4: "
                + ", ".join(f"d{a} {e:.1e}" for a, e in errs.items()))


def criterion_10():
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = os.path.join(tmp, "noisy.json")
        with open(cfg_path, "w") as f:
            json.dump(preset_config("noisy_survey", seed=7), f)
        outs = []
        for threads in (1, 8):
            out = os.path.join(tmp, f"t{threads}")
            code = subprocess.run(
                [sys.executable, "-m", "aeromag", "pipeline", "--config", cfg_path, "--out", out,
                 "--threads", str(threads)],
                capture_output=True, text=True,
            ).returncode
            if code != 0:
                return False, f"pipeline exited with {code} at --threads {threads}"
            with open(os.path.join(out, "solutions.csv"), "rb") as f:
                sol = f.read()
            with open(os.path.join(out, "manifest.json"), "rb") as f:
                man = f.read()
            outs.append((sol, man))
    same_sol = outs[0][0] == outs[1][0]
    same_man = outs[0][1] == outs[1][1]
    n = outs[0][0].count(b"\n") - 1
    return same_sol and same_man, f"{n} solutions; CSV identical: {same_sol}, manifest identical: {same_man}"


def criterion_11():
    mismatches = 0
    for seed in range(5):
        r = np.random.default_rng(seed)
        n = 1000
        x, y, z = r.uniform(0, 5000, n), r.uniform(0, 5000, n), r.uniform(0, 1500, n)
        s = SolutionSet(x, y, z, np.ones(n), np.zeros(n), np.zeros(n), np.zeros(n), np.arange(n), np.zeros(n, int))
        for axis, cross in (("east_west", y), ("north_south", x)):
            sec = extract_profile(s, ProfileSpec(axis, 2500.0, 250.0))
            brute = [i for i in range(n) if abs(cross[i] - 2500.0) <= 250.0]
            mismatches += sorted(sec.index.tolist()) != brute
        h = depth_histogram(s, 50.0)
        brute_counts = np.zeros(h.counts.size, dtype=int)
        for v in z:
            brute_counts[int(v // 50.0)] += 1
        mismatches += not np.array_equal(h.counts, brute_counts)
        for d in np.linspace(0, 1500, 31):
            mismatches += h.cumulative_fraction(d) != sum(v <= d for v in z) / n
    zc = np.array([300.0] * 90 + [900.0] * 10)
    s = SolutionSet(np.zeros(100), np.zeros(100), zc, np.ones(100), np.zeros(100), np.zeros(100),
                    np.zeros(100), np.arange(100), np.zeros(100, int))
    frac = depth_histogram(s).cumulative_fraction(650.0)
    return mismatches == 0 and frac == 0.9, f"{mismatches} oracle mismatches; cumulative_fraction(650) = {frac!r}"


CRITERIA = [
    (1, "Euler exactness", criterion_1),
    (2, "SI selectivity", criterion_2),
    (3, "noisy end-to-end", criterion_3),
    (4, "default configuration", criterion_4),
    (5, "CSR calibration", criterion_5),
    (6, "descriptive schema", criterion_6),
    (7, "PCA", criterion_7),
    (8, "classifier", criterion_8),
    (9, "filters", criterion_9),
    (10, "determinism", criterion_10),
    (11, "products", criterion_11),
]


def line(num, name, ok, detail):
    return f"ACCEPTANCE {num:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"


@pytest.mark.parametrize("num, name, func", CRITERIA, ids=[f"c{n:02d}_{s.replace(' ', '_')}" for n, s, _ in CRITERIA])
def test_criterion(num, name, func, capsys):
    ok, detail = func()
    with capsys.disabled():
        print("\n" + line(num, name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for num, name, func in CRITERIA:
        ok, detail = func()
        failed += not ok
        print(line(num, name, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
