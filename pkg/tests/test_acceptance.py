"""Acceptance criteria 1-15.  Each test records one PASS/FAIL line (see conftest)."""

import csv
import math
import os
import time

import numpy as np
import yaml

import borrowsim.datagen as G
import borrowsim.ess as E
import borrowsim.methods as M
import borrowsim.oc_harness as H
import borrowsim.scenario_cli as C
from borrowsim.binomial_model import BinomialArmData, binomial_posterior, log_integrated_likelihood, theta_grid
from borrowsim.core import DecisionRule, Normal, SummaryMeasure, VaguePrior, posterior_mean, posterior_sd, \
    prob_effective

from .oracles import (
    binomial_riemann_loglik,
    ebpp_grid_argmax,
    hellinger_quadrature,
    normal_pdf,
    npp_kummer_density,
    rmp_weight_bruteforce,
)

BOTOX = G.get_preset("botox")
SEED = 20240101


def random_pair(rng):
    es = rng.normal(0, 1)
    src = SummaryMeasure(es, rng.uniform(0.03, 0.5))
    tgt = SummaryMeasure(es + rng.normal(0, 0.6), rng.uniform(0.05, 0.6), n_control=50, n_treatment=50)
    return src, tgt


def test_01_conjugacy_identities(criteria):
    rng = np.random.default_rng(101)
    prior = VaguePrior()
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(1000):
        src, tgt = random_pair(rng)
        p0, ps, pt = 1 / prior.variance, 1 / src.variance, 1 / tgt.variance
        pool_mean = (ps * src.estimate + pt * tgt.estimate) / (p0 + ps + pt)
        sep_mean = pt * tgt.estimate / (p0 + pt)
        one, zero = M.analyze_cpp(src, tgt, 1.0), M.analyze_cpp(src, tgt, 0.0)
        pool, sep = M.analyze_pooling(src, tgt), M.analyze_separate(tgt)
        for a, b in ((one.mean, pool_mean), (one.sd, (p0 + ps + pt) ** -0.5), (zero.mean, sep_mean),
                     (zero.sd, (p0 + pt) ** -0.5), (one.mean, pool.mean), (zero.mean, sep.mean)):
            worst = max(worst, abs(a - b) / max(1.0, abs(b)))
    secs = time.perf_counter() - t0
    ok = worst < 1e-12 and secs < 1.0
    criteria.record(1, ok, f"max rel diff {worst:.2e} over 1000 fixtures, {secs:.2f} s")
    assert ok


def test_02_npp_vs_kummer(criteria):
    rng = np.random.default_rng(202)
    worst, ours_secs = 0.0, 0.0
    for _ in range(50):
        src, tgt = random_pair(rng)
        xi = rng.uniform(0.1, 0.9)
        sd = min(0.5, rng.uniform(0.1, 0.9) * math.sqrt(xi * (1 - xi)))
        p, q = M.NormalizedPP(xi, sd).beta_params
        t0 = time.perf_counter()
        post = M.analyze_npp(src, tgt, xi, sd)
        m, s = posterior_mean(post), posterior_sd(post)
        width = 12 * max(s, tgt.std_err)
        grid = np.linspace(m - width, m + width, 1201)
        dens = post.pdf(grid)
        ours_secs += time.perf_counter() - t0
        ref = npp_kummer_density(grid, src.estimate, src.variance, tgt.estimate, tgt.variance, p, q)
        worst = max(worst, float(np.max(np.abs(dens - ref)) / np.max(ref)))
    ok = worst < 1e-6 and ours_secs < 30
    criteria.record(2, ok, f"max relative sup-norm error {worst:.2e} on 50 fixtures, quadrature {ours_secs:.2f} s")
    assert ok


def test_03_ebpp(criteria):
    rng = np.random.default_rng(303)
    worst_delta, worst_dens, n_conflict = 0.0, 0.0, 0
    for _ in range(100):
        src, tgt = random_pair(rng)
        d = M.ebpp_delta(src, tgt)
        worst_delta = max(worst_delta, abs(d - ebpp_grid_argmax(src.estimate, src.variance, tgt.estimate,
                                                                tgt.variance)))
        n_conflict += d < 1.0
        post = M.analyze_ebpp(src, tgt)
        centre, span = post.mean, 14 * post.sd
        grid = np.linspace(centre - span, centre + span, 8001)
        prod = np.array([normal_pdf(tgt.estimate, t, tgt.variance) * normal_pdf(t, src.estimate, src.variance / d)
                         for t in grid])
        prod /= np.trapezoid(prod, grid)
        ours = np.exp(-0.5 * ((grid - post.mean) / post.sd) ** 2) / (post.sd * math.sqrt(2 * math.pi))
        worst_dens = max(worst_dens, float(np.max(np.abs(ours - prod)) / np.max(prod)))
    ok = worst_delta < 1e-3 and worst_dens < 1e-10 and 0 < n_conflict < 100
    criteria.record(3, ok, f"max |delta - argmax| {worst_delta:.1e}, max rel density error {worst_dens:.1e}, "
                           f"{n_conflict}/100 fixtures in the discounting case")
    assert ok


def test_04_rmp_weight(criteria):
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        src, tgt = random_pair(rng)
        w = rng.uniform(0.01, 0.99)
        _, diag = M.analyze_rmp(src, tgt, w, return_diagnostics=True)
        ref = rmp_weight_bruteforce(w, src.estimate, src.variance, 0.0, M.unit_information_variance(tgt),
                                    tgt.estimate, tgt.variance)
        worst = max(worst, abs(diag.posterior_weight - ref))
    # identical components: the source component equals the unit-information one
    exact = True
    for w in (0.1, 0.3, 0.5, 0.77, 0.9):
        tgt = SummaryMeasure(0.4, 0.2, n_control=25, n_treatment=25)
        src = SummaryMeasure(0.0, math.sqrt(M.unit_information_variance(tgt)))
        _, diag = M.analyze_rmp(src, tgt, w, return_diagnostics=True)
        exact &= diag.posterior_weight == w
    ok = worst < 1e-10 and exact
    criteria.record(4, ok, f"max |w~ - brute force| {worst:.1e} on 1000 fixtures; identical components exact: {exact}")
    assert ok


def test_05_binomial_model(criteria):
    worst, worst_p = 0.0, 0.0
    g = theta_grid()
    for yc, yt in ((0, 5), (1, 4), (2, 2), (3, 5), (5, 0)):
        d = BinomialArmData(yc, 5, yt, 5)
        ref = binomial_riemann_loglik(yc, 5, yt, 5)
        f = np.where(np.isfinite(ref), np.exp(ref), 0.0)
        f /= np.trapezoid(f, g)
        post = binomial_posterior(d)
        worst = max(worst, float(np.max(np.abs(post.density - f))))
        # unnormalized too, so the check does not rest on a shared normalization
        ours = np.exp(log_integrated_likelihood(g, d))
        worst = max(worst, float(np.max(np.abs(ours - np.where(np.isfinite(ref), np.exp(ref), 0.0)))))
    rule = DecisionRule()
    for counts in ((2, 5, 4, 5), (10, 30, 17, 30), (40, 100, 52, 100), (150, 280, 170, 293)):
        d = BinomialArmData(*counts)
        a = prob_effective(binomial_posterior(d, n_points=2001), rule)
        b = prob_effective(binomial_posterior(d, n_points=4001), rule)
        worst_p = max(worst_p, abs(a - b))
    ok = worst < 1e-8 and worst_p < 1e-4
    criteria.record(5, ok, f"sup-norm vs 1e6-point Riemann oracle {worst:.1e}; grid doubling |dP| {worst_p:.1e}")
    assert ok


def test_06_calibration(criteria):
    s = H.Scenario(BOTOX, 58, G.ScenarioKnobs(G.drift_keyword("null", BOTOX.source, BOTOX.decision)), SEED)
    t0 = time.perf_counter()
    rec = H.estimate_oc(s, M.Separate(), 10_000, compute_ess=False, bootstrap_b=200)
    secs = time.perf_counter() - t0
    lo, hi = rec.success_ci
    ok = lo <= 0.025 <= hi and secs < 60
    criteria.record(6, ok, f"Botox n=58 separate TIE {rec.success_prob:.4f} CI [{lo:.4f}, {hi:.4f}], {secs:.1f} s")
    assert ok


def test_07_coverage(criteria):
    parts, ok = [], True
    for kw in ("consistent", "partially_consistent", "null"):
        d = G.drift_keyword(kw, BOTOX.source, BOTOX.decision)
        rec = H.estimate_oc(H.Scenario(BOTOX, 58, G.ScenarioKnobs(d), SEED), M.Separate(), 10_000,
                            compute_ess=False, bootstrap_b=200)
        ok &= abs(rec.coverage - 0.95) <= 0.0065
        parts.append(f"{kw} {rec.coverage:.4f}")
    criteria.record(7, ok, "Botox n=58 separate coverage: " + ", ".join(parts))
    assert ok


def test_08_tie_inflation(criteria):
    beli = G.get_preset("belimumab")
    s = H.Scenario(beli, 140, G.ScenarioKnobs(G.drift_keyword("null", beli.source, beli.decision)), SEED)
    t0 = time.perf_counter()
    parts, ok = [], True
    for m in (M.Pooling(), M.ConditionalPP(0.5)):
        rec = H.estimate_oc(s, m, 10_000, compute_ess=False, bootstrap_b=200)
        ok &= rec.success_ci[0] > 0.025
        parts.append(f"{m.label} {rec.success_prob:.4f} (lower {rec.success_ci[0]:.4f})")
    secs = time.perf_counter() - t0
    ok &= secs < 120
    criteria.record(8, ok, "Belimumab n=140 TIE: " + ", ".join(parts) + f", {secs:.1f} s")
    assert ok


def test_09_equivalent_tie_power_identity(criteria):
    alt = H.Scenario(BOTOX, 58, G.ScenarioKnobs(0.0), SEED)
    method = M.ConditionalPP(0.25)
    t0 = time.perf_counter()
    null_rec = H.estimate_oc(alt.at_null(), method, 50_000, compute_ess=False, bootstrap_b=200)
    cmp = H.compare_at_equivalent_tie(null_rec, alt, H.default_comparator(alt), 50_000)
    secs = time.perf_counter() - t0
    diff = cmp.power_b - cmp.power_freq
    ok = (not cmp.flagged) and abs(diff) <= 2 * cmp.combined_se and secs < 300
    criteria.record(9, ok, f"alpha_B {cmp.alpha_b:.5f}, power_B {cmp.power_b:.5f}, t-test at alpha_B "
                           f"{cmp.power_freq:.5f}, diff {diff / cmp.combined_se:+.2f} combined SE, {secs:.0f} s")
    assert ok


def test_10_power_loss(criteria):
    alt = H.Scenario(BOTOX, 58, G.ScenarioKnobs(0.0), SEED)
    gap = H.power_gap(M.PValuePP(20, 20), alt, H.default_comparator(alt), 50_000)
    ok = gap.z_paired < -4.0
    criteria.record(10, ok, f"alpha_B {gap.alpha_b:.5f}, power_B {gap.power_b:.5f}, t-test {gap.power_freq:.5f}, "
                            f"delta {gap.delta:+.5f}, z {gap.z_paired:.2f} (paired bootstrap SE {gap.se_paired:.2e}; "
                            f"independent-SE z {gap.delta / gap.se_independent:.2f})")
    assert ok


ADAPTIVE = [M.EmpiricalBayesPP(), M.NormalizedPP(0.5, 0.2), M.PValuePP(5, 0.1), M.TestThenPoolDiff(0.1),
            M.TestThenPoolEquiv(0.1, 0.1), M.RobustMixture(0.5), M.CommensuratePP(M.LogTauCauchy(0.0, 1.0))]


def test_11_ess(criteria):
    # (a) normal posteriors
    worst = 0.0
    for n in (1, 10, 58, 234, 1000):
        rep = E.posterior_ess(Normal(0.3, 1.7 / math.sqrt(n)), 1.7)
        worst = max(worst, abs(rep.moment - n), abs(rep.precision - n), abs(rep.elir - n))
    ok_a = worst < 1e-6
    # (b) pooling on the conjugate fixture: target SE exactly sigma / sqrt(n)
    sigma = BOTOX.source.aux["sampling_sd"]
    n_src = BOTOX.source.n_treatment
    tgt = SummaryMeasure(0.1, sigma / math.sqrt(58), n_control=58, n_treatment=58)
    pool_ess = E.prior_ess(M.analyze_pooling(BOTOX.source, tgt), sigma, 58).moment
    ok_b = abs(pool_ess / n_src - 1) < 0.01
    # (c) adaptive methods: mean prior ESS does not rise with |drift|
    lo, _ = G.drift_range(BOTOX.source, G.expected_target_se(BOTOX, 58), BOTOX.decision)
    drifts = np.linspace(0.0, lo, 5)
    bad, slopes = [], []
    for m in ADAPTIVE:
        for measure in ("moment", "elir"):
            means, ses = [], []
            for d in drifts:
                rec = H.estimate_oc(H.Scenario(BOTOX, 58, G.ScenarioKnobs(float(d)), SEED), m, 1000,
                                    bootstrap_b=400)
                a, b = rec.prior_ess_ci[measure]
                means.append(rec.mean_prior_ess[measure])
                ses.append((b - a) / (2 * 1.959964))
            means, ses = np.array(means), np.array(ses)
            rises = np.diff(means) / np.hypot(ses[1:], ses[:-1])
            x = np.abs(drifts) - np.abs(drifts).mean()
            slope = float(np.dot(x, means) / np.dot(x, x))
            slope_se = float(math.sqrt(np.dot(x * x, ses * ses)) / np.dot(x, x))
            slopes.append(f"{m.name}/{measure} {slope / slope_se:+.1f}")
            # nonincreasing: reject only on a significant rise, overall or between neighbours
            if np.any(rises > 3) or slope > 3 * slope_se:
                bad.append(f"{m.label}/{measure}")
    ok_c = not bad
    ok = ok_a and ok_b and ok_c
    criteria.record(11, ok, f"normal max err {worst:.1e}; pooling prior ESS {pool_ess:.2f} vs {n_src}; "
                            f"trend z: {', '.join(slopes)}" + (f"; violations: {bad}" if bad else ""))
    assert ok


def test_12_drift_machinery(criteria):
    rng = np.random.default_rng(1212)
    worst_h = 0.0
    for _ in range(200):
        m1, m2 = rng.normal(0, 1, 2)
        s1, s2 = rng.uniform(0.05, 2, 2)
        worst_h = max(worst_h, abs(G.hellinger_normal(m1, s1, m2, s2) - hellinger_quadrature(m1, s1, m2, s2)))
    worst_root, contained = 0.0, True
    for p in G.load_presets().values():
        for n in p.sample_size_grid:
            se = G.expected_target_se(p, n)
            for sign in (-1.0, 1.0):
                d = G.hellinger_drift(p.source.estimate, p.source.std_err, se, sign)
                h = G.hellinger_normal(p.source.estimate, p.source.std_err, p.source.estimate + d, se)
                worst_root = max(worst_root, abs(h - 0.9))
            lo, hi = G.drift_range(p.source, se, p.decision)
            to_null = p.decision.theta0 - p.source.estimate
            contained &= lo <= min(0.0, to_null) and max(0.0, to_null) <= hi
    ok = worst_h < 1e-8 and worst_root < 1e-6 and contained
    criteria.record(12, ok, f"Hellinger vs quadrature {worst_h:.1e}; |H(root) - 0.9| {worst_root:.1e}; "
                            f"[theta0 - thetaS, 0] in range for all presets and sizes: {contained}")
    assert ok


def test_13_quantile_se_ratio(criteria):
    t0 = time.perf_counter()
    r = H.quantile_se_ratio(rng=np.random.Generator(np.random.Philox(SEED)))
    secs = time.perf_counter() - t0
    ok = abs(r / 0.47 - 1) < 0.10
    criteria.record(13, ok, f"empirical ratio {r:.4f} (asymptotic {H.asymptotic_quantile_se_ratio(0.5, 0.975):.4f}), "
                            f"{secs:.0f} s")
    assert ok


def test_14_determinism_and_resume(tmp_path, criteria):
    cfg = {
        "preset": "botox",
        "sample_sizes": [58, 39],
        "drifts": ["consistent", "null"],
        "methods": ["separate", {"cpp": {"gamma": 0.5}}, {"rmp": {"w": 0.5}}, "ebpp",
                    {"npp": {"xi_gamma": 0.5, "sd_gamma": 0.2}}],
        "n_reps": {"success": 500, "estimation": 300},
        "seed": 99,
    }
    path = tmp_path / "study.yaml"
    path.write_text(yaml.safe_dump(cfg))
    quiet = lambda *_: None
    C.run(path, jobs=1, out=str(tmp_path / "one"), log=quiet)
    C.run(path, jobs=8, out=str(tmp_path / "eight"), log=quiet)
    a = (tmp_path / "one" / "results.csv").read_bytes()
    b = (tmp_path / "eight" / "results.csv").read_bytes()
    stamps = {f: f.stat().st_mtime_ns for f in (tmp_path / "eight" / "scenarios").iterdir()}
    man = C.run(path, jobs=8, out=str(tmp_path / "eight"), resume=True, log=quiet)
    c = (tmp_path / "eight" / "results.csv").read_bytes()
    untouched = all(f.stat().st_mtime_ns == t for f, t in stamps.items())
    reused = all(s["reused"] for s in man["scenarios"])
    ok = a == b == c and untouched and reused and len(stamps) == 20
    criteria.record(14, ok, f"1 vs 8 workers byte-identical: {a == b}; resume reused {reused}, "
                            f"scenario files untouched {untouched} ({len(stamps)} scenarios)")
    assert ok


THROUGHPUT_METHODS = [
    "separate", "pooling",
    {"cpp": {"gamma": [0.5, 0.25]}},
    {"rmp": {"w": [0.5, 0.8]}},
    "ebpp",
    {"npp": {"xi_gamma": 0.5, "sd_gamma": 0.2}},
    {"pvalue_pp": {"k": 20, "lam": 20}},
    {"ttp_diff": {"eta": 0.1}},
    {"ttp_equiv": {"eta": 0.1, "lam": 0.1}},
    {"commensurate": {"log_tau_cauchy": [0, 1]}},
]


def test_15_throughput(tmp_path, criteria):
    cfg = {
        "preset": "botox",
        "drifts": ["consistent", "partially_consistent", "null"],
        "methods": THROUGHPUT_METHODS,
        "n_reps": {"success": 2000, "estimation": 2000},
        "seed": SEED,
    }
    path = tmp_path / "study.yaml"
    path.write_text(yaml.safe_dump(cfg))
    jobs = os.cpu_count() or 1
    t0 = time.perf_counter()
    man = C.run(path, jobs=jobs, out=str(tmp_path / "out"), log=lambda *_: None)
    secs = time.perf_counter() - t0
    rows = list(csv.DictReader((tmp_path / "out" / "results.csv").open()))
    n_ok = sum(s["status"] != "failed" for s in man["scenarios"])
    ok = secs < 600 and len(rows) == 144 and n_ok == 144
    criteria.record(15, ok, f"144 scenarios x 2000 replicates with ESS in {secs:.0f} s on {jobs} core(s)")
    assert ok
