"""Monte-Carlo operating characteristics of borrowing methods.

Replicate ``r`` of a scenario always uses the random stream keyed by
(master seed, scenario data key, r).  The data key does not include the
method, so every method and the frequentist comparators see the same
target datasets.
"""

from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import datagen as G
from . import ess as E
from . import methods as M
from .binomial_model import BinomialArmData, binomial_posterior
from .core import (
    DecisionRule,
    Direction,
    DomainError,
    Scale,
    SummaryMeasure,
    VaguePrior,
    credible_interval,
    decide_success,
    norm_cdf,
    norm_ppf,
    posterior_mean,
    posterior_quantile,
)
from .methods import MethodSpec

BOOTSTRAP_B = 2000
UNRELIABLE_FAILURE_RATE = 0.01
CI_LEVEL = 0.95
_BOOT_STREAM = 1 << 40


class Estimator(str, enum.Enum):
    MEAN = "PosteriorMean"
    MEDIAN = "PosteriorMedian"


class Model(str, enum.Enum):
    NORMAL = "normal"
    BINOMIAL = "binomial"


@dataclass(frozen=True)
class Scenario:
    """One data-generating configuration: preset, per-arm size and knobs."""

    preset: G.CaseStudyPreset
    n_per_arm: int
    knobs: G.ScenarioKnobs = field(default_factory=G.ScenarioKnobs)
    seed: int = 20240101
    prior: VaguePrior = field(default_factory=VaguePrior)
    model: Optional[Model] = None

    def __post_init__(self):
        if self.n_per_arm < 2:
            raise DomainError("n_per_arm must be at least 2")
        if self.model is None:
            m = Model.BINOMIAL if self.preset.endpoint == G.Endpoint.BINARY_RATE_DIFF else Model.NORMAL
            object.__setattr__(self, "model", m)
        if self.knobs.target_to_source_std_ratio != 1.0 and self.preset.endpoint != G.Endpoint.CONTINUOUS:
            raise DomainError("the std ratio knob applies to continuous endpoints only")
        src = G.apply_denominator_factor(self.preset.source, self.knobs.source_denominator_factor)
        object.__setattr__(self, "_source", src)

    @property
    def source(self) -> SummaryMeasure:
        return self._source

    @property
    def rule(self) -> DecisionRule:
        return self.preset.decision

    @property
    def theta_true(self) -> float:
        return self.preset.source.estimate + self.knobs.drift

    @property
    def key(self) -> int:
        return G.stable_key(self.data_dict())

    def data_dict(self) -> dict:
        return {
            "preset": self.preset.name,
            "n_per_arm": self.n_per_arm,
            "drift": float(self.knobs.drift).hex(),
            "std_ratio": float(self.knobs.target_to_source_std_ratio).hex(),
            "denominator_factor": float(self.knobs.source_denominator_factor).hex(),
        }

    @property
    def scenario_id(self) -> str:
        k = self.knobs
        return (f"{self.preset.name}/n{self.n_per_arm}/d{k.drift:+.6g}"
                f"/r{k.target_to_source_std_ratio:g}/f{k.source_denominator_factor:g}")

    def at_null(self) -> "Scenario":
        """Same scenario with the drift that puts the true effect at theta0."""
        drift = self.rule.theta0 - self.preset.source.estimate
        return Scenario(self.preset, self.n_per_arm,
                        G.ScenarioKnobs(drift, self.knobs.target_to_source_std_ratio,
                                        self.knobs.source_denominator_factor),
                        self.seed, self.prior, self.model)

    def reference_sd(self) -> float:
        return G.expected_target_se(self.preset, self.n_per_arm, self.knobs.target_to_source_std_ratio) * math.sqrt(
            self.n_per_arm
        )

    def rng(self, replicate: int, stream: int = 0) -> np.random.Generator:
        return G.replicate_rng(self.seed, self.key, replicate + stream)

    def generate(self, replicate: int) -> SummaryMeasure:
        return G.generate_target(self.preset, self.source, self.n_per_arm, self.knobs, self.rng(replicate))


@dataclass(frozen=True)
class OCRecord:
    scenario_id: str
    method: MethodSpec
    n_reps: int
    n_failed: int
    estimator: str
    theta_true: float
    success_prob: float
    success_ci: tuple
    mse: float
    mse_ci: tuple
    bias: float
    bias_ci: tuple
    precision: float
    precision_ci: tuple
    coverage: float
    coverage_ci: tuple
    mean_prior_ess: dict
    prior_ess_ci: dict
    mc_seed: int
    n_success: int = 0
    n_covered: int = 0
    n_above: int = 0
    n_below: int = 0
    resamples: int = 0
    unreliable: bool = False

    @property
    def n_ok(self) -> int:
        return self.n_reps - self.n_failed


class Test(str, enum.Enum):
    T_TEST = "TTest"
    COHENS_H = "CohensH"


@dataclass(frozen=True)
class FrequentistComparator:
    test: Test = Test.T_TEST
    alpha: float = 0.025

    __test__ = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class EquivalentTieComparison:
    alpha_b: float
    alpha_b_ci: tuple
    power_b: float
    power_b_ci: tuple
    power_freq: Optional[float]
    power_freq_ci: Optional[tuple]
    n_reps: int
    flagged: bool = False

    @property
    def combined_se(self) -> float:
        pf = self.power_freq if self.power_freq is not None else 0.0
        return math.sqrt((self.power_b * (1 - self.power_b) + pf * (1 - pf)) / self.n_reps)


# ---------------------------------------------------------------------------
# Confidence intervals
# ---------------------------------------------------------------------------


def clopper_pearson(k: int, n: int, level: float = CI_LEVEL) -> tuple[float, float]:
    if n < 1 or not 0 <= k <= n:
        raise DomainError("invalid binomial counts")
    a = 0.5 * (1.0 - level)
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a, k + 1, n - k))
    return lo, hi


def bootstrap_mean_ci(values, rng: np.random.Generator, B: int = BOOTSTRAP_B, level: float = CI_LEVEL,
                      chunk: int = 50) -> np.ndarray:
    """Percentile bootstrap CIs of the mean, one row per variable.

    ``values`` is (n,) or (m, n); all variables share the resampling indices.
    """
    v = np.atleast_2d(np.asarray(values, dtype=float))
    n = v.shape[1]
    if n < 2:
        raise DomainError("need at least 2 values")
    means = np.empty((v.shape[0], B))
    for start in range(0, B, chunk):
        stop = min(B, start + chunk)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[:, start:stop] = v[:, idx].mean(axis=2)
    a = 0.5 * (1.0 - level)
    out = np.quantile(means, [a, 1 - a], axis=1).T
    # keep the interval around the point estimate when the sample is (nearly) constant
    pt = v.mean(axis=1)
    out[:, 0] = np.minimum(out[:, 0], pt)
    out[:, 1] = np.maximum(out[:, 1], pt)
    return out


def ci_for_metric(values, kind: str = "mean", *, n: Optional[int] = None, seed: int = 0,
                  B: int = BOOTSTRAP_B) -> tuple[float, float]:
    """``kind='proportion'``: ``values`` is a success count (or 0/1 vector), exact CP interval.
    ``kind='mean'``: percentile bootstrap of the mean of ``values``."""
    if kind == "proportion":
        if n is None:
            arr = np.asarray(values)
            k, n = int(arr.sum()), arr.size
        else:
            k = int(values)
        return clopper_pearson(k, n)
    if kind != "mean":
        raise DomainError(f"unknown metric kind {kind!r}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    lo, hi = bootstrap_mean_ci(values, rng, B)[0]
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Replicate loop
# ---------------------------------------------------------------------------


def analyze_replicate(scenario: Scenario, method: MethodSpec, target: SummaryMeasure):
    if scenario.model == Model.BINOMIAL:
        data = BinomialArmData(*target.aux["counts"])
        src = G.source_binomial_data(scenario.source)
        return binomial_posterior(data, borrow=(method, src), return_diagnostics=True)
    return M.analyze(method, scenario.source, target, scenario.prior)


def _replicate_block(scenario: Scenario, method: MethodSpec, start: int, stop: int, estimator: str,
                     compute_ess: bool, ess_until: Optional[int] = None):
    n = stop - start
    ok = np.zeros(n, bool)
    success = np.zeros(n, bool)
    est = np.full(n, np.nan)
    lo = np.full(n, np.nan)
    hi = np.full(n, np.nan)
    ess = np.full((3, n), np.nan)
    resamples = 0
    ref_sd = scenario.reference_sd() if compute_ess else 1.0
    scale = E.BETA if scenario.model == Model.BINOMIAL else E.NORMAL
    for j, r in enumerate(range(start, stop)):
        try:
            target = scenario.generate(r)
            resamples += int(target.aux.get("resamples", 0))
            post, _ = analyze_replicate(scenario, method, target)
            success[j] = decide_success(post, scenario.rule)
            est[j] = posterior_mean(post) if estimator == Estimator.MEAN.value else posterior_quantile(post, 0.5)
            lo[j], hi[j] = credible_interval(post, 0.95)
            ok[j] = True
            if compute_ess and (ess_until is None or r < ess_until):
                try:
                    rep = E.prior_ess(post, ref_sd, scenario.n_per_arm, scale)
                    ess[:, j] = (rep.moment, rep.precision, rep.elir)
                except (ArithmeticError, ValueError):
                    pass  # left as NaN; the replicate still counts
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            warnings.warn(f"{scenario.scenario_id} replicate {r} failed: {exc}", RuntimeWarning, stacklevel=2)
    return ok, success, est, lo, hi, ess, resamples


def estimate_oc(
    scenario: Scenario,
    method: MethodSpec,
    n_reps: int,
    estimator: str = Estimator.MEAN.value,
    *,
    compute_ess: bool = True,
    bootstrap_b: int = BOOTSTRAP_B,
    jobs: int = 1,
    n_reps_estimation: Optional[int] = None,
) -> OCRecord:
    """Operating characteristics of ``method`` on ``scenario`` from ``n_reps`` replicates.

    Success probability and coverage use all replicates; bias, MSE,
    precision and prior ESS use the first ``n_reps_estimation`` (default
    all).  Replicates are reduced in index order, so the record does not
    depend on ``jobs``.
    """
    if n_reps < 100:
        raise DomainError("n_reps must be at least 100")
    n_est = n_reps if n_reps_estimation is None else min(n_reps, n_reps_estimation)
    if n_est < 2:
        raise DomainError("n_reps_estimation must be at least 2")
    estimator = Estimator(estimator).value
    if jobs > 1:
        bounds = np.linspace(0, n_reps, jobs + 1).astype(int)
        with ProcessPoolExecutor(jobs) as ex:
            futs = [ex.submit(_replicate_block, scenario, method, int(a), int(b), estimator, compute_ess, n_est)
                    for a, b in zip(bounds[:-1], bounds[1:])]
            parts = [f.result() for f in futs]
        ok, success, est, lo, hi = (np.concatenate([p[i] for p in parts]) for i in range(5))
        ess = np.concatenate([p[5] for p in parts], axis=1)
        resamples = sum(p[6] for p in parts)
    else:
        ok, success, est, lo, hi, ess, resamples = _replicate_block(scenario, method, 0, n_reps, estimator,
                                                                     compute_ess, n_est)
    return _aggregate(scenario, method, n_reps, estimator, ok, success, est, lo, hi, ess, resamples,
                      compute_ess, bootstrap_b, n_est)


def _aggregate(scenario, method, n_reps, estimator, ok, success, est, lo, hi, ess, resamples, compute_ess,
               bootstrap_b, n_est):
    theta = scenario.theta_true
    n_ok = int(ok.sum())
    n_failed = n_reps - n_ok
    if n_ok < 2:
        raise RuntimeError(f"{scenario.scenario_id}: fewer than 2 successful replicates")
    sub = ok & (np.arange(n_reps) < n_est)
    err_all = est - theta
    err = err_all[sub]
    half = 0.5 * (hi - lo)[sub]
    success, lo, hi = success[ok], lo[ok], hi[ok]
    above = lo > theta
    below = hi < theta
    covered = ~(above | below)
    metrics = np.vstack([err * err, err, half])
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        entropy=scenario.seed, spawn_key=(scenario.key, _BOOT_STREAM))))
    cis = bootstrap_mean_ci(metrics, rng, bootstrap_b)
    pts = metrics.mean(axis=1)
    names = ("moment", "precision", "elir")
    mean_ess, ess_ci = {}, {}
    if compute_ess:
        e = ess[:, sub]
        e = e[:, np.all(np.isfinite(e), axis=0)]
        if e.shape[1] >= 2:
            e_ci = bootstrap_mean_ci(e, rng, bootstrap_b)
            for i, k in enumerate(names):
                mean_ess[k] = float(e[i].mean())
                ess_ci[k] = tuple(map(float, e_ci[i]))
    k_succ, k_cov = int(success.sum()), int(covered.sum())
    return OCRecord(
        scenario_id=scenario.scenario_id,
        method=method,
        n_reps=n_reps,
        n_failed=n_failed,
        estimator=estimator,
        theta_true=theta,
        success_prob=k_succ / n_ok,
        success_ci=clopper_pearson(k_succ, n_ok),
        mse=float(pts[0]),
        mse_ci=tuple(map(float, cis[0])),
        bias=float(pts[1]),
        bias_ci=tuple(map(float, cis[1])),
        precision=float(pts[2]),
        precision_ci=tuple(map(float, cis[2])),
        coverage=k_cov / n_ok,
        coverage_ci=clopper_pearson(k_cov, n_ok),
        mean_prior_ess=mean_ess,
        prior_ess_ci=ess_ci,
        mc_seed=scenario.seed,
        n_success=k_succ,
        n_covered=k_cov,
        n_above=int(above.sum()),
        n_below=int(below.sum()),
        resamples=resamples,
        unreliable=n_failed > UNRELIABLE_FAILURE_RATE * n_reps,
    )


# ---------------------------------------------------------------------------
# Frequentist comparators
# ---------------------------------------------------------------------------


def _tte_design_se(scenario: Scenario) -> float:
    aux = scenario.source.aux
    rate_t = math.exp(scenario.knobs.drift) * aux["rate_treatment"]
    return G.tte_se(aux["rate_control"], rate_t, scenario.n_per_arm, scenario.n_per_arm, aux["followup"])


def frequentist_pvalue(comparator: FrequentistComparator, scenario: Scenario, target: SummaryMeasure,
                       tte_se: Optional[float] = None) -> float:
    """One-sided p-value of the separate (no-borrowing) test on one replicate."""
    sign = 1.0 if scenario.rule.direction == Direction.GREATER else -1.0
    n = scenario.n_per_arm
    if comparator.test == Test.COHENS_H:
        y_c, n_c, y_t, n_t = target.aux["counts"]
        h = 2.0 * math.asin(math.sqrt(y_t / n_t)) - 2.0 * math.asin(math.sqrt(y_c / n_c))
        z = h * math.sqrt(n / 2.0)
        # the null of Cohen's test is equality of rates
        return norm_cdf(-sign * z)
    se = tte_se if tte_se is not None else target.std_err
    stat = sign * (target.estimate - scenario.rule.theta0) / se
    if target.scale == Scale.MEAN_DIFF:
        return float(stats.t.sf(stat, df=n - 1))
    return norm_cdf(-stat)


def default_comparator(scenario: Scenario, alpha: float = 0.025) -> FrequentistComparator:
    test = Test.COHENS_H if scenario.model == Model.BINOMIAL else Test.T_TEST
    return FrequentistComparator(test, alpha)


def frequentist_pvalues(comparator: FrequentistComparator, scenario: Scenario, n_reps: int) -> np.ndarray:
    """p-values on the scenario's replicate datasets (the same ones the methods see)."""
    tte_se = _tte_design_se(scenario) if scenario.preset.endpoint == G.Endpoint.TIME_TO_EVENT else None
    out = np.empty(n_reps)
    for r in range(n_reps):
        out[r] = frequentist_pvalue(comparator, scenario, scenario.generate(r), tte_se)
    return out


def frequentist_power(comparator: FrequentistComparator, scenario: Scenario, alpha: Optional[float] = None,
                      n_reps: int = 10_000) -> tuple[float, tuple]:
    alpha = comparator.alpha if alpha is None else alpha
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    p = frequentist_pvalues(comparator, scenario, n_reps)
    k = int(np.sum(p < alpha))
    return k / n_reps, clopper_pearson(k, n_reps)


def compare_at_equivalent_tie(method_record: OCRecord, scenario: Scenario, comparator: FrequentistComparator,
                              n_reps: int, *, method_alt_record: Optional[OCRecord] = None
                              ) -> EquivalentTieComparison:
    """Power of the method and of the frequentist test at the method's type 1 error rate.

    ``method_record`` must be estimated at theta_T = theta0; ``scenario`` is
    the alternative.
    """
    alpha_b = method_record.success_prob
    if abs(method_record.theta_true - scenario.rule.theta0) > 1e-12:
        raise DomainError("method_record must be estimated at theta0")
    alt = method_alt_record or estimate_oc(scenario, method_record.method, n_reps, compute_ess=False,
                                           bootstrap_b=200)
    if alpha_b <= 0.0 or alpha_b >= 1.0:
        return EquivalentTieComparison(alpha_b, method_record.success_ci, alt.success_prob, alt.success_ci,
                                       None, None, alt.n_ok, flagged=True)
    pf, pf_ci = frequentist_power(comparator, scenario, alpha_b, n_reps)
    return EquivalentTieComparison(alpha_b, method_record.success_ci, alt.success_prob, alt.success_ci,
                                   pf, pf_ci, alt.n_ok)


@dataclass(frozen=True)
class PowerGap:
    """Method power minus frequentist power at the method's type 1 error rate.

    ``se_paired`` is a bootstrap standard error that resamples the null and
    alternative replicates independently, so it reflects both the pairing
    of method and test on the same datasets and the noise in alpha_B.
    """

    alpha_b: float
    power_b: float
    power_freq: float
    delta: float
    se_independent: float
    se_paired: float
    n_reps: int

    @property
    def z_paired(self) -> float:
        return self.delta / self.se_paired if self.se_paired > 0 else math.copysign(math.inf, self.delta)


def replicate_successes(scenario: Scenario, method: MethodSpec, n_reps: int) -> np.ndarray:
    ok, success = _replicate_block(scenario, method, 0, n_reps, Estimator.MEAN.value, False)[:2]
    if not ok.all():
        raise RuntimeError(f"{scenario.scenario_id}: {int((~ok).sum())} replicates failed")
    return success


def power_gap(method: MethodSpec, alt: Scenario, comparator: FrequentistComparator, n_reps: int,
              B: int = BOOTSTRAP_B) -> PowerGap:
    null = alt.at_null()
    s_null = replicate_successes(null, method, n_reps)
    s_alt = replicate_successes(alt, method, n_reps)
    p_alt = frequentist_pvalues(comparator, alt, n_reps)
    alpha_b = float(s_null.mean())
    if not 0.0 < alpha_b < 1.0:
        raise DomainError(f"type 1 error rate {alpha_b} leaves no comparison level")
    power_b = float(s_alt.mean())
    power_f = float(np.mean(p_alt < alpha_b))
    se_ind = math.sqrt((power_b * (1 - power_b) + power_f * (1 - power_f)) / n_reps)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        entropy=alt.seed, spawn_key=(alt.key, _BOOT_STREAM + 1))))
    deltas = np.empty(B)
    for b in range(B):
        i = rng.integers(0, n_reps, n_reps)
        j = rng.integers(0, n_reps, n_reps)
        a = s_null[i].mean()
        deltas[b] = s_alt[j].mean() - np.mean(p_alt[j] < a)
    return PowerGap(alpha_b, power_b, power_f, power_b - power_f, se_ind, float(np.std(deltas, ddof=1)), n_reps)


# ---------------------------------------------------------------------------
# Sample-quantile variability
# ---------------------------------------------------------------------------


def asymptotic_quantile_se_ratio(q1: float, q2: float) -> float:
    """sd(sample q1-quantile) / sd(sample q2-quantile) for large normal samples."""
    f1 = math.exp(-0.5 * norm_ppf(q1) ** 2)
    f2 = math.exp(-0.5 * norm_ppf(q2) ** 2)
    return math.sqrt(q1 * (1 - q1) / (q2 * (1 - q2))) * f2 / f1


def quantile_se_ratio(n: int = 10_000, q1: float = 0.5, q2: float = 0.975, n_outer: int = 10_000,
                      rng: Optional[np.random.Generator] = None, chunk: int = 250) -> float:
    """Empirical sd ratio of two sample quantiles over ``n_outer`` standard-normal samples of size ``n``."""
    if n < 2 or n_outer < 2:
        raise DomainError("n and n_outer must be at least 2")
    rng = rng or np.random.default_rng(0)
    qa = np.empty(n_outer)
    qb = np.empty(n_outer)
    for s in range(0, n_outer, chunk):
        e = min(n_outer, s + chunk)
        x = rng.standard_normal((e - s, n))
        qa[s:e], qb[s:e] = np.quantile(x, [q1, q2], axis=1)
    return float(np.std(qa, ddof=1) / np.std(qb, ddof=1))


def record_to_row(rec: OCRecord) -> dict:
    row = {
        "scenario_id": rec.scenario_id,
        "method": rec.method.name,
        "label": rec.method.label,
        "params": M.method_to_dict(rec.method),
        "n_reps": rec.n_reps,
        "n_failed": rec.n_failed,
        "estimator": rec.estimator,
        "theta_true": rec.theta_true,
    }
    for k in ("success_prob", "mse", "bias", "precision", "coverage"):
        row[k] = getattr(rec, k)
        lo, hi = getattr(rec, k.replace("_prob", "") + "_ci")
        row[k + "_lo"], row[k + "_hi"] = lo, hi
    for k, v in rec.mean_prior_ess.items():
        row[f"ess_{k}"] = v
        row[f"ess_{k}_lo"], row[f"ess_{k}_hi"] = rec.prior_ess_ci[k]
    row.update(mc_seed=rec.mc_seed, resamples=rec.resamples, unreliable=rec.unreliable)
    return row
