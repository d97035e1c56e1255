"""Case-study presets, target-trial replicate generators and drift machinery."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml
from scipy.optimize import brentq

from .binomial_model import BinomialArmData
from .core import DecisionRule, Direction, DomainError, Scale, SummaryMeasure, norm_ppf

Z975 = norm_ppf(0.975)
HELLINGER_THRESHOLD = 0.9
MAX_RESAMPLES = 10_000


class Endpoint(str, enum.Enum):
    CONTINUOUS = "Continuous"
    BINARY_LOG_OR = "BinaryLogOR"
    BINARY_RATE_DIFF = "BinaryRateDiff"
    TIME_TO_EVENT = "TimeToEvent"
    RECURRENT_EVENT = "RecurrentEvent"

    @property
    def scale(self) -> Scale:
        return {
            Endpoint.CONTINUOUS: Scale.MEAN_DIFF,
            Endpoint.BINARY_LOG_OR: Scale.LOG_OR,
            Endpoint.BINARY_RATE_DIFF: Scale.RATE_DIFF,
            Endpoint.TIME_TO_EVENT: Scale.LOG_HR,
            Endpoint.RECURRENT_EVENT: Scale.LOG_RR,
        }[self]


@dataclass(frozen=True)
class CaseStudyPreset:
    name: str
    source: SummaryMeasure
    endpoint: Endpoint
    decision: DecisionRule
    sample_size_grid: tuple
    followup_dt: Optional[float] = None

    def __post_init__(self):
        if not self.sample_size_grid or any(n < 1 for n in self.sample_size_grid):
            raise DomainError("sample sizes must be positive")


@dataclass(frozen=True)
class ScenarioKnobs:
    drift: float = 0.0
    target_to_source_std_ratio: float = 1.0
    source_denominator_factor: float = 1.0

    def __post_init__(self):
        if not (self.target_to_source_std_ratio > 0 and self.source_denominator_factor > 0):
            raise DomainError("knob factors must be positive")


# ---------------------------------------------------------------------------
# RNG: counter-based, keyed by (master seed, scenario key, replicate index)
# ---------------------------------------------------------------------------


def stable_key(obj) -> int:
    """64-bit key from the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def replicate_rng(seed: int, scenario_key: int, replicate: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(scenario_key, replicate))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Source summaries
# ---------------------------------------------------------------------------


def se_from_ci(lo: float, hi: float, z: float = Z975) -> float:
    return (hi - lo) / (2.0 * z)


def pool_inverse_variance(estimates, std_errs) -> tuple[float, float]:
    w = 1.0 / np.asarray(std_errs, dtype=float) ** 2
    est = float(np.dot(w, estimates) / w.sum())
    return est, float(1.0 / math.sqrt(w.sum()))


def logor_se(p_c: float, p_t: float, n_c: float, n_t: float) -> float:
    return math.sqrt(1 / (n_c * p_c) + 1 / (n_c * (1 - p_c)) + 1 / (n_t * p_t) + 1 / (n_t * (1 - p_t)))


def tte_se(rate_c: float, rate_t: float, n_c: float, n_t: float, dt: float) -> float:
    return math.sqrt(1.0 / (rate_t * dt * n_t) + 1.0 / (rate_c * dt * n_c))


def recurrent_se(mu_c: float, mu_t: float, k: float, n_c: float, n_t: float) -> float:
    """Delta-method SE of the log rate ratio under negative-binomial counts.

    Var(mean) = (mu + mu^2 / k) / n, and Var(log mean) = Var(mean) / mu^2.
    """
    term_t = (math.sqrt(mu_t + mu_t * mu_t / k) / mu_t) ** 2 / n_t
    term_c = (math.sqrt(mu_c + mu_c * mu_c / k) / mu_c) ** 2 / n_c
    return math.sqrt(term_t + term_c)


def _parse_source(spec: dict, endpoint: Endpoint, n_c: int, n_t: int, aux: dict):
    if "studies" in spec:
        ests, ses = [], []
        for st in spec["studies"]:
            e, s = _parse_source(st, endpoint, n_c, n_t, aux)
            ests.append(e)
            ses.append(s)
        return pool_inverse_variance(ests, ses)
    if "ratio" in spec:
        lo, hi = spec["ci"]
        return math.log(spec["ratio"]), se_from_ci(math.log(lo), math.log(hi))
    if "rates" in spec:
        p_c, p_t = spec["rates"]
        aux.update(control_rate=p_c, treatment_rate=p_t)
        return p_t - p_c, math.sqrt(p_c * (1 - p_c) / n_c + p_t * (1 - p_t) / n_t)
    if "ci" in spec:
        return float(spec["estimate"]), se_from_ci(*spec["ci"])
    return float(spec["estimate"]), float(spec["std_err"])


def _complete_aux(endpoint: Endpoint, est: float, se: float, n_c: int, n_t: int, aux: dict) -> dict:
    aux = dict(aux)
    if endpoint == Endpoint.CONTINUOUS:
        aux.setdefault("sampling_sd", se * math.sqrt(2.0 / (1.0 / n_c + 1.0 / n_t)))
    elif endpoint == Endpoint.BINARY_LOG_OR:
        p_c = aux["control_rate"]
        odds_t = math.exp(est) * p_c / (1 - p_c)
        aux.setdefault("treatment_rate", odds_t / (1 + odds_t))
    elif endpoint == Endpoint.BINARY_RATE_DIFF:
        aux.setdefault(
            "counts",
            (round(aux["control_rate"] * n_c), n_c, round(aux["treatment_rate"] * n_t), n_t),
        )
    elif endpoint == Endpoint.TIME_TO_EVENT:
        dt = aux["followup"]
        hr = math.exp(est)
        if "rate_control" not in aux:
            # expected events reproduce the source SE: se^2 = (1/(hr n_t) + 1/n_c) / (rate_c dt)
            aux["rate_control"] = (1.0 / (hr * n_t) + 1.0 / n_c) / (dt * se * se)
        aux.setdefault("rate_treatment", hr * aux["rate_control"])
    elif endpoint == Endpoint.RECURRENT_EVENT:
        aux.setdefault("mu_treatment", aux["mu_control"] * math.exp(est))
    return aux


def default_sample_sizes(n_source: int) -> tuple:
    return tuple(n_source // (2 * m) for m in (1, 2, 4, 6))


def preset_from_dict(name: str, d: dict) -> CaseStudyPreset:
    allowed = {"endpoint", "direction", "theta0", "rho", "n_source", "n_control", "n_treatment",
               "source", "aux", "note", "sample_sizes"}
    unknown = set(d) - allowed
    if unknown:
        raise KeyError(f"preset {name!r}: unknown keys {sorted(unknown)}")
    endpoint = Endpoint(d["endpoint"])
    n_c, n_t = int(d["n_control"]), int(d["n_treatment"])
    aux = dict(d.get("aux", {}))
    est, se = _parse_source(d["source"], endpoint, n_c, n_t, aux)
    aux = _complete_aux(endpoint, est, se, n_c, n_t, aux)
    source = SummaryMeasure(est, se, endpoint.scale, n_c, n_t, aux=aux)
    rule = DecisionRule(float(d.get("theta0", 0.0)), Direction(d.get("direction", Direction.GREATER.value)),
                        float(d.get("rho", 0.975)))
    sizes = tuple(d.get("sample_sizes") or default_sample_sizes(int(d.get("n_source", n_c + n_t))))
    return CaseStudyPreset(name, source, endpoint, rule, sizes, aux.get("followup"))


def load_presets(path: Optional[Union[str, Path]] = None) -> dict[str, CaseStudyPreset]:
    if path is None:
        text = resources.files("borrowsim").joinpath("data/presets.yaml").read_text()
    else:
        text = Path(path).read_text()
    doc = yaml.safe_load(text)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported preset file version {doc.get('version')!r}")
    return {name: preset_from_dict(name, d) for name, d in doc["presets"].items()}


def get_preset(name: str) -> CaseStudyPreset:
    presets = load_presets()
    try:
        return presets[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(presets)}") from None


def source_binomial_data(source: SummaryMeasure) -> BinomialArmData:
    y_c, n_c, y_t, n_t = source.aux["counts"]
    return BinomialArmData(int(y_c), int(n_c), int(y_t), int(n_t))


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def generate_continuous(theta_S_hat: float, drift: float, sigma_T: float, n_per_arm: int,
                        rng: np.random.Generator) -> SummaryMeasure:
    """Per-pair effect draws N(theta_S + drift, sigma_T^2); SE is the empirical one."""
    if n_per_arm < 2:
        raise DomainError("need at least 2 subjects per arm")
    x = rng.normal(theta_S_hat + drift, sigma_T, size=n_per_arm)
    est = float(x.mean())
    se = float(x.std(ddof=1)) / math.sqrt(n_per_arm)
    return SummaryMeasure(est, se, Scale.MEAN_DIFF, n_per_arm, n_per_arm)


def binary_logor_rates(source: SummaryMeasure, drift: float) -> tuple[float, float]:
    p_c = source.aux["control_rate"]
    if not 0.0 < p_c < 1.0:
        raise DomainError("control rate must lie in (0, 1)")
    odds_s = math.exp(source.estimate) * p_c / (1.0 - p_c)
    p_t = math.exp(drift) / (math.exp(drift) + 1.0 / odds_s)
    return p_c, p_t


def generate_binary_logor(source: SummaryMeasure, drift: float, n_per_arm: int,
                          rng: np.random.Generator) -> SummaryMeasure:
    """Binomial counts per arm; log-OR with 0.5 added to every cell if any cell is zero."""
    p_c, p_t = binary_logor_rates(source, drift)
    y_c = int(rng.binomial(n_per_arm, p_c))
    y_t = int(rng.binomial(n_per_arm, p_t))
    cells = np.array([y_t, n_per_arm - y_t, y_c, n_per_arm - y_c], dtype=float)
    corrected = bool(np.any(cells == 0))
    if corrected:
        cells += 0.5
    a, b, c, d = cells
    est = math.log(a / b) - math.log(c / d)
    se = math.sqrt(float(np.sum(1.0 / cells)))
    return SummaryMeasure(est, se, Scale.LOG_OR, n_per_arm, n_per_arm,
                          aux={"counts": (y_c, n_per_arm, y_t, n_per_arm), "corrected": corrected})


def generate_binary_ratediff(source: SummaryMeasure, drift: float, n_per_arm: int,
                             rng: np.random.Generator) -> SummaryMeasure:
    """Binomial counts with p_c = source control rate and p_t = source treatment rate + drift."""
    p_c = source.aux["control_rate"]
    p_t = source.aux["treatment_rate"] + drift
    if not (0.0 <= p_t <= 1.0):
        raise DomainError(f"drift {drift} makes the treatment rate {p_t} unattainable")
    y_c = int(rng.binomial(n_per_arm, p_c))
    y_t = int(rng.binomial(n_per_arm, p_t))
    return BinomialArmData(y_c, n_per_arm, y_t, n_per_arm).summary()


def generate_tte(lambda_c: float, lambda_t_source: float, drift: float, n_per_arm: int, dt: float,
                 rng: np.random.Generator) -> SummaryMeasure:
    """Approximate sampling: Poisson event counts, then a normal log-HR draw.

    Replicates with a zero count in either arm are redrawn; the number of
    redraws is stored in ``aux['resamples']``.
    """
    if not (lambda_c > 0 and lambda_t_source > 0 and dt > 0):
        raise DomainError("rates and follow-up must be positive")
    lam_t = math.exp(drift) * lambda_t_source
    resamples = 0
    while True:
        e_c = int(rng.poisson(lambda_c * dt * n_per_arm))
        e_t = int(rng.poisson(lam_t * dt * n_per_arm))
        if e_c > 0 and e_t > 0:
            break
        resamples += 1
        if resamples > MAX_RESAMPLES:
            raise RuntimeError("too many zero-event replicates")
    se = math.sqrt(1.0 / e_t + 1.0 / e_c)
    est = float(rng.normal(math.log(lam_t / lambda_c), se))
    return SummaryMeasure(est, se, Scale.LOG_HR, n_per_arm, n_per_arm,
                          aux={"events": (e_c, e_t), "resamples": resamples})


def generate_recurrent(mu_c: float, mu_t: float, k: float, drift: float, n_per_arm: int,
                       rng: np.random.Generator) -> SummaryMeasure:
    """Negative-binomial counts per patient (mean mu, dispersion k)."""
    if not (mu_c > 0 and mu_t > 0 and k > 0):
        raise DomainError("means and dispersion must be positive")
    mu_t = math.exp(drift) * mu_t
    resamples = 0
    while True:
        x_c = rng.negative_binomial(k, k / (k + mu_c), size=n_per_arm)
        x_t = rng.negative_binomial(k, k / (k + mu_t), size=n_per_arm)
        if x_c.sum() > 0 and x_t.sum() > 0:
            break
        resamples += 1
        if resamples > MAX_RESAMPLES:
            raise RuntimeError("too many zero-count replicates")
    m_c, m_t = float(x_c.mean()), float(x_t.mean())
    est = math.log(m_t / m_c)
    se = recurrent_se(m_c, m_t, k, n_per_arm, n_per_arm)
    return SummaryMeasure(est, se, Scale.LOG_RR, n_per_arm, n_per_arm, aux={"resamples": resamples})


def generate_target(preset: CaseStudyPreset, source: SummaryMeasure, n_per_arm: int, knobs: ScenarioKnobs,
                    rng: np.random.Generator) -> SummaryMeasure:
    """One target-trial summary for the preset's endpoint.

    ``source`` is the (possibly denominator-adjusted) source summary whose
    arm rates drive the generator.
    """
    aux = source.aux
    drift = knobs.drift
    ep = preset.endpoint
    if ep == Endpoint.CONTINUOUS:
        sigma = aux["sampling_sd"] * knobs.target_to_source_std_ratio
        return generate_continuous(source.estimate, drift, sigma, n_per_arm, rng)
    if ep == Endpoint.BINARY_LOG_OR:
        return generate_binary_logor(source, drift, n_per_arm, rng)
    if ep == Endpoint.BINARY_RATE_DIFF:
        return generate_binary_ratediff(source, drift, n_per_arm, rng)
    if ep == Endpoint.TIME_TO_EVENT:
        return generate_tte(aux["rate_control"], aux["rate_treatment"], drift, n_per_arm, aux["followup"], rng)
    return generate_recurrent(aux["mu_control"], aux["mu_treatment"], aux["dispersion"], drift, n_per_arm, rng)


def expected_target_se(preset: CaseStudyPreset, n_per_arm: int, std_ratio: float = 1.0) -> float:
    """Standard error of the target estimate at the preset's design values (drift 0)."""
    s, aux = preset.source, preset.source.aux
    ep = preset.endpoint
    if ep == Endpoint.CONTINUOUS:
        return aux["sampling_sd"] * std_ratio / math.sqrt(n_per_arm)
    if ep == Endpoint.BINARY_LOG_OR:
        p_c, p_t = binary_logor_rates(s, 0.0)
        return logor_se(p_c, p_t, n_per_arm, n_per_arm)
    if ep == Endpoint.BINARY_RATE_DIFF:
        p_c, p_t = aux["control_rate"], aux["treatment_rate"]
        return math.sqrt((p_c * (1 - p_c) + p_t * (1 - p_t)) / n_per_arm)
    if ep == Endpoint.TIME_TO_EVENT:
        return tte_se(aux["rate_control"], aux["rate_treatment"], n_per_arm, n_per_arm, aux["followup"])
    return recurrent_se(aux["mu_control"], aux["mu_treatment"], aux["dispersion"], n_per_arm, n_per_arm)


# ---------------------------------------------------------------------------
# Denominator changes
# ---------------------------------------------------------------------------


def apply_denominator_factor(source: SummaryMeasure, factor: float) -> SummaryMeasure:
    """Scale the control-arm quantity of a ratio summary, keeping the effect fixed.

    LogOR: control odds; LogHR: control event rate; LogRR: control mean
    count.  The SE is recomputed from the implied cells or rates.
    """
    if not factor > 0:
        raise DomainError("denominator factor must be positive")
    if factor == 1.0:
        return source
    if not source.scale.is_ratio:
        raise DomainError(f"denominator changes apply to ratio scales, not {source.scale.value}")
    aux = dict(source.aux)
    ratio = math.exp(source.estimate)
    n_c, n_t = source.n_control, source.n_treatment
    if source.scale == Scale.LOG_OR:
        p_c = aux["control_rate"]
        odds_c = factor * p_c / (1.0 - p_c)
        odds_t = ratio * odds_c
        aux["control_rate"] = odds_c / (1.0 + odds_c)
        aux["treatment_rate"] = odds_t / (1.0 + odds_t)
        se = logor_se(aux["control_rate"], aux["treatment_rate"], n_c, n_t)
    elif source.scale == Scale.LOG_HR:
        aux["rate_control"] = factor * aux["rate_control"]
        aux["rate_treatment"] = ratio * aux["rate_control"]
        se = tte_se(aux["rate_control"], aux["rate_treatment"], n_c, n_t, aux["followup"])
    else:
        aux["mu_control"] = factor * aux["mu_control"]
        aux["mu_treatment"] = ratio * aux["mu_control"]
        se = recurrent_se(aux["mu_control"], aux["mu_treatment"], aux["dispersion"], n_c, n_t)
    return replace(source, std_err=se, aux=aux)


# ---------------------------------------------------------------------------
# Drift ranges
# ---------------------------------------------------------------------------


def hellinger_normal(m1: float, s1: float, m2: float, s2: float) -> float:
    if not (s1 > 0 and s2 > 0):
        raise DomainError("standard deviations must be positive")
    ss = s1 * s1 + s2 * s2
    bc = math.sqrt(2.0 * s1 * s2 / ss) * math.exp(-((m1 - m2) ** 2) / (4.0 * ss))
    return math.sqrt(max(0.0, 1.0 - bc))


def hellinger_drift(theta_s: float, se_s: float, target_se: float, sign: float = -1.0,
                    threshold: float = HELLINGER_THRESHOLD) -> float:
    """Drift on the side ``sign`` where the Hellinger distance reaches ``threshold``."""
    def f(delta):
        return hellinger_normal(theta_s, se_s, theta_s + delta, target_se) - threshold

    if f(0.0) >= 0:
        raise DomainError("Hellinger distance already exceeds the threshold at zero drift")
    width = max(se_s, target_se)
    limit = 1e3 * se_s
    while f(sign * width) < 0:
        width *= 2.0
        if width > max(limit, 1e3 * target_se):
            raise DomainError("no sign change in the drift bracket")
    return brentq(lambda t: f(sign * t), 0.0, width, xtol=1e-10, rtol=1e-14) * sign


def drift_range(source: SummaryMeasure, target_se: float, rule: DecisionRule) -> tuple[float, float]:
    """Drift interval: the Hellinger-0.9 range joined with [theta0 - theta_S, 0].

    The Hellinger root is taken on the side of the null (negative drift when
    larger effects are better).  For rate differences the range is
    intersected with the attainable interval.
    """
    to_null = rule.theta0 - source.estimate
    sign = -1.0 if rule.direction == Direction.GREATER else 1.0
    if to_null != 0:
        sign = math.copysign(1.0, to_null)
    edge = hellinger_drift(source.estimate, source.std_err, target_se, sign)
    lo = min(edge, to_null, 0.0)
    hi = max(edge, to_null, 0.0)
    if source.scale == Scale.RATE_DIFF:
        p_t = source.aux["treatment_rate"]
        lo = max(lo, -1.0 - source.estimate, -p_t)
        hi = min(hi, 1.0 - source.estimate, 1.0 - p_t)
    return lo, hi


def drift_keyword(keyword: str, source: SummaryMeasure, rule: DecisionRule) -> float:
    if keyword == "consistent":
        return 0.0
    if keyword == "partially_consistent":
        return -source.estimate / 2.0
    if keyword == "null":
        return rule.theta0 - source.estimate
    raise KeyError(f"unknown drift keyword {keyword!r}")
