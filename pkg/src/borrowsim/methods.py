"""Borrowing methods under a normal likelihood for the target summary.

Each ``analyze_*`` function maps a source summary and a target summary to a
posterior over the target treatment effect.  :func:`analyze` dispatches on a
:data:`MethodSpec` and also returns :class:`BorrowingDiagnostics`.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp, roots_jacobi, roots_legendre

from .core import (
    DomainError,
    Normal,
    NormalMixture,
    Posterior,
    SummaryMeasure,
    VaguePrior,
    norm_cdf,
    norm_logpdf,
)

NPP_GAMMA_NODES = 160
LOG_TAU_NODES = 160


# ---------------------------------------------------------------------------
# Method specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Separate:
    name = "separate"

    @property
    def label(self) -> str:
        return "Separate"


@dataclass(frozen=True)
class Pooling:
    name = "pooling"

    @property
    def label(self) -> str:
        return "Pooling"


@dataclass(frozen=True)
class ConditionalPP:
    gamma: float
    name = "cpp"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def label(self) -> str:
        return f"Conditional PP (γ={self.gamma:g})"


@dataclass(frozen=True)
class NormalizedPP:
    xi_gamma: float = 0.5
    sd_gamma: float = 0.05
    name = "npp"

    def __post_init__(self):
        if not 0.0 < self.xi_gamma < 1.0:
            raise DomainError("xi_gamma must lie in (0, 1)")
        if not 0.0 < self.sd_gamma <= 0.5:
            raise DomainError("sd_gamma must lie in (0, 0.5]")
        if self.sd_gamma**2 >= self.xi_gamma * (1.0 - self.xi_gamma):
            raise DomainError("Beta moment constraint violated: sd_gamma^2 >= xi(1 - xi)")

    @property
    def beta_params(self) -> tuple[float, float]:
        xi, v = self.xi_gamma, self.sd_gamma**2
        omega = v / (xi * (1.0 - xi) - v)
        return xi / omega, (1.0 - xi) / omega

    @property
    def label(self) -> str:
        return f"NPP (ξγ={self.xi_gamma:g}, σγ={self.sd_gamma:g})"


@dataclass(frozen=True)
class EmpiricalBayesPP:
    name = "ebpp"

    @property
    def label(self) -> str:
        return "EBPP"


@dataclass(frozen=True)
class PValuePP:
    k: float
    lam: float
    name = "pvalue_pp"

    def __post_init__(self):
        if not self.k > 0:
            raise DomainError("k must be positive")
        if not self.lam >= 0:
            raise DomainError("lambda must be nonnegative")

    @property
    def label(self) -> str:
        return f"p-PP (k={self.k:g}, λ={self.lam:g})"


@dataclass(frozen=True)
class TestThenPoolDiff:
    eta: float
    name = "ttp_diff"
    __test__ = False

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise DomainError("eta must lie in (0, 1)")

    @property
    def label(self) -> str:
        return f"TtP diff (η={self.eta:g})"


@dataclass(frozen=True)
class TestThenPoolEquiv:
    eta: float
    lam: float
    name = "ttp_equiv"
    __test__ = False

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise DomainError("eta must lie in (0, 1)")
        if not self.lam > 0:
            raise DomainError("lambda must be positive")

    @property
    def label(self) -> str:
        return f"TtP eq (η={self.eta:g}, λ={self.lam:g})"


@dataclass(frozen=True)
class FixedTau:
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError("tau must be positive")


@dataclass(frozen=True)
class LogTauCauchy:
    location: float = 0.0
    scale: float = 10.0

    def __post_init__(self):
        if not self.scale > 0:
            raise DomainError("Cauchy scale must be positive")


TauPrior = Union[FixedTau, LogTauCauchy]


@dataclass(frozen=True)
class CommensuratePP:
    tau_prior: TauPrior
    name = "commensurate"

    @property
    def label(self) -> str:
        tp = self.tau_prior
        if isinstance(tp, FixedTau):
            return f"Com. PP (τ={tp.tau:g})"
        return f"Com. PP (log τ ~ Cauchy({tp.location:g}, {tp.scale:g}))"


@dataclass(frozen=True)
class RobustMixture:
    w: float
    vague_mean: float = 0.0
    name = "rmp"

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise DomainError(f"w must lie in [0, 1], got {self.w}")

    @property
    def label(self) -> str:
        return f"RMP (w={self.w:g})"


MethodSpec = Union[
    Separate,
    Pooling,
    ConditionalPP,
    NormalizedPP,
    EmpiricalBayesPP,
    PValuePP,
    TestThenPoolDiff,
    TestThenPoolEquiv,
    CommensuratePP,
    RobustMixture,
]

METHOD_CLASSES = {
    cls.name: cls
    for cls in (
        Separate,
        Pooling,
        ConditionalPP,
        NormalizedPP,
        EmpiricalBayesPP,
        PValuePP,
        TestThenPoolDiff,
        TestThenPoolEquiv,
        CommensuratePP,
        RobustMixture,
    )
}


def method_to_dict(method: MethodSpec) -> dict:
    d = {"method": method.name}
    if isinstance(method, CommensuratePP):
        tp = method.tau_prior
        if isinstance(tp, FixedTau):
            d["tau"] = tp.tau
        else:
            d["log_tau_cauchy"] = [tp.location, tp.scale]
    else:
        d.update(asdict(method))
    return d


def method_from_dict(d: dict) -> MethodSpec:
    """Inverse of :func:`method_to_dict`; raises ``KeyError``/``TypeError`` on bad keys."""
    d = dict(d)
    name = d.pop("method")
    if name not in METHOD_CLASSES:
        raise KeyError(f"unknown method {name!r}")
    if name == "commensurate":
        if "tau" in d and "log_tau_cauchy" not in d and len(d) == 1:
            return CommensuratePP(FixedTau(float(d["tau"])))
        if "log_tau_cauchy" in d and len(d) == 1:
            loc, scale = d["log_tau_cauchy"]
            return CommensuratePP(LogTauCauchy(float(loc), float(scale)))
        raise TypeError(f"commensurate needs exactly one of tau / log_tau_cauchy, got {sorted(d)}")
    return METHOD_CLASSES[name](**d)


@dataclass(frozen=True)
class BorrowingDiagnostics:
    effective_gamma: Optional[float] = None
    posterior_weight: Optional[float] = None
    pooled_flag: Optional[bool] = None
    p_value: Optional[float] = None


# ---------------------------------------------------------------------------
# Conjugate building blocks
# ---------------------------------------------------------------------------


def _normal_from_terms(precisions, weighted_means) -> Normal:
    prec = sum(precisions)
    return Normal(sum(weighted_means) / prec, 1.0 / math.sqrt(prec))


def analyze_separate(target: SummaryMeasure, prior: VaguePrior = VaguePrior()) -> Posterior:
    p0 = 1.0 / prior.variance
    pt = 1.0 / target.variance
    return _normal_from_terms((p0, pt), (p0 * prior.mean, pt * target.estimate))


def analyze_cpp(
    source: SummaryMeasure, target: SummaryMeasure, gamma: float, prior: VaguePrior = VaguePrior()
) -> Posterior:
    """Conditional power prior: the source likelihood enters raised to ``gamma``."""
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    if gamma == 0.0:
        return analyze_separate(target, prior)
    p0 = 1.0 / prior.variance
    ps = gamma / source.variance
    pt = 1.0 / target.variance
    return _normal_from_terms((p0, ps, pt), (p0 * prior.mean, ps * source.estimate, pt * target.estimate))


def analyze_pooling(
    source: SummaryMeasure, target: SummaryMeasure, prior: VaguePrior = VaguePrior()
) -> Posterior:
    return analyze_cpp(source, target, 1.0, prior)


# ---------------------------------------------------------------------------
# Normalized power prior
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def _npp_nodes(p: float, q: float, n: int = NPP_GAMMA_NODES):
    """Gauss-Jacobi rule on (0, 1) for the weight g^(p - 1/2) (1 - g)^(q - 1).

    The extra sqrt(g) folds the normal normalizing constant sqrt(g)/sigma_S
    into the weight so the remaining integrands are entire in g.
    """
    x, w = roots_jacobi(n, q - 1.0, p - 0.5)
    g = 0.5 * (x + 1.0)
    # log of the weights rescaled to (0, 1); constant factors cancel later
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    g.flags.writeable = False
    logw.flags.writeable = False
    return g, logw


def analyze_npp(
    source: SummaryMeasure,
    target: SummaryMeasure,
    xi_gamma: float,
    sd_gamma: float,
    *,
    return_diagnostics: bool = False,
):
    """Normalized power prior with a Beta prior on the power parameter.

    Flat initial prior on the effect.  Given the power parameter the
    posterior is normal, so integrating it out with Gauss-Jacobi quadrature
    gives a normal mixture with one component per node.
    """
    spec = NormalizedPP(xi_gamma, sd_gamma)
    p, q = spec.beta_params
    g, logw = _npp_nodes(p, q)
    vs, vt = source.variance, target.variance
    d = target.estimate - source.estimate

    # marginal posterior of gamma, relative to the Jacobi weight:
    # N(theta_T | theta_S, vt + vs/g) / sqrt(g) = exp(-g d^2 / (2(g vt + vs))) / sqrt(2 pi (g vt + vs))
    denom = g * vt + vs
    log_marg = -0.5 * np.log(2.0 * np.pi * denom) - 0.5 * g * d * d / denom
    log_post_g = logw + log_marg
    log_post_g -= logsumexp(log_post_g)
    post_g = np.exp(log_post_g)
    mean_gamma = float(np.dot(post_g, g))

    prec = 1.0 / vt + g / vs
    cond_mean = (target.estimate / vt + g * source.estimate / vs) / prec
    post = _pruned_mixture(post_g, cond_mean, 1.0 / np.sqrt(prec))
    if return_diagnostics:
        return post, BorrowingDiagnostics(effective_gamma=mean_gamma)
    return post


def _pruned_mixture(weights, means, sds, rel_tol: float = 1e-300) -> NormalMixture:
    keep = weights > rel_tol * weights.max()
    w = weights[keep]
    return NormalMixture(w / w.sum(), means[keep], sds[keep])


def npp_gamma_posterior_mean(source: SummaryMeasure, target: SummaryMeasure, xi_gamma: float, sd_gamma: float) -> float:
    """Posterior mean of the power parameter under the normalized power prior."""
    return analyze_npp(source, target, xi_gamma, sd_gamma, return_diagnostics=True)[1].effective_gamma


# ---------------------------------------------------------------------------
# Empirical Bayes power prior
# ---------------------------------------------------------------------------


def ebpp_delta(source: SummaryMeasure, target: SummaryMeasure) -> float:
    """Marginal-likelihood-maximizing power parameter (capped at 1)."""
    d2 = (target.estimate - source.estimate) ** 2
    if d2 <= target.variance + source.variance:
        return 1.0
    return source.variance / (d2 - target.variance)


def analyze_ebpp(source: SummaryMeasure, target: SummaryMeasure, *, return_diagnostics: bool = False):
    vs, vt = source.variance, target.variance
    d2 = (source.estimate - target.estimate) ** 2
    delta = ebpp_delta(source, target)
    prior_var = d2 - vt if d2 > vt + vs else vs
    pt, ps = 1.0 / vt, 1.0 / prior_var
    post = _normal_from_terms((pt, ps), (pt * target.estimate, ps * source.estimate))
    if return_diagnostics:
        return post, BorrowingDiagnostics(effective_gamma=delta)
    return post


# ---------------------------------------------------------------------------
# Test-based methods
# ---------------------------------------------------------------------------


def pvalue_gamma(p_value: float, k: float) -> float:
    """Power parameter from an equivalence p-value: (1 - p)^(k / (1 - p))."""
    if not 0.0 <= p_value <= 1.0:
        raise DomainError(f"p-value must lie in [0, 1], got {p_value}")
    if not k > 0:
        raise DomainError("k must be positive")
    if p_value >= 1.0:
        return 0.0
    if p_value == 0.0:
        return 1.0
    return math.exp(k * math.log1p(-p_value) / (1.0 - p_value))


def difference_pvalue(source: SummaryMeasure, target: SummaryMeasure) -> float:
    """Two-sided z-test of equal effects."""
    z = (source.estimate - target.estimate) / math.sqrt(source.variance + target.variance)
    return 2.0 * norm_cdf(-abs(z))


def tost_pvalue(source: SummaryMeasure, target: SummaryMeasure, lam: float) -> float:
    """Equivalence p-value: max of the two one-sided z-test p-values."""
    s = math.sqrt(source.variance + target.variance)
    d = source.estimate - target.estimate
    p_upper = norm_cdf((d - lam) / s)  # H0a: d >= lam
    p_lower = norm_cdf(-(d + lam) / s)  # H0b: d <= -lam
    return max(p_upper, p_lower)


def _rejects(p_value: float, eta: float) -> bool:
    # a p-value exactly at eta is not a rejection
    return p_value < eta


def analyze_pvalue_pp(
    source: SummaryMeasure,
    target: SummaryMeasure,
    k: float,
    lam: float,
    prior: VaguePrior = VaguePrior(),
    *,
    return_diagnostics: bool = False,
):
    if not lam >= 0:
        raise DomainError("lambda must be nonnegative")
    p = tost_pvalue(source, target, lam)
    gamma = pvalue_gamma(p, k)
    post = analyze_cpp(source, target, gamma, prior)
    if return_diagnostics:
        return post, BorrowingDiagnostics(effective_gamma=gamma, p_value=p)
    return post


def analyze_ttp_diff(
    source: SummaryMeasure,
    target: SummaryMeasure,
    eta: float,
    prior: VaguePrior = VaguePrior(),
    *,
    return_diagnostics: bool = False,
):
    if not 0.0 < eta < 1.0:
        raise DomainError("eta must lie in (0, 1)")
    p = difference_pvalue(source, target)
    pooled = not _rejects(p, eta)
    post = analyze_pooling(source, target, prior) if pooled else analyze_separate(target, prior)
    if return_diagnostics:
        return post, BorrowingDiagnostics(effective_gamma=float(pooled), pooled_flag=pooled, p_value=p)
    return post


def analyze_ttp_equiv(
    source: SummaryMeasure,
    target: SummaryMeasure,
    eta: float,
    lam: float,
    prior: VaguePrior = VaguePrior(),
    *,
    return_diagnostics: bool = False,
):
    if not 0.0 < eta < 1.0:
        raise DomainError("eta must lie in (0, 1)")
    if not lam > 0:
        raise DomainError("lambda must be positive")
    p = tost_pvalue(source, target, lam)
    pooled = _rejects(p, eta)
    post = analyze_pooling(source, target, prior) if pooled else analyze_separate(target, prior)
    if return_diagnostics:
        return post, BorrowingDiagnostics(effective_gamma=float(pooled), pooled_flag=pooled, p_value=p)
    return post


# ---------------------------------------------------------------------------
# Commensurate power prior
# ---------------------------------------------------------------------------


def _source_posterior(source: SummaryMeasure, prior: VaguePrior) -> tuple[float, float]:
    p0, ps = 1.0 / prior.variance, 1.0 / source.variance
    v = 1.0 / (p0 + ps)
    return v * (p0 * prior.mean + ps * source.estimate), v


@functools.lru_cache(maxsize=32)
def _cauchy_nodes(location: float, scale: float, n: int = LOG_TAU_NODES):
    # Gauss-Legendre in s = F(log tau) on (0, 1); ds is the prior measure
    x, w = roots_legendre(n)
    s = 0.5 * (x + 1.0)
    u = location + scale * np.tan(np.pi * (s - 0.5))
    w = 0.5 * w
    u.flags.writeable = False
    w.flags.writeable = False
    return u, w


def commensurate_tau_weights(source: SummaryMeasure, target: SummaryMeasure, tau_prior: LogTauCauchy,
                             prior: VaguePrior = VaguePrior()):
    """Nodes on log(tau) and their normalized posterior weights.

    The Cauchy prior on log(tau) is handled on the whole real line by
    integrating over its CDF scale.
    """
    ms, vs = _source_posterior(source, prior)
    u, w = _cauchy_nodes(tau_prior.location, tau_prior.scale)
    with np.errstate(over="ignore"):
        het = np.exp(-u)  # 1 / tau
        logw = np.log(w) + norm_logpdf(target.estimate, ms, vs + het + target.variance)
    logw = np.where(np.isfinite(logw), logw, -np.inf)
    logw -= logsumexp(logw)
    return u, np.exp(logw)


def analyze_commensurate(
    source: SummaryMeasure,
    target: SummaryMeasure,
    tau_prior: TauPrior,
    prior: VaguePrior = VaguePrior(),
    *,
    return_diagnostics: bool = False,
):
    """Commensurate prior with the power parameter fixed at 1.

    Given tau, the effect has prior N(source posterior mean, source posterior
    var + 1/tau), so the posterior is normal for a fixed tau and a normal
    mixture (one component per quadrature node) for a Cauchy prior on
    log(tau).
    """
    ms, vs = _source_posterior(source, prior)
    vt = target.variance
    if isinstance(tau_prior, FixedTau):
        pp = 1.0 / (vs + 1.0 / tau_prior.tau)
        post = _normal_from_terms((pp, 1.0 / vt), (pp * ms, target.estimate / vt))
    else:
        u, w = commensurate_tau_weights(source, target, tau_prior, prior)
        with np.errstate(over="ignore"):
            prior_var = vs + np.exp(-u)
        prec = 1.0 / prior_var + 1.0 / vt
        means = (ms / prior_var + target.estimate / vt) / prec
        post = _pruned_mixture(w, means, 1.0 / np.sqrt(prec))
    if return_diagnostics:
        return post, BorrowingDiagnostics()
    return post


# ---------------------------------------------------------------------------
# Robust mixture prior
# ---------------------------------------------------------------------------


def unit_information_variance(target: SummaryMeasure) -> float:
    """Variance of the effect estimate from one subject per arm."""
    return target.variance * target.n_treatment


def rmp_posterior_weight(w: float, log_ml_informative: float, log_ml_vague: float) -> float:
    if w <= 0.0:
        return 0.0
    if w >= 1.0:
        return 1.0
    if log_ml_informative == log_ml_vague:
        return w
    a = math.log(w) + log_ml_informative
    b = math.log1p(-w) + log_ml_vague
    return 1.0 / (1.0 + math.exp(b - a)) if b - a < 700 else 0.0


def analyze_rmp(
    source: SummaryMeasure,
    target: SummaryMeasure,
    w: float,
    *,
    vague_mean: float = 0.0,
    return_diagnostics: bool = False,
):
    """Two-component robust mixture prior.

    Informative component: the source posterior N(theta_S, se_S^2).  Vague
    component: N(vague_mean, unit-information variance).
    """
    if not 0.0 <= w <= 1.0:
        raise DomainError(f"w must lie in [0, 1], got {w}")
    vt = target.variance
    comps = ((source.estimate, source.variance), (vague_mean, unit_information_variance(target)))
    means, sds, log_ml = [], [], []
    for m0, v0 in comps:
        prec = 1.0 / v0 + 1.0 / vt
        means.append((m0 / v0 + target.estimate / vt) / prec)
        sds.append(1.0 / math.sqrt(prec))
        log_ml.append(float(norm_logpdf(target.estimate, m0, v0 + vt)))
    w_post = rmp_posterior_weight(w, log_ml[0], log_ml[1])
    if w_post == 1.0:
        post = Normal(means[0], sds[0])
    elif w_post == 0.0:
        post = Normal(means[1], sds[1])
    else:
        post = NormalMixture(np.array([w_post, 1.0 - w_post]), np.array(means), np.array(sds))
    if return_diagnostics:
        return post, BorrowingDiagnostics(posterior_weight=w_post)
    return post


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def analyze(
    method: MethodSpec,
    source: SummaryMeasure,
    target: SummaryMeasure,
    prior: VaguePrior = VaguePrior(),
) -> tuple[Posterior, BorrowingDiagnostics]:
    if isinstance(method, Separate):
        return analyze_separate(target, prior), BorrowingDiagnostics(effective_gamma=0.0)
    if isinstance(method, Pooling):
        return analyze_pooling(source, target, prior), BorrowingDiagnostics(effective_gamma=1.0)
    if isinstance(method, ConditionalPP):
        return analyze_cpp(source, target, method.gamma, prior), BorrowingDiagnostics(effective_gamma=method.gamma)
    if isinstance(method, NormalizedPP):
        return analyze_npp(source, target, method.xi_gamma, method.sd_gamma, return_diagnostics=True)
    if isinstance(method, EmpiricalBayesPP):
        return analyze_ebpp(source, target, return_diagnostics=True)
    if isinstance(method, PValuePP):
        return analyze_pvalue_pp(source, target, method.k, method.lam, prior, return_diagnostics=True)
    if isinstance(method, TestThenPoolDiff):
        return analyze_ttp_diff(source, target, method.eta, prior, return_diagnostics=True)
    if isinstance(method, TestThenPoolEquiv):
        return analyze_ttp_equiv(source, target, method.eta, method.lam, prior, return_diagnostics=True)
    if isinstance(method, CommensuratePP):
        return analyze_commensurate(source, target, method.tau_prior, prior, return_diagnostics=True)
    if isinstance(method, RobustMixture):
        return analyze_rmp(source, target, method.w, vague_mean=method.vague_mean, return_diagnostics=True)
    raise TypeError(f"unknown method spec {method!r}")
