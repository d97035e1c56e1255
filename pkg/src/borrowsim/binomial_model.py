"""Exact binomial likelihood on responder counts, effect = difference in rates.

The control rate has a uniform prior and the effect, given the control
rate, is uniform on the attainable interval [-p_c, 1 - p_c].  The joint
prior density is therefore 1 on the feasible region, and the posterior of
the effect is proportional to the integrated likelihood

    L(theta) = int Bin(y_c | p, n_c) Bin(y_t | p + theta, n_t) dp

over p in [max(0, -theta), min(1, 1 - theta)].  The integrand is a
polynomial of degree n_c + n_t in p, so Gauss-Legendre with
(n_c + n_t) / 2 + 1 nodes integrates it exactly.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import gammaln, roots_legendre

from . import methods as M
from .core import DomainError, GridDensity, Normal, Scale, SummaryMeasure
from .methods import MethodSpec

THETA_POINTS = 2001


@dataclass(frozen=True)
class BinomialArmData:
    y_control: int
    n_control: int
    y_treatment: int
    n_treatment: int

    def __post_init__(self):
        for y, n in ((self.y_control, self.n_control), (self.y_treatment, self.n_treatment)):
            if n < 1 or not 0 <= y <= n:
                raise DomainError(f"invalid counts y={y}, n={n}")

    @property
    def rate_control(self) -> float:
        return self.y_control / self.n_control

    @property
    def rate_treatment(self) -> float:
        return self.y_treatment / self.n_treatment

    def summary(self) -> SummaryMeasure:
        """Rate-difference summary with delta-method standard error.

        Zero-variance arms (0 or n responders) get the 0.5 continuity
        correction in the variance term only.
        """
        def var(y, n):
            p = y / n
            if y in (0, n):
                p = (y + 0.5) / (n + 1.0)
            return p * (1.0 - p) / n

        se = math.sqrt(var(self.y_control, self.n_control) + var(self.y_treatment, self.n_treatment))
        return SummaryMeasure(
            self.rate_treatment - self.rate_control,
            se,
            Scale.RATE_DIFF,
            self.n_control,
            self.n_treatment,
            aux={"counts": (self.y_control, self.n_control, self.y_treatment, self.n_treatment)},
        )


@dataclass(frozen=True)
class UniformConditional:
    """theta | p_c ~ U(-p_c, 1 - p_c)."""


@dataclass(frozen=True)
class SourceInduced:
    method: MethodSpec
    source: Union[BinomialArmData, SummaryMeasure]


@dataclass(frozen=True)
class RateDiffPrior:
    effect_prior: Union[UniformConditional, SourceInduced] = field(default_factory=UniformConditional)


def _log_binom_pmf(y, n, p):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (
            gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
            + np.where(y > 0, y * np.log(p), 0.0)
            + np.where(n - y > 0, (n - y) * np.log1p(-p), 0.0)
        )
    return out


def _legendre(n_nodes: int):
    x, w = roots_legendre(n_nodes)
    return 0.5 * (x + 1.0), 0.5 * w


def log_integrated_likelihood(theta, data: BinomialArmData, power: float = 1.0, n_nodes: Optional[int] = None):
    """log of int [Bin(y_c|p) Bin(y_t|p+theta)]^power dp for an array of theta.

    Returns -inf where the feasible interval for p is empty.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if n_nodes is None:
        n_nodes = (data.n_control + data.n_treatment) // 2 + 2
        if power != 1.0:
            n_nodes = max(2 * n_nodes, 64)
    u, w = _legendre(n_nodes)
    lo = np.maximum(0.0, -theta)
    hi = np.minimum(1.0, 1.0 - theta)
    width = hi - lo
    out = np.full(theta.shape, -np.inf)
    ok = width > 0
    if not np.any(ok):
        return out
    p = lo[ok, None] + width[ok, None] * u[None, :]
    logf = _log_binom_pmf(data.y_control, data.n_control, p) + _log_binom_pmf(
        data.y_treatment, data.n_treatment, np.clip(p + theta[ok, None], 0.0, 1.0)
    )
    logf = power * logf
    mx = np.max(logf, axis=1, keepdims=True)
    finite = np.isfinite(mx[:, 0])
    vals = np.full(mx.shape[0], -np.inf)
    with np.errstate(invalid="ignore"):
        s = np.sum(w[None, :] * np.exp(logf - mx), axis=1)
    vals[finite] = mx[finite, 0] + np.log(s[finite]) + np.log(width[ok][finite])
    out[ok] = vals
    return out


def binomial_marginal_likelihood(theta: float, data: BinomialArmData) -> float:
    """Likelihood of the effect with the control rate integrated out (uniform prior)."""
    if not -1.0 <= theta <= 1.0:
        raise DomainError(f"theta must lie in [-1, 1], got {theta}")
    return float(np.exp(log_integrated_likelihood(theta, data)[0]))


def theta_grid(n_points: int = THETA_POINTS) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n_points)


@functools.lru_cache(maxsize=64)
def _cached_log_lik(data: BinomialArmData, power: float, n_points: int) -> np.ndarray:
    # the source likelihood is fixed across replicates; cache it per power
    out = log_integrated_likelihood(theta_grid(n_points), data, power=power)
    out.flags.writeable = False
    return out


def _feasible_mass(grid):
    # int 1{feasible} dp = 1 - |theta|: the marginal of the joint prior on theta
    return np.clip(1.0 - np.abs(grid), 0.0, None)


def _grid_posterior(grid, log_unnorm) -> GridDensity:
    mx = np.max(log_unnorm[np.isfinite(log_unnorm)])
    vals = np.where(np.isfinite(log_unnorm), np.exp(log_unnorm - mx), 0.0)
    return GridDensity.from_unnormalized(grid, vals)


def _log_trapz(grid, logf):
    mx = np.max(logf[np.isfinite(logf)])
    return mx + math.log(np.trapezoid(np.where(np.isfinite(logf), np.exp(logf - mx), 0.0), grid))


def _as_summary(src) -> SummaryMeasure:
    return src.summary() if isinstance(src, BinomialArmData) else src


def _truncated_normal_grid(post, grid) -> GridDensity:
    if isinstance(post, Normal):
        z = (grid - post.mean) / post.sd
        return GridDensity.from_unnormalized(grid, np.exp(-0.5 * z * z))
    if isinstance(post, GridDensity):
        return GridDensity.from_unnormalized(grid, post.pdf(grid))
    return GridDensity.from_unnormalized(grid, post.pdf(grid))


def _test_gamma(method, source_summary: SummaryMeasure, target_summary: SummaryMeasure) -> tuple[float, float]:
    if isinstance(method, M.TestThenPoolDiff):
        p = M.difference_pvalue(source_summary, target_summary)
        return (0.0 if M._rejects(p, method.eta) else 1.0), p
    if isinstance(method, M.TestThenPoolEquiv):
        p = M.tost_pvalue(source_summary, target_summary, method.lam)
        return (1.0 if M._rejects(p, method.eta) else 0.0), p
    p = M.tost_pvalue(source_summary, target_summary, method.lam)
    return M.pvalue_gamma(p, method.k), p


def binomial_posterior(
    data: BinomialArmData,
    prior: RateDiffPrior = RateDiffPrior(),
    borrow: Optional[tuple] = None,
    *,
    n_points: int = THETA_POINTS,
    return_diagnostics: bool = False,
):
    """Posterior of the rate difference on a uniform grid over [-1, 1].

    ``borrow`` is ``(method, source)`` where ``source`` is
    :class:`BinomialArmData` (native borrowing) or a rate-difference
    :class:`SummaryMeasure` (normal source likelihood).  Conditional PP,
    pooling, RMP and the test-based methods are native; NPP, EBPP and the
    commensurate prior use the normal approximation and are truncated to
    [-1, 1].
    """
    if borrow is None and isinstance(prior.effect_prior, SourceInduced):
        borrow = (prior.effect_prior.method, prior.effect_prior.source)
    grid = theta_grid(n_points)
    log_lt = log_integrated_likelihood(grid, data)
    diag = M.BorrowingDiagnostics()

    if borrow is None or isinstance(borrow[0], M.Separate):
        post = _grid_posterior(grid, log_lt)
        return (post, M.BorrowingDiagnostics(effective_gamma=0.0)) if return_diagnostics else post

    method, source = borrow
    target_summary = data.summary()

    def source_log_lik(gamma):
        if isinstance(source, BinomialArmData):
            return _cached_log_lik(source, float(gamma), n_points)
        return -0.5 * gamma * (grid - source.estimate) ** 2 / source.variance

    if isinstance(method, (M.Pooling, M.ConditionalPP, M.TestThenPoolDiff, M.TestThenPoolEquiv, M.PValuePP)):
        if isinstance(method, M.Pooling):
            gamma, p_val = 1.0, None
        elif isinstance(method, M.ConditionalPP):
            gamma, p_val = method.gamma, None
        else:
            gamma, p_val = _test_gamma(method, _as_summary(source), target_summary)
        if gamma == 0.0:
            post = _grid_posterior(grid, log_lt)
        else:
            post = _grid_posterior(grid, log_lt + source_log_lik(gamma))
        pooled = None
        if isinstance(method, (M.TestThenPoolDiff, M.TestThenPoolEquiv)):
            pooled = gamma == 1.0
        diag = M.BorrowingDiagnostics(effective_gamma=gamma, p_value=p_val, pooled_flag=pooled)
    elif isinstance(method, M.RobustMixture):
        post, w_post = _binomial_rmp(grid, log_lt, source_log_lik(1.0), method.w)
        diag = M.BorrowingDiagnostics(posterior_weight=w_post)
    else:
        normal_post, diag = M.analyze(method, _as_summary(source), target_summary)
        post = _truncated_normal_grid(normal_post, grid)
    return (post, diag) if return_diagnostics else post


def _binomial_rmp(grid, log_lt, log_src, w):
    """Mixture of the informative (source-posterior) and default-prior components.

    Each component prior on theta is combined with the feasibility indicator
    and normalized over the joint (p_c, theta) prior, so the marginal
    likelihood of component c is int pi_c L_T / int pi_c (1 - |theta|).
    """
    log_feas = np.log(np.where(_feasible_mass(grid) > 0, _feasible_mass(grid), np.finfo(float).tiny))
    log_inf = log_src - _log_trapz(grid, log_src)
    log_ml_inf = _log_trapz(grid, log_inf + log_lt) - _log_trapz(grid, log_inf + log_feas)
    log_ml_vague = _log_trapz(grid, log_lt)
    w_post = M.rmp_posterior_weight(w, log_ml_inf, log_ml_vague)
    post_inf = _grid_posterior(grid, log_inf + log_lt)
    post_vague = _grid_posterior(grid, log_lt)
    dens = w_post * post_inf.density + (1.0 - w_post) * post_vague.density
    return GridDensity.from_unnormalized(grid, dens), w_post
