import math

import numpy as np
import pytest

import borrowsim.methods as M
from borrowsim.binomial_model import (
    BinomialArmData,
    binomial_marginal_likelihood,
    binomial_posterior,
    log_integrated_likelihood,
    theta_grid,
)
from borrowsim.core import DecisionRule, DomainError, posterior_mean, prob_effective
from scipy import integrate, stats

from .oracles import binomial_riemann_loglik


def test_counts_validation():
    with pytest.raises(DomainError):
        BinomialArmData(6, 5, 1, 5)
    with pytest.raises(DomainError):
        BinomialArmData(0, 0, 1, 5)


def test_summary_rate_difference():
    s = BinomialArmData(10, 40, 20, 40).summary()
    assert s.estimate == pytest.approx(0.25)
    assert s.std_err == pytest.approx(math.sqrt(0.25 * 0.75 / 40 + 0.25 / 40), rel=1e-14)


def test_marginal_likelihood_against_scipy_quad():
    d = BinomialArmData(3, 12, 7, 11)
    for theta in (-0.4, 0.0, 0.3, 0.8):
        lo, hi = max(0, -theta), min(1, 1 - theta)
        ref = integrate.quad(lambda p: stats.binom.pmf(3, 12, p) * stats.binom.pmf(7, 11, p + theta), lo, hi,
                             epsabs=0, epsrel=1e-13)[0]
        assert binomial_marginal_likelihood(theta, d) == pytest.approx(ref, rel=1e-11)


def test_likelihood_integrates_to_product_of_beta_integrals():
    # int int Bin Bin dp dtheta over the feasible set = 1/(nc+1) * 1/(nt+1)
    d = BinomialArmData(2, 5, 4, 5)
    g = np.linspace(-1, 1, 40001)
    total = np.trapezoid(np.exp(log_integrated_likelihood(g, d)), g)
    assert total == pytest.approx(1 / 36, rel=1e-7)


def test_posterior_against_riemann_oracle_small():
    d = BinomialArmData(1, 5, 4, 5)
    ref = binomial_riemann_loglik(1, 5, 4, 5, n_p=200_000)
    ours = log_integrated_likelihood(theta_grid(), d)
    ok = np.isfinite(ref)
    assert np.all(np.isfinite(ours) == ok)
    assert np.max(np.abs(np.exp(ours[ok]) - np.exp(ref[ok]))) < 1e-8


def test_separate_posterior_is_normalized_and_centered():
    d = BinomialArmData(20, 50, 30, 50)
    post = binomial_posterior(d)
    assert np.trapezoid(post.density, post.grid) == pytest.approx(1.0, abs=1e-12)
    assert posterior_mean(post) == pytest.approx(0.2, abs=0.02)


def test_pooling_equals_product_of_likelihoods():
    src = BinomialArmData(55, 100, 65, 100)
    tgt = BinomialArmData(10, 20, 12, 20)
    post = binomial_posterior(tgt, borrow=(M.Pooling(), src))
    g = theta_grid()
    logf = log_integrated_likelihood(g, tgt) + log_integrated_likelihood(g, src)
    f = np.where(np.isfinite(logf), np.exp(logf - np.max(logf[np.isfinite(logf)])), 0.0)
    f /= np.trapezoid(f, g)
    assert np.max(np.abs(post.density - f)) < 1e-10 * np.max(f)


def test_cpp_zero_is_separate():
    src = BinomialArmData(55, 100, 65, 100)
    tgt = BinomialArmData(10, 20, 12, 20)
    a = binomial_posterior(tgt, borrow=(M.ConditionalPP(0.0), src))
    b = binomial_posterior(tgt)
    assert np.array_equal(a.density, b.density)


def test_rmp_weight_drops_with_conflict():
    src = BinomialArmData(55, 100, 65, 100)
    _, d1 = binomial_posterior(BinomialArmData(10, 20, 12, 20), borrow=(M.RobustMixture(0.5), src),
                               return_diagnostics=True)
    _, d2 = binomial_posterior(BinomialArmData(15, 20, 2, 20), borrow=(M.RobustMixture(0.5), src),
                               return_diagnostics=True)
    assert d2.posterior_weight < d1.posterior_weight


def test_prob_effective_grid_doubling():
    d = BinomialArmData(8, 30, 15, 30)
    p1 = prob_effective(binomial_posterior(d, n_points=2001), DecisionRule())
    p2 = prob_effective(binomial_posterior(d, n_points=4001), DecisionRule())
    assert abs(p1 - p2) < 1e-4


@pytest.mark.parametrize("spec", [M.NormalizedPP(0.5, 0.2), M.EmpiricalBayesPP(),
                                  M.CommensuratePP(M.FixedTau(5.0)), M.PValuePP(20, 0.1)], ids=lambda s: s.name)
def test_other_methods_give_densities_on_the_unit_range(spec):
    src = BinomialArmData(55, 100, 65, 100)
    post = binomial_posterior(BinomialArmData(10, 20, 12, 20), borrow=(spec, src))
    assert post.grid[0] == -1.0 and post.grid[-1] == 1.0
    assert np.trapezoid(post.density, post.grid) == pytest.approx(1.0, abs=1e-10)
