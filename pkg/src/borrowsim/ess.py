"""Prior effective sample size: moment, precision and ELIR measures.

Each measure is applied to the posterior and the target sample size per
arm is subtracted to obtain the prior ESS.  One unit of information is
the treatment-effect estimate from one subject per arm; its sd is
``reference_sd``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .core import (
    DomainError,
    GridDensity,
    Normal,
    NormalMixture,
    Posterior,
    as_mixture,
    posterior_mean,
    posterior_sd,
    posterior_var,
)

NORMAL = "Normal"
BETA = "BetaTransformed"
SD_FLOOR = 1e-6
NOMINAL_SAMPLES = 1000
ELIR_QUAD_POINTS = 4001
ELIR_MIXTURE_POINTS = (241, 20001)


@dataclass(frozen=True)
class EssReport:
    moment: float
    precision: float
    elir: float
    reference_sd: float
    mixture_fit: Optional[NormalMixture] = None

    def __post_init__(self):
        if not self.reference_sd > 0:
            raise DomainError("reference_sd must be positive")

    def minus(self, n: float) -> "EssReport":
        return EssReport(self.moment - n, self.precision - n, self.elir - n, self.reference_sd, self.mixture_fit)


# ---------------------------------------------------------------------------
# Mixture fitting (weighted EM)
# ---------------------------------------------------------------------------


def _em(x, wts, k, sd_floor, max_iter=500, tol=1e-10):
    qs = (np.arange(k) + 0.5) / k
    order = np.argsort(x)
    cw = np.cumsum(wts[order])
    means = x[order][np.minimum(np.searchsorted(cw, qs), x.size - 1)].astype(float)
    mu = float(np.dot(wts, x))
    sd0 = math.sqrt(max(float(np.dot(wts, (x - mu) ** 2)), sd_floor**2))
    sds = np.full(k, max(sd0 / k, sd_floor))
    pis = np.full(k, 1.0 / k)
    ll_old = -np.inf
    for _ in range(max_iter):
        z = (x[:, None] - means) / sds
        logp = np.log(pis) - np.log(sds) - 0.5 * z * z - 0.5 * math.log(2 * math.pi)
        mx = logp.max(axis=1, keepdims=True)
        p = np.exp(logp - mx)
        tot = p.sum(axis=1, keepdims=True)
        ll = float(np.dot(wts, mx[:, 0] + np.log(tot[:, 0])))
        r = p / tot * wts[:, None]
        nk = r.sum(axis=0)
        if np.any(nk < 1e-12):
            break
        pis = nk / nk.sum()
        means = (r * x[:, None]).sum(axis=0) / nk
        sds = np.sqrt(np.maximum((r * (x[:, None] - means) ** 2).sum(axis=0) / nk, sd_floor**2))
        if abs(ll - ll_old) < tol * max(1.0, abs(ll)):
            ll_old = ll
            break
        ll_old = ll
    return pis, means, sds, ll_old


def fit_mixture(data: Union[np.ndarray, GridDensity], max_components: int = 3,
                n_nominal: Optional[int] = None) -> NormalMixture:
    """Normal-mixture fit with 1..max_components components chosen by BIC.

    ``data`` is a sample array or a :class:`GridDensity`; grid nodes are
    weighted by trapezoid mass, and the BIC uses ``n_nominal`` pseudo
    samples (default 1000).
    """
    if isinstance(data, GridDensity):
        x = data.grid
        wts = data.density * data.step
        wts[[0, -1]] *= 0.5
        keep = wts > 0
        x, wts = x[keep], wts[keep] / wts[keep].sum()
        n_eff = n_nominal or NOMINAL_SAMPLES
    else:
        x = np.asarray(data, dtype=float).ravel()
        if x.size < 2:
            raise DomainError("need at least 2 samples")
        wts = np.full(x.size, 1.0 / x.size)
        n_eff = n_nominal or x.size
    mu = float(np.dot(wts, x))
    spread = math.sqrt(float(np.dot(wts, (x - mu) ** 2)))
    floor = SD_FLOOR * spread if spread > 0 else SD_FLOOR * max(1.0, abs(mu))
    if spread <= 0:
        return NormalMixture(np.array([1.0]), np.array([mu]), np.array([floor]))
    best, best_bic = None, np.inf
    for k in range(1, max_components + 1):
        pis, means, sds, ll = _em(x, wts, k, floor)
        bic = -2.0 * n_eff * ll + (3 * k - 1) * math.log(n_eff)
        if bic < best_bic - 1e-9:
            best, best_bic = (pis, means, sds), bic
    pis, means, sds = best
    return NormalMixture(pis / pis.sum(), means, sds)


# ---------------------------------------------------------------------------
# Measures
# ---------------------------------------------------------------------------


def _to_unit_interval(dist: Posterior) -> tuple[float, float]:
    # x = (theta + 1) / 2
    return 0.5 * (posterior_mean(dist) + 1.0), 0.25 * posterior_var(dist)


def beta_moment_match(mean: float, var: float) -> tuple[float, float]:
    if not 0.0 < mean < 1.0:
        raise DomainError("mean must lie in (0, 1)")
    if not 0.0 < var < mean * (1.0 - mean):
        raise DomainError("variance incompatible with a Beta distribution")
    s = mean * (1.0 - mean) / var - 1.0
    return mean * s, (1.0 - mean) * s


def ess_moment(dist: Posterior, reference_sd: float, scale: str = NORMAL) -> float:
    if not reference_sd > 0:
        raise DomainError("reference_sd must be positive")
    if scale == BETA:
        a, b = beta_moment_match(*_to_unit_interval(dist))
        return a + b
    if scale != NORMAL:
        raise DomainError(f"unknown scale {scale!r}")
    v = posterior_var(dist)
    return math.inf if v == 0 else reference_sd**2 / v


def _neg_log_curvature(dist: Posterior, x: np.ndarray) -> np.ndarray:
    """-(log pi)'' at the points x."""
    if isinstance(dist, Normal):
        return np.full(np.shape(x), 1.0 / dist.sd**2)
    if isinstance(dist, NormalMixture):
        return _mixture_density_and_info(dist, x)[1]
    return _grid_neg_log_curvature(dist, x)


def _mixture_density_and_info(dist: NormalMixture, x: np.ndarray):
    """Mixture density and -(log pi)'' at x, from analytic derivatives."""
    inv = 1.0 / dist.sds
    z = (x[:, None] - dist.means) * inv
    # work relative to the largest log-component to avoid underflow
    logc = np.log(dist.weights * inv) - 0.5 * z * z
    mx = logc.max(axis=1)
    c = np.exp(logc - mx[:, None])
    f0 = c.sum(axis=1)
    cz = c * z
    f1 = -(cz @ inv)
    f2 = ((cz * z - c) @ (inv * inv))
    dens = f0 * np.exp(mx) / math.sqrt(2.0 * math.pi)
    return dens, -(f2 / f0 - (f1 / f0) ** 2)


def _grid_neg_log_curvature(dist: GridDensity, x=None) -> np.ndarray:
    g, d, h = dist.grid, dist.density, dist.step
    with np.errstate(divide="ignore"):
        ld = np.log(d)
    out = np.full(g.size, np.nan)
    i = np.arange(2, g.size - 2)
    ok = np.isfinite(ld[i - 2]) & np.isfinite(ld[i + 2]) & np.isfinite(ld[i - 1]) & np.isfinite(ld[i + 1])
    ii = i[ok]
    out[ii] = -(-ld[ii - 2] + 16 * ld[ii - 1] - 30 * ld[ii] + 16 * ld[ii + 1] - ld[ii + 2]) / (12 * h * h)
    if x is None:
        return out
    good = np.isfinite(out)
    return np.interp(x, g[good], out[good])


def ess_precision(dist: Posterior, reference_sd: float, scale: str = NORMAL) -> float:
    """Precision-matched ESS.

    Normal scale: the matching normal has variance Var(dist), so this equals
    :func:`ess_moment`.  Beta scale: match the mean and the curvature of the
    log density at the mean, -(log pi)''(mean), with a Beta(a, b).
    """
    if scale == NORMAL:
        return ess_moment(dist, reference_sd, NORMAL)
    if scale != BETA:
        raise DomainError(f"unknown scale {scale!r}")
    m_theta = posterior_mean(dist)
    m = 0.5 * (m_theta + 1.0)
    c = 4.0 * float(_neg_log_curvature(dist, np.array([m_theta]))[0])
    if not (math.isfinite(c) and c > 0):
        raise DomainError("nonpositive curvature at the mean")
    # Beta(a, b), a = s m: -(log)'' at m is s (1/m + 1/(1-m)) - (1/m^2 + 1/(1-m)^2)
    u = 1.0 / m + 1.0 / (1.0 - m)
    s = (c + 1.0 / m**2 + 1.0 / (1.0 - m) ** 2) / u
    return s


def ess_elir(
    prior_density: Union[Posterior, Callable],
    reference_sd: float,
    *,
    bounds: Optional[tuple] = None,
    unit_information: Optional[Callable] = None,
    n_points: Optional[int] = None,
) -> float:
    """Expected local-information ratio E_pi[I_pi(theta) / I_1(theta)].

    ``prior_density`` is a posterior object or a callable density (then
    ``bounds`` is required and the second derivative of the log density is
    taken by 5-point central differences).  I_1 defaults to the normal unit
    1 / reference_sd^2.
    """
    if not reference_sd > 0:
        raise DomainError("reference_sd must be positive")
    if isinstance(prior_density, Normal) and unit_information is None:
        return reference_sd**2 / prior_density.sd**2

    if isinstance(prior_density, GridDensity):
        x, dens = prior_density.grid, prior_density.density
        info = _grid_neg_log_curvature(prior_density)
        good = np.isfinite(info)
        x, dens, info = x[good], dens[good], info[good]
    elif isinstance(prior_density, NormalMixture):
        # the integrand is smooth and decays fast, so a moderate trapezoid grid suffices
        m, s = posterior_mean(prior_density), posterior_sd(prior_density)
        lo = min(m - 12 * s, float(np.min(prior_density.means - 8 * prior_density.sds)))
        hi = max(m + 12 * s, float(np.max(prior_density.means + 8 * prior_density.sds)))
        if bounds is not None:
            lo, hi = max(lo, bounds[0]), min(hi, bounds[1])
        if n_points is None:
            # a quarter of the narrowest component sd between nodes
            need = math.ceil((hi - lo) / (0.25 * float(prior_density.sds.min()))) + 1
            n_points = min(max(need, ELIR_MIXTURE_POINTS[0]), ELIR_MIXTURE_POINTS[1])
        x = np.linspace(lo, hi, n_points)
        dens, info = _mixture_density_and_info(prior_density, x)
    else:
        if bounds is None:
            raise DomainError("bounds are required for a callable density")
        lo, hi = bounds
        x = np.linspace(lo, hi, n_points or ELIR_QUAD_POINTS)
        dens = np.asarray(prior_density(x), dtype=float)
        mass = np.trapezoid(dens, x)
        if not (math.isfinite(mass) and mass > 0):
            raise DomainError("density is not integrable on the bounds")
        sd = math.sqrt(max(np.trapezoid((x - np.trapezoid(x * dens, x) / mass) ** 2 * dens, x) / mass, 0.0))
        h = 1e-4 * sd
        with np.errstate(divide="ignore", invalid="ignore"):
            f = [np.log(np.asarray(prior_density(x + k * h), dtype=float)) for k in (-2, -1, 0, 1, 2)]
            info = -(-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * h * h)
        good = np.isfinite(info) & (dens > 0)
        x, dens, info = x[good], dens[good], info[good]
    i1 = np.full(x.shape, 1.0 / reference_sd**2) if unit_information is None else unit_information(x)
    mass = np.trapezoid(dens, x)
    return float(np.trapezoid(dens * info / i1, x) / mass)


def prior_ess_from_posterior(posterior_ess: float, n_target_per_arm: int) -> float:
    return posterior_ess - n_target_per_arm


def posterior_ess(dist: Posterior, reference_sd: float, scale: str = NORMAL, *, fit: bool = False) -> EssReport:
    """All three measures on a posterior.  ``fit`` attaches a mixture fit for grids."""
    mix = as_mixture(dist)
    if mix is None and fit:
        mix = fit_mixture(dist)
    elir = ess_elir(dist, reference_sd)
    return EssReport(
        ess_moment(dist, reference_sd, scale),
        ess_precision(dist, reference_sd, scale),
        elir,
        reference_sd,
        mix,
    )


def prior_ess(dist: Posterior, reference_sd: float, n_target_per_arm: int, scale: str = NORMAL,
              *, fit: bool = False) -> EssReport:
    return posterior_ess(dist, reference_sd, scale, fit=fit).minus(n_target_per_arm)
