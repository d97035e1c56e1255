"""Domain types, posterior representations and the trial decision rule.

Every analysis method returns one of three posterior representations over
the target treatment effect:

* :class:`Normal` -- exact normal distribution,
* :class:`NormalMixture` -- finite mixture of normals,
* :class:`GridDensity` -- density tabulated on a uniform grid.

All summaries (moments, quantiles, tail probabilities) are computed from the
CDF, never from sampling.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc

_SQRT2 = math.sqrt(2.0)
_STD_NORMAL = NormalDist()


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


def norm_cdf(x: float) -> float:
    """Standard normal CDF, accurate in both tails."""
    return 0.5 * math.erfc(-x / _SQRT2)


def norm_ppf(q: float) -> float:
    return _STD_NORMAL.inv_cdf(q)


def norm_logpdf(x, mean, var):
    """Log density of N(mean, var); works on scalars and arrays."""
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


class Scale(str, enum.Enum):
    MEAN_DIFF = "MeanDiff"
    LOG_OR = "LogOR"
    LOG_HR = "LogHR"
    LOG_RR = "LogRR"
    RATE_DIFF = "RateDiff"

    @property
    def is_ratio(self) -> bool:
        return self in (Scale.LOG_OR, Scale.LOG_HR, Scale.LOG_RR)


@dataclass(frozen=True)
class SummaryMeasure:
    """Treatment-effect estimate with its standard error.

    ``aux`` carries per-arm quantities needed by the generators (control
    rate, event rates, dispersion, counts, ...).
    """

    estimate: float
    std_err: float
    scale: Scale = Scale.MEAN_DIFF
    n_control: int = 1
    n_treatment: int = 1
    aux: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (self.std_err > 0 and math.isfinite(self.std_err)):
            raise DomainError(f"std_err must be positive and finite, got {self.std_err}")
        if self.n_control < 1 or self.n_treatment < 1:
            raise DomainError("arm sizes must be >= 1")
        if self.scale == Scale.RATE_DIFF and not -1.0 <= self.estimate <= 1.0:
            raise DomainError("rate difference must lie in [-1, 1]")

    @property
    def variance(self) -> float:
        return self.std_err * self.std_err


class Direction(str, enum.Enum):
    GREATER = "GreaterIsEffective"
    LESS = "LessIsEffective"


@dataclass(frozen=True)
class DecisionRule:
    theta0: float = 0.0
    direction: Direction = Direction.GREATER
    rho: float = 0.975

    def __post_init__(self):
        if not 0.5 < self.rho < 1.0:
            raise DomainError(f"rho must lie in (0.5, 1), got {self.rho}")


@dataclass(frozen=True)
class VaguePrior:
    mean: float = 0.0
    sd: float = math.sqrt(1000.0)

    def __post_init__(self):
        if not self.sd > 0:
            raise DomainError("prior sd must be positive")

    @property
    def variance(self) -> float:
        return self.sd * self.sd


# ---------------------------------------------------------------------------
# Posterior representations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise DomainError(f"sd must be positive, got {self.sd}")


@dataclass(frozen=True, eq=False)
class NormalMixture:
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.atleast_1d(np.asarray(self.means, dtype=float))
        s = np.atleast_1d(np.asarray(self.sds, dtype=float))
        if not (w.shape == m.shape == s.shape) or w.ndim != 1 or w.size == 0:
            raise DomainError("mixture arrays must be 1-d and of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be nonnegative and sum to 1")
        if np.any(s <= 0):
            raise DomainError("mixture sds must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "sds", s)

    @classmethod
    def from_components(cls, components):
        """Build from an iterable of ``(weight, mean, sd)`` triples."""
        w, m, s = (np.array(c, dtype=float) for c in zip(*components))
        return cls(w, m, s)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        z = (x - self.means) / self.sds
        return np.sum(self.weights * np.exp(-0.5 * z * z) / (self.sds * math.sqrt(2 * math.pi)), axis=-1)


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Density tabulated on a uniform grid, normalized by the trapezoid rule."""

    grid: np.ndarray
    density: np.ndarray
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        d = np.asarray(self.density, dtype=float)
        if g.ndim != 1 or g.shape != d.shape or g.size < 3:
            raise DomainError("grid and density must be 1-d arrays of equal length >= 3")
        steps = np.diff(g)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps.mean():
            raise DomainError("grid must be uniform and increasing")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise DomainError("density must be finite and nonnegative")
        if abs(np.trapezoid(d, g) - 1.0) > 1e-8:
            raise DomainError("grid density must integrate to 1")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "density", d)
        cells = 0.5 * steps.mean() * (d[1:] + d[:-1])
        cdf = np.concatenate(([0.0], np.cumsum(cells)))
        object.__setattr__(self, "_cdf", cdf / cdf[-1])

    @classmethod
    def from_unnormalized(cls, grid, values):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        total = np.trapezoid(values, grid)
        if not total > 0:
            raise DomainError("density has no mass on the grid")
        return cls(grid, values / total)

    @property
    def step(self) -> float:
        return (self.grid[-1] - self.grid[0]) / (self.grid.size - 1)

    def cumulative(self) -> np.ndarray:
        """CDF at the grid nodes (trapezoid rule), pinned to end at 1."""
        return self._cdf

    def pdf(self, x):
        return np.interp(x, self.grid, self.density, left=0.0, right=0.0)


Posterior = Union[Normal, NormalMixture, GridDensity]


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def posterior_mean(p: Posterior) -> float:
    if isinstance(p, Normal):
        return p.mean
    if isinstance(p, NormalMixture):
        return float(np.dot(p.weights, p.means))
    return float(np.trapezoid(p.grid * p.density, p.grid))


def posterior_var(p: Posterior) -> float:
    if isinstance(p, Normal):
        return p.sd * p.sd
    m = posterior_mean(p)
    if isinstance(p, NormalMixture):
        return float(np.dot(p.weights, p.sds**2 + (p.means - m) ** 2))
    return float(np.trapezoid((p.grid - m) ** 2 * p.density, p.grid))


def posterior_sd(p: Posterior) -> float:
    return math.sqrt(posterior_var(p))


def posterior_cdf(p: Posterior, x: float) -> float:
    if isinstance(p, Normal):
        return norm_cdf((x - p.mean) / p.sd)
    if isinstance(p, NormalMixture):
        z = (x - p.means) / (p.sds * _SQRT2)
        return float(np.dot(p.weights, 0.5 * erfc(-z)))
    return _grid_cdf(p, x)


def _grid_cdf(p: GridDensity, x: float) -> float:
    g, d = p.grid, p.density
    if x <= g[0]:
        return 0.0
    if x >= g[-1]:
        return 1.0
    cdf = p.cumulative()
    h = p.step
    i = min(int((x - g[0]) // h), g.size - 2)
    t = x - g[i]
    slope = (d[i + 1] - d[i]) / h
    val = cdf[i] + d[i] * t + 0.5 * slope * t * t
    return float(min(max(val, 0.0), 1.0))


def posterior_quantile(p: Posterior, q: float) -> float:
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")
    if isinstance(p, Normal):
        return p.mean + p.sd * norm_ppf(q)
    if isinstance(p, NormalMixture):
        if p.weights.size == 1 or np.count_nonzero(p.weights) == 1:
            k = int(np.argmax(p.weights))
            return float(p.means[k] + p.sds[k] * norm_ppf(q))
        zq = abs(norm_ppf(min(q, 1 - q) / 2)) + 1.0
        lo = float(np.min(p.means - zq * p.sds))
        hi = float(np.max(p.means + zq * p.sds))
        return brentq(lambda x: posterior_cdf(p, x) - q, lo, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps)
    return _grid_quantile(p, q)


def _grid_quantile(p: GridDensity, q: float) -> float:
    g, d = p.grid, p.density
    cdf = p.cumulative()
    h = p.step
    i = int(np.searchsorted(cdf, q, side="right")) - 1
    i = min(max(i, 0), g.size - 2)
    # within cell i the CDF is quadratic: cdf[i] + d_i t + slope t^2 / 2
    rem = q - cdf[i]
    slope = (d[i + 1] - d[i]) / h
    if abs(slope) * h < 1e-14 * max(d[i], 1e-300):
        t = rem / d[i] if d[i] > 0 else 0.0
    else:
        disc = d[i] * d[i] + 2.0 * slope * rem
        # numerically stable root of slope/2 t^2 + d_i t - rem = 0
        t = 2.0 * rem / (d[i] + math.sqrt(max(disc, 0.0))) if d[i] + math.sqrt(max(disc, 0.0)) > 0 else 0.0
    return float(g[i] + min(max(t, 0.0), h))


def credible_interval(p: Posterior, level: float = 0.95) -> tuple[float, float]:
    """Equal-tail credible interval."""
    a = 0.5 * (1.0 - level)
    return posterior_quantile(p, a), posterior_quantile(p, 1.0 - a)


def prob_effective(p: Posterior, rule: DecisionRule) -> float:
    """Posterior probability that the effect lies outside the null region."""
    below = posterior_cdf(p, rule.theta0)
    return 1.0 - below if rule.direction == Direction.GREATER else below


def decide_success(p: Posterior, rule: DecisionRule) -> bool:
    # strict inequality: a tie at rho is not a success
    return prob_effective(p, rule) > rule.rho


def normal_grid(mean: float, sd: float, n_points: int = 4001, half_width: float = 8.0) -> np.ndarray:
    return np.linspace(mean - half_width * sd, mean + half_width * sd, n_points)


def mixture_moments(weights, means, variances) -> tuple[float, float]:
    m = float(np.dot(weights, means))
    v = float(np.dot(weights, variances + (means - m) ** 2))
    return m, v


def as_mixture(p: Posterior) -> Optional[NormalMixture]:
    if isinstance(p, Normal):
        return NormalMixture(np.array([1.0]), np.array([p.mean]), np.array([p.sd]))
    if isinstance(p, NormalMixture):
        return p
    return None
