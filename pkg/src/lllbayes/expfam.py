"""Exponential-family parameters, sufficient statistics and conjugate updates.

A density in natural form is ``h(x) exp(eta . T(x) - A(eta))``. Natural
parameters and likelihood offsets are stored as ordered blocks whose layout
is fixed per family; adding an offset to a prior's natural parameter is the
whole Bayesian update when the likelihood is (approximately) conjugate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import multigammaln
from scipy.special import logsumexp

from .errors import InvalidParameter, MeanUndefined, NumericalFailure, PosteriorImproper
from .linalg import as_symmetric, frozen, is_spd, logdet_spd, require_spd

# Block layout per family: (label, kind) with kind in {"scalar", "vector", "matrix"}.
# Labels name the sufficient statistic each block multiplies.
SCHEMAS = {
    "gaussian": (("x", "vector"), ("xxT", "matrix")),
    "invwishart": (("logdet", "scalar"), ("inv", "matrix")),
    "gamma": (("log", "scalar"), ("x", "scalar")),
    "igamma": (("log", "scalar"), ("inv", "scalar")),
    "trig": (("x2", "scalar"), ("x", "scalar"), ("cos", "scalar"), ("sin", "scalar")),
}

# Support of the latent variable for the scalar families.
SCALAR_SUPPORT = {
    "gaussian": "real",
    "gamma": "positive",
    "igamma": "positive",
    "trig": "real",
}

# Sufficient statistics of common continuous families. Only the families in
# SCHEMAS are implemented; the rest is reference metadata.
SUFFICIENT_STATISTIC_REGISTRY = {
    "exponential": "x",
    "normal (known variance s^2)": "x/s",
    "normal": "(x, x x^T)",
    "pareto (known minimum)": "log x",
    "weibull (known shape k)": "x^k",
    "chi-squared": "log x",
    "dirichlet": "(log x_1, ..., log x_n)",
    "laplace (known mean)": "|x - mu|",
    "inverse gaussian": "(x, 1/x)",
    "scaled inverse chi-squared": "(log x, 1/x)",
    "beta": "(log x, log(1 - x))",
    "lognormal": "(log x, (log x)^2)",
    "gamma": "(log x, x)",
    "inverse gamma": "(log x, 1/x)",
    "gaussian gamma": "(log tau, tau, tau x, tau x^2)",
    "wishart": "(log|X|, X)",
    "inverse wishart": "(log|X|, X^-1)",
}

# (prior, sufficient statistic, conjugate likelihood, implemented here)
CONJUGATE_LIKELIHOOD_REGISTRY = (
    ("normal", "(x, x x^T)", "N(y; C x, R)", True),
    ("normal", "(x, x x^T)", "logN(y; x, s^2)", False),
    ("gamma", "(log x, x)", "Exp(y; x)", True),
    ("gamma", "(log x, x)", "IGamma(y; a, x)", False),
    ("gamma", "(log x, x)", "Gamma(y; a, x)", False),
    ("gamma", "(log x, x)", "N(y; mu, 1/x)", True),
    ("inverse gamma", "(log x, 1/x)", "N(y; mu, x)", True),
    ("inverse gamma", "(log x, 1/x)", "Weibull(y; x, k)", False),
    ("gaussian gamma", "(log tau, tau, tau x, tau x^2)", "N(y; x, 1/tau)", False),
    ("wishart", "(log|X|, X)", "N(y; mu, X^-1)", False),
    ("inverse wishart", "(log|X|, X^-1)", "N(y; mu, X)", True),
)


def _coerce_blocks(family, values):
    try:
        schema = SCHEMAS[family]
    except KeyError:
        raise InvalidParameter(f"unknown family {family!r}") from None
    values = tuple(values)
    if len(values) != len(schema):
        raise InvalidParameter(
            f"{family} expects {len(schema)} blocks, got {len(values)}"
        )
    out = []
    dims = set()
    for (label, kind), v in zip(schema, values):
        if kind == "scalar":
            a = np.asarray(v, dtype=float)
            if a.size != 1:
                raise InvalidParameter(f"block {label!r} must be scalar")
            out.append(float(a.reshape(())))
        elif kind == "vector":
            a = np.asarray(v, dtype=float).reshape(-1)
            dims.add(a.shape[0])
            out.append(frozen(a))
        else:
            a = as_symmetric(v, f"block {label!r}")
            dims.add(a.shape[0])
            out.append(frozen(a))
    if len(dims) > 1:
        raise InvalidParameter(f"inconsistent block dimensions {sorted(dims)}")
    if not all(np.all(np.isfinite(b)) for b in out):
        raise InvalidParameter("non-finite block")
    return tuple(out)


def _domain_violation(family, values):
    """Return a reason string if ``values`` lie outside the natural-parameter space."""
    if family == "gaussian":
        if not is_spd(-values[1]):
            return "quadratic block is not negative definite"
    elif family == "invwishart":
        d = values[1].shape[0]
        if not values[0] < -d:
            return f"log-determinant coefficient must be < -{d}"
        if not is_spd(-values[1]):
            return "inverse block is not negative definite"
    elif family == "igamma":
        if not values[0] < -1:
            return "log coefficient must be < -1 (shape > 0)"
        if not values[1] < 0:
            return "inverse coefficient must be < 0 (scale > 0)"
    elif family == "gamma":
        if not values[0] > -1:
            return "log coefficient must be > -1 (shape > 0)"
        if not values[1] < 0:
            return "linear coefficient must be < 0 (rate > 0)"
    elif family == "trig":
        if not values[0] < 0:
            return "x^2 coefficient must be negative"
    return None


class _Blocks:
    family: str
    values: tuple

    @property
    def blocks(self):
        return tuple(
            (label, v) for (label, _), v in zip(SCHEMAS[self.family], self.values)
        )

    @property
    def dim(self):
        for (_, kind), v in zip(SCHEMAS[self.family], self.values):
            if kind != "scalar":
                return v.shape[0]
        return 1

    def _check_layout(self, other):
        if not isinstance(other, _Blocks) or other.family != self.family:
            raise InvalidParameter(
                f"block schema mismatch: {self.family!r} vs "
                f"{getattr(other, 'family', type(other).__name__)!r}"
            )
        for a, b in zip(self.values, other.values):
            if np.shape(a) != np.shape(b):
                raise InvalidParameter(
                    f"block shape mismatch {np.shape(a)} vs {np.shape(b)}"
                )

    def flat(self):
        return np.concatenate([np.ravel(v) for v in self.values])


@dataclass(frozen=True, eq=False)
class NaturalParam(_Blocks):
    """Natural parameter of an exponential-family member, validated against its space."""

    family: str
    values: tuple

    def __post_init__(self):
        values = _coerce_blocks(self.family, self.values)
        reason = _domain_violation(self.family, values)
        if reason:
            raise InvalidParameter(f"{self.family}: {reason}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class LikelihoodOffset(_Blocks):
    """Additive natural-parameter contribution of a (conjugate) likelihood."""

    family: str
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", _coerce_blocks(self.family, self.values))

    def __add__(self, other):
        self._check_layout(other)
        return LikelihoodOffset(
            self.family, tuple(a + b for a, b in zip(self.values, other.values))
        )

    @classmethod
    def zeros(cls, family, dim=1):
        vals = []
        for _, kind in SCHEMAS[family]:
            if kind == "scalar":
                vals.append(0.0)
            elif kind == "vector":
                vals.append(np.zeros(dim))
            else:
                vals.append(np.zeros((dim, dim)))
        return cls(family, vals)


@dataclass(frozen=True)
class SufficientStat:
    """Ordered sufficient-statistic evaluators mirroring a family's block layout."""

    family: str
    evaluators: tuple

    @property
    def blocks(self):
        return tuple(
            (label, f) for (label, _), f in zip(SCHEMAS[self.family], self.evaluators)
        )

    def __call__(self, x):
        return tuple(f(x) for f in self.evaluators)


def _vec(x):
    return np.asarray(x, dtype=float).reshape(-1)


def _outer(x):
    x = _vec(x)
    return np.outer(x, x)


SUFFICIENT_STATS = {
    "gaussian": SufficientStat("gaussian", (_vec, _outer)),
    "invwishart": SufficientStat(
        "invwishart",
        (lambda X: float(logdet_spd(np.asarray(X, float))), lambda X: np.linalg.inv(X)),
    ),
    "gamma": SufficientStat("gamma", (np.log, lambda x: x)),
    "igamma": SufficientStat("igamma", (np.log, lambda x: 1.0 / x)),
    "trig": SufficientStat(
        "trig", (lambda x: x * x, lambda x: x, np.cos, np.sin)
    ),
}


def natural_dot(params, stats):
    """Inner product ``eta . T(x)`` with matrices contracted as tr(a^T b)."""
    return float(sum(np.sum(np.asarray(a) * np.asarray(b)) for a, b in zip(params.values, stats)))


# --- Gaussian -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianParams:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = frozen(np.asarray(self.mean, dtype=float).reshape(-1))
        cov = frozen(require_spd(self.cov, "covariance"))
        if cov.shape[0] != mean.shape[0]:
            raise InvalidParameter("mean and covariance dimensions differ")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]


def gaussian_to_natural(p: GaussianParams) -> NaturalParam:
    c = np.linalg.cholesky(p.cov)
    ci = np.linalg.inv(c)
    precision = ci.T @ ci
    return NaturalParam("gaussian", (precision @ p.mean, -0.5 * precision))


def natural_to_gaussian(eta: NaturalParam) -> GaussianParams:
    if eta.family != "gaussian":
        raise InvalidParameter(f"expected gaussian parameters, got {eta.family!r}")
    precision = -2.0 * eta.values[1]
    try:
        c = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise InvalidParameter("quadratic block is not negative definite") from None
    ci = np.linalg.inv(c)
    cov = ci.T @ ci
    return GaussianParams(cov @ eta.values[0], cov)


def gaussian_log_partition(eta: NaturalParam) -> float:
    """Log-partition ``1/2 mu^T Sigma^-1 mu + 1/2 log|Sigma|`` (base measure (2 pi)^(-d/2))."""
    p = natural_to_gaussian(eta)
    return 0.5 * float(eta.values[0] @ p.mean) + 0.5 * float(logdet_spd(p.cov))


def linear_gaussian_offset(C, R, y) -> LikelihoodOffset:
    """Offset of the likelihood N(y; C x, R) with respect to T(x) = (x, x x^T)."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    R = require_spd(R, "R")
    y = np.asarray(y, dtype=float).reshape(-1)
    Ri_C = np.linalg.solve(R, C)
    return LikelihoodOffset("gaussian", (Ri_C.T @ y, -0.5 * C.T @ Ri_C))


# --- inverse Wishart ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InvWishartParams:
    """Inverse-Wishart IW(X; dof, scale) with density proportional to
    ``|X|^(-dof/2) exp(-tr(scale X^-1)/2)``; requires dof > 2d."""

    dof: float
    scale: np.ndarray

    def __post_init__(self):
        scale = frozen(require_spd(self.scale, "scale"))
        dof = float(self.dof)
        d = scale.shape[0]
        if not dof > 2 * d:
            raise InvalidParameter(f"degrees of freedom {dof} must exceed 2d = {2 * d}")
        object.__setattr__(self, "dof", dof)
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self):
        return self.scale.shape[0]

    @property
    def mean(self):
        return invwishart_mean(self)


def invwishart_to_natural(p: InvWishartParams) -> NaturalParam:
    return NaturalParam("invwishart", (-0.5 * p.dof, -0.5 * p.scale))


def natural_to_invwishart(eta: NaturalParam) -> InvWishartParams:
    if eta.family != "invwishart":
        raise InvalidParameter(f"expected invwishart parameters, got {eta.family!r}")
    return InvWishartParams(-2.0 * eta.values[0], -2.0 * eta.values[1])


def invwishart_mean(p: InvWishartParams) -> np.ndarray:
    d = p.dim
    denom = p.dof - 2 * d - 2
    if denom <= 0:
        raise MeanUndefined(f"mean needs dof > {2 * d + 2}, got {p.dof}")
    return p.scale / denom


def invwishart_logpdf(X, p: InvWishartParams) -> float:
    """Normalized log-density; the matrix-variate gamma uses (dof - d - 1)/2."""
    d = p.dim
    n = p.dof - d - 1
    X = np.asarray(X, dtype=float)
    return float(
        0.5 * n * logdet_spd(p.scale)
        - 0.5 * np.trace(np.linalg.solve(X, p.scale))
        - 0.5 * n * d * math.log(2.0)
        - multigammaln(0.5 * n, d)
        - 0.5 * p.dof * logdet_spd(X)
    )


# --- generic update -------------------------------------------------------


def conjugate_update(eta_prior: NaturalParam, offset: LikelihoodOffset) -> NaturalParam:
    eta_prior._check_layout(offset)
    values = tuple(a + b for a, b in zip(eta_prior.values, offset.values))
    reason = _domain_violation(eta_prior.family, _coerce_blocks(eta_prior.family, values))
    if reason:
        raise PosteriorImproper(f"{eta_prior.family} posterior: {reason}")
    return NaturalParam(eta_prior.family, values)


# --- scalar multimodal example -------------------------------------------


def trig_loglik(x, y):
    """Log of the multimodal likelihood exp(-(y - x)^2/24 + cos(y - x))."""
    return -((y - x) ** 2) / 24.0 + np.cos(y - x)


def sin_example_offset(y: float) -> LikelihoodOffset:
    """Offset of :func:`trig_loglik` against T(x) = (x^2, x, cos x, sin x)."""
    return LikelihoodOffset("trig", (-1.0 / 24.0, y / 12.0, math.cos(y), math.sin(y)))


def normalize_scalar_density(logdensity: Callable, interval, n_points: int = 2**16 + 1):
    """Normalize an unnormalized scalar log-density with the composite trapezoid rule.

    Returns ``(normalizer, pdf)`` where ``pdf(x) = exp(logdensity(x)) / normalizer``.
    """
    if n_points < 1025:
        raise InvalidParameter("n_points must be >= 1025")
    lo, hi = map(float, interval)
    grid = np.linspace(lo, hi, n_points)
    logv = np.asarray(logdensity(grid), dtype=float)
    if logv.shape != grid.shape or not np.all(np.isfinite(logv)):
        raise NumericalFailure("log-density is not finite on the grid")
    top = logv.max()
    log_z = top + math.log(np.trapezoid(np.exp(logv - top), grid))

    def pdf(x):
        return np.exp(np.asarray(logdensity(x), dtype=float) - log_z)

    return math.exp(log_z), pdf


# --- numeric conjugacy checks --------------------------------------------

_SCALAR_T = {
    "gaussian": (lambda x: x, lambda x: x * x),
    "gamma": (np.log, lambda x: x),
    "igamma": (np.log, lambda x: 1.0 / x),
    "trig": (lambda x: x * x, lambda x: x, np.cos, np.sin),
}

DOUBLING_START = 10.0
DOUBLING_STEPS = 6
DIVERGENCE_GROWTH = 0.10
_GRID_POINTS = 20001
_Y_GRID_POINTS = 4001


@dataclass(frozen=True)
class ConjugacyReport:
    """Verdicts for the three conjugate-likelihood conditions.

    ``None`` marks an inconclusive quadrature (e.g. total underflow).
    """

    linear_in_statistic: bool
    likelihood_integrable_y: Optional[bool]
    posterior_integrable_x: Optional[bool]
    details: dict = field(default_factory=dict, compare=False)

    @property
    def conjugate(self):
        return bool(
            self.linear_in_statistic
            and self.likelihood_integrable_y
            and self.posterior_integrable_x
        )


def _scalar_exponent(family, coefs, x):
    return sum(c * f(x) for c, f in zip(coefs, _SCALAR_T[family]))


def _log_trapezoid(logf, grid):
    """log of the trapezoid integral of exp(logf) over grid, overflow-safe."""
    w = np.full(grid.shape, grid[1] - grid[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    with np.errstate(over="ignore", invalid="ignore"):
        return float(logsumexp(logf + np.log(w)))


def _doubling_verdict(log_integrand: Callable, positive: bool, n_points=_GRID_POINTS):
    """Integrate over [-L, L] (in log x for positive support) for doubling L.

    ``log_integrand(grid)`` may return one row per probe; each row gets a verdict.
    """
    logs = []
    L = DOUBLING_START
    for _ in range(DOUBLING_STEPS):
        u = np.linspace(-L, L, n_points)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if positive:
                vals = np.asarray(log_integrand(np.exp(u))) + u
            else:
                vals = np.asarray(log_integrand(u))
            vals = np.atleast_2d(np.where(np.isnan(vals), np.inf, vals))
        logs.append([_log_trapezoid(row, u) for row in vals])
        L *= 2.0
    logs = np.array(logs).T
    verdicts = []
    for row in logs:
        if np.any(np.isposinf(row)) or np.any(np.isnan(row)):
            verdicts.append(False)
        elif np.all(np.isneginf(row)):
            verdicts.append(None)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                growth = np.expm1(np.diff(row))
            verdicts.append(bool(growth[-1] <= DIVERGENCE_GROWTH))
    return verdicts, logs


def check_conjugacy_scalar(
    prior: NaturalParam,
    offset_fn: Callable[[float], LikelihoodOffset],
    y: float,
    log_base: Optional[Callable] = None,
    x_probes: Optional[Sequence[float]] = None,
) -> ConjugacyReport:
    """Numerically check the conjugate-likelihood conditions for a scalar latent.

    ``offset_fn(y)`` gives the approximate likelihood ``exp(offset(y) . T(x) +
    log_base(y))``. The likelihood is tested for integrability in ``y`` at a
    few probe values of ``x``; the posterior ``prior + offset_fn(y)`` is tested
    for integrability in ``x``. Divergence is declared when the integral grows
    by more than 10% across the last interval doubling.
    """
    family = prior.family
    if family not in _SCALAR_T or prior.dim != 1:
        raise InvalidParameter(f"{family!r} is not a scalar family")
    positive = SCALAR_SUPPORT[family] == "positive"
    if x_probes is None:
        x_probes = (0.25, 0.5, 2.0, 4.0) if positive else (-2.0, -0.5, 0.5, 2.0)
    x_probes = np.asarray(x_probes, dtype=float)
    stats = np.array([f(x_probes) for f in _SCALAR_T[family]])  # (k, probes)

    def log_lik_in_y(ys):
        coefs = np.array([offset_fn(float(yy)).flat() for yy in ys])  # (n, k)
        base = np.array([log_base(yy) for yy in ys]) if log_base else 0.0
        return (coefs @ stats).T + base

    y_verdicts, y_logs = _doubling_verdict(log_lik_in_y, False, _Y_GRID_POINTS)

    total = prior.flat() + offset_fn(float(y)).flat()
    x_verdicts, x_logs = _doubling_verdict(
        lambda x: _scalar_exponent(family, total, x), positive
    )

    if any(v is False for v in y_verdicts):
        y_ok = False
    elif any(v is None for v in y_verdicts):
        y_ok = None
    else:
        y_ok = True
    return ConjugacyReport(
        True,
        y_ok,
        x_verdicts[0],
        details={
            "x_probes": x_probes,
            "y_log_integrals": y_logs,
            "x_log_integrals": x_logs[0],
        },
    )
