"""Log-likelihood linearization in a transformed variable.

A log-likelihood ``L(x)`` is replaced by ``L(x_hat) + phi . (t(x) - t(x_hat))``
where ``t`` is (a component of) the prior's sufficient statistic and ``phi``
is the gradient of ``L(t^-1(z))`` at ``z = t(x_hat)``. Because the
approximation is linear in the sufficient statistic, the posterior stays in
the prior's family.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidParameter, NumericalFailure
from .expfam import (
    GaussianParams,
    LikelihoodOffset,
    NaturalParam,
    conjugate_update,
    gaussian_to_natural,
    natural_to_gaussian,
)
from .linalg import require_spd

FD_STEP = 1e-6


@dataclass(frozen=True)
class LinearizationResult:
    offset: float
    gradient: object
    nominal: object
    t_nominal: object

    def __call__(self, t_of_x):
        """Evaluate the linear approximation at a point given by its transform value."""
        dz = np.asarray(t_of_x, dtype=float) - np.asarray(self.t_nominal, dtype=float)
        return self.offset + float(np.sum(np.asarray(self.gradient) * dz))


def central_gradient(f: Callable, z) -> np.ndarray:
    """Central finite-difference gradient, step ``max(1e-6, 1e-6 |z_i|)`` per entry."""
    z = np.array(z, dtype=float)
    flat = z.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        h = max(FD_STEP, FD_STEP * abs(flat[i]))
        zp = flat.copy()
        zm = flat.copy()
        zp[i] += h
        zm[i] -= h
        fp = f(zp.reshape(z.shape) if z.ndim else zp[0])
        fm = f(zm.reshape(z.shape) if z.ndim else zm[0])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalFailure("non-finite value in finite-difference stencil")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(z.shape)


def linearize_wrt_transform(
    L: Callable,
    t: Callable,
    t_inv: Callable,
    x_hat,
    gradient: Optional[Callable] = None,
) -> LinearizationResult:
    """Linearize ``L`` with respect to ``t(x)`` about ``t(x_hat)``.

    ``gradient(z)``, when given, is the analytic gradient of ``L(t_inv(z))``
    and replaces the finite-difference estimate.
    """
    z_hat = t(x_hat)
    value = L(x_hat)
    if not np.isfinite(value):
        raise NumericalFailure("log-likelihood is not finite at the nominal point")
    if gradient is not None:
        phi = np.asarray(gradient(z_hat), dtype=float)
    else:
        phi = central_gradient(lambda z: L(t_inv(z)), z_hat)
    if phi.ndim == 0:
        phi = float(phi)
    return LinearizationResult(float(value), phi, x_hat, z_hat)


def ekf_measurement_update(
    prior: GaussianParams, c: Callable, jacobian, R, y
) -> GaussianParams:
    """EKF measurement update written as a natural-parameter addition.

    ``jacobian`` is the (d x n) Jacobian of ``c`` at the prior mean, or a
    callable returning it. The measurement function is linearized about the
    prior mean, which makes the offset conjugate to the Gaussian prior.
    """
    R = require_spd(R, "R")
    mu = prior.mean
    J = jacobian(mu) if callable(jacobian) else jacobian
    J = np.atleast_2d(np.asarray(J, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    pseudo = y - np.asarray(c(mu), dtype=float).reshape(-1) + J @ mu
    RiJ = np.linalg.solve(R, J)
    offset = LikelihoodOffset("gaussian", (RiJ.T @ pseudo, -0.5 * J.T @ RiJ))
    return natural_to_gaussian(conjugate_update(gaussian_to_natural(prior), offset))


# --- normal likelihood with inverse-gamma variance prior --------------------


@dataclass(frozen=True)
class IGammaParams:
    """Inverse gamma with density proportional to x^-(shape+1) exp(-scale/x)."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise InvalidParameter("inverse gamma needs shape > 0 and scale > 0")

    def natural(self) -> NaturalParam:
        return NaturalParam("igamma", (-self.shape - 1.0, -self.scale))

    @property
    def mean(self):
        return self.scale / (self.shape - 1.0) if self.shape > 1 else np.inf


def default_linearization_point(prior: IGammaParams, rule: str = "ratio") -> float:
    """Nominal point for the variance linearization.

    ``"ratio"`` is shape/scale, the value conventionally quoted as the prior
    mean; ``"mean"`` is the actual inverse-gamma mean scale/(shape - 1).
    """
    if rule == "ratio":
        return prior.shape / prior.scale
    if rule == "mean":
        if prior.shape <= 1:
            raise InvalidParameter("inverse-gamma mean needs shape > 1")
        return prior.scale / (prior.shape - 1.0)
    raise InvalidParameter(f"unknown linearization rule {rule!r}")


def igamma_neg2_loglik(x, sigma2, y):
    """-2 log N(y; 0, x + sigma2) up to an additive constant."""
    v = x + sigma2
    return np.log(v) + y * y / v


@dataclass(frozen=True)
class IGammaSolution:
    number: int
    offset: LikelihoodOffset
    y_integrable: bool
    # "always" or "conditional" for x_hat > 0
    posterior_integrable: str


def igamma_solution_offsets(
    prior: IGammaParams,
    sigma2: float,
    y: float,
    x_hat: Optional[float] = None,
    rule: str = "ratio",
) -> tuple[IGammaSolution, ...]:
    """Four linearizations of the N(y; 0, x + sigma2) log-likelihood in (log x, 1/x).

    1. whole log-likelihood in log x;
    2. whole log-likelihood in 1/x;
    3. the log term in log x and the quadratic term in 1/x;
    4. split off log x exactly and linearize the rest in 1/x.

    ``x_hat`` defaults to :func:`default_linearization_point` of ``prior``.
    """
    if x_hat is None:
        x_hat = default_linearization_point(prior, rule)
    if not x_hat > 0:
        raise InvalidParameter("linearization point must be positive")
    if not sigma2 > 0:
        raise InvalidParameter("sigma2 must be positive")
    v = x_hat + sigma2
    y2 = y * y
    # coefficients of -2 L; offsets are -1/2 of these
    c1 = (x_hat / v - y2 * x_hat / v**2, 0.0)
    c2 = (0.0, -(x_hat**2) / v + y2 * x_hat**2 / v**2)
    c3 = (x_hat / v, y2 * x_hat**2 / v**2)
    c4 = (1.0, sigma2 * x_hat / v + y2 * x_hat**2 / v**2)
    flags = (
        (False, "conditional"),
        (True, "conditional"),
        (True, "always"),
        (True, "always"),
    )
    out = []
    for i, (c, (yint, pint)) in enumerate(zip((c1, c2, c3, c4), flags), start=1):
        off = LikelihoodOffset("igamma", (-0.5 * c[0], -0.5 * c[1]))
        out.append(IGammaSolution(i, off, yint, pint))
    return tuple(out)


def igamma_posterior(prior: IGammaParams, offset: LikelihoodOffset) -> IGammaParams:
    eta = conjugate_update(prior.natural(), offset)
    return IGammaParams(-eta.values[0] - 1.0, -eta.values[1])
