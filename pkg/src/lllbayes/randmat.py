"""Random-matrix extended target updates.

Measurements of one scan are modelled as ``y_j ~ N(H x, s X + R)`` with a
Gaussian prior on the kinematic state ``x`` and an inverse-Wishart prior on
the extent ``X``. The kinematic update is shared by all methods; the extent
update adds an increment ``M`` to the inverse-Wishart scale:

* FFK: moment-matched sandwich of the spread decomposition ``Y = Y1 + Y2``;
* LLL: log-likelihood linearization in ``X^-1`` (biased when the predicted
  position is uncertain);
* ULL: the linearized increment with the predicted-position uncertainty
  ``H P H^T`` folded into the innovation covariance (unbiased).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInput, InvalidParameter, MeanUndefined, NumericalFailure
from .expfam import GaussianParams, InvWishartParams, invwishart_mean
from .linalg import (
    floor_eigenvalues,
    frozen,
    logdet_spd,
    require_spd,
    solve,
    spd_power,
    sym,
)

KinematicBelief = GaussianParams
ExtentBelief = InvWishartParams

SPD_REPAIR_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class EttModel:
    H: np.ndarray
    s: float
    R: np.ndarray

    def __post_init__(self):
        H = frozen(np.atleast_2d(np.asarray(self.H, dtype=float)))
        R = frozen(require_spd(self.R, "R"))
        if not self.s > 0:
            raise InvalidParameter("scaling s must be positive")
        if H.shape[0] != R.shape[0]:
            raise InvalidParameter("H rows must match the measurement dimension")
        if np.linalg.matrix_rank(H) != H.shape[0]:
            raise InvalidParameter("H must have full row rank")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "s", float(self.s))

    @property
    def d(self):
        return self.H.shape[0]

    @property
    def n(self):
        return self.H.shape[1]

    @classmethod
    def planar(cls, s=0.25, noise_std=100.0, n=4):
        H = np.hstack([np.eye(2), np.zeros((2, n - 2))])
        return cls(H, s, noise_std**2 * np.eye(2))


@dataclass(frozen=True, eq=False)
class MeasurementBatch:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1) if pts.size else pts.reshape(0, 1)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InvalidInput("a measurement batch needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("measurements must be finite")
        object.__setattr__(self, "points", frozen(pts))

    @property
    def count(self):
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class MotionModel:
    A: np.ndarray
    Q: np.ndarray
    tau: float
    tau0: float

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if np.linalg.eigvalsh(sym(Q))[0] < -1e-12 * max(1.0, np.abs(Q).max()):
            raise InvalidParameter("process noise must be positive semidefinite")
        if not (self.tau > 0 and self.tau0 > 0):
            raise InvalidParameter("tau and tau0 must be positive")
        object.__setattr__(self, "A", frozen(self.A))
        object.__setattr__(self, "Q", frozen(sym(Q)))

    @classmethod
    def constant_velocity(cls, tau=10.0, sigma_v=0.1, tau0=15.0, d=2):
        I = np.eye(d)
        Z = np.zeros((d, d))
        A = np.block([[I, tau * I], [Z, I]])
        Q = sigma_v**2 * np.block(
            [[tau**4 / 4 * I, tau**3 / 2 * I], [tau**3 / 2 * I, tau**2 * I]]
        )
        return cls(A, Q, tau, tau0)


@dataclass
class UpdateDiagnostics:
    """Mutable counters owned by one filter loop."""

    spd_repairs: int = 0


# --- measurement statistics -------------------------------------------------


def batch_stats(b: MeasurementBatch, predicted):
    """Mean of the batch and its spread ``Y`` around the predicted measurement."""
    predicted = np.asarray(predicted, dtype=float).reshape(-1)
    e = b.points - predicted
    return b.points.mean(axis=0), sym(e.T @ e) / b.count


def spread_decomposition(b: MeasurementBatch, predicted):
    """Split ``Y`` into the mean-innovation part ``Y1`` and the scatter ``Y2``."""
    ybar = b.points.mean(axis=0)
    e = ybar - np.asarray(predicted, dtype=float).reshape(-1)
    c = b.points - ybar
    return np.outer(e, e), sym(c.T @ c) / b.count


def _extent_point(ext: ExtentBelief):
    return invwishart_mean(ext)


# --- kinematic update -------------------------------------------------------


def kinematic_update(
    prior: KinematicBelief, model: EttModel, b: MeasurementBatch, X_hat
) -> KinematicBelief:
    """Gain-form update with effective noise ``(s X_hat + R) / m`` on the batch mean."""
    H, P = model.H, prior.cov
    ybar = b.points.mean(axis=0)
    S = H @ P @ H.T + (model.s * np.asarray(X_hat) + model.R) / b.count
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as err:
        raise NumericalFailure("innovation covariance is not positive definite") from err
    K = solve(S, H @ P).T
    mean = prior.mean + K @ (ybar - H @ prior.mean)
    cov = sym(P - K @ S @ K.T)
    return KinematicBelief(mean, cov)


def kinematic_update_information(
    prior: KinematicBelief, model: EttModel, b: MeasurementBatch, X_hat
) -> KinematicBelief:
    """The same update in information form."""
    H = model.H
    m = b.count
    ybar = b.points.mean(axis=0)
    Cinv_H = solve(model.s * np.asarray(X_hat) + model.R, H)
    P_inv_prior = np.linalg.inv(prior.cov)
    info = sym(P_inv_prior + m * H.T @ Cinv_H)
    cov = sym(np.linalg.inv(info))
    mean = cov @ (P_inv_prior @ prior.mean + m * Cinv_H.T @ ybar)
    return KinematicBelief(mean, cov)


# --- extent increments (accept stacked inputs) -------------------------------


def linearized_increment(Y, C, X_hat, s, m):
    """``m X + m s X C^-1 (Y - C) C^-1 X``, computed with two solves against C."""
    G = solve(C, X_hat)
    Gt = np.swapaxes(G, -1, -2)
    m = np.asarray(m, dtype=float)[..., None, None]
    return sym(m * X_hat + m * s * (Gt @ (Y - C) @ G))


def ffk_increment(Y1, Y2, X_hat, HPH, s, R, m):
    """Sandwich increment built from the conditional means of ``Y1`` and ``Y2``."""
    m = np.asarray(m, dtype=float)[..., None, None]
    noise = s * X_hat + R
    Ybar1 = HPH + noise / m
    Ybar2 = (m - 1.0) / m * noise
    Xh = spd_power(X_hat, 0.5)
    A1 = Xh @ spd_power(Ybar1, -0.5)
    A2 = Xh @ spd_power(Ybar2, -0.5)
    T = np.swapaxes
    return sym(A1 @ Y1 @ T(A1, -1, -2) + (m - 1.0) * (A2 @ Y2 @ T(A2, -1, -2)))


def _apply_increment(prior: ExtentBelief, M, m, diagnostics):
    V = prior.scale + M
    level = SPD_REPAIR_RTOL * np.trace(prior.scale) / prior.dim
    V, repaired = floor_eigenvalues(V, level)
    if repaired and diagnostics is not None:
        diagnostics.spd_repairs += 1
    return ExtentBelief(prior.dof + m, V)


def ffk_extent_update(
    prior: ExtentBelief,
    kin_prior: KinematicBelief,
    model: EttModel,
    b: MeasurementBatch,
    diagnostics: Optional[UpdateDiagnostics] = None,
) -> ExtentBelief:
    m = b.count
    if m < 2:
        raise InvalidInput("FFK needs at least two measurements")
    X_hat = _extent_point(prior)
    H = model.H
    Y1, Y2 = spread_decomposition(b, H @ kin_prior.mean)
    M = ffk_increment(Y1, Y2, X_hat, H @ kin_prior.cov @ H.T, model.s, model.R, m)
    return _apply_increment(prior, M, m, diagnostics)


def ull_extent_update(
    prior: ExtentBelief,
    kin_prior: KinematicBelief,
    model: EttModel,
    b: MeasurementBatch,
    diagnostics: Optional[UpdateDiagnostics] = None,
) -> ExtentBelief:
    X_hat = _extent_point(prior)
    H = model.H
    _, Y = batch_stats(b, H @ kin_prior.mean)
    C = H @ kin_prior.cov @ H.T + model.s * X_hat + model.R
    M = linearized_increment(Y, C, X_hat, model.s, b.count)
    return _apply_increment(prior, M, b.count, diagnostics)


def lll_extent_update(
    prior: ExtentBelief,
    model: EttModel,
    b: MeasurementBatch,
    x_hat,
    diagnostics: Optional[UpdateDiagnostics] = None,
) -> ExtentBelief:
    X_hat = _extent_point(prior)
    _, Y = batch_stats(b, model.H @ np.asarray(x_hat, dtype=float))
    C = model.s * X_hat + model.R
    M = linearized_increment(Y, C, X_hat, model.s, b.count)
    return _apply_increment(prior, M, b.count, diagnostics)


# --- full measurement update --------------------------------------------------


def _ffk(kin, ext, model, b, diagnostics):
    return ffk_extent_update(ext, kin, model, b, diagnostics)


def _ull(kin, ext, model, b, diagnostics):
    return ull_extent_update(ext, kin, model, b, diagnostics)


def _lll(kin, ext, model, b, diagnostics):
    return lll_extent_update(ext, model, b, kin.mean, diagnostics)


# Extent updates by method name. Other methods (e.g. a variational update)
# plug in through register_method with the same signature.
EXTENT_UPDATES: dict[str, Callable] = {"FFK": _ffk, "ULL": _ull, "LLL": _lll}


def register_method(name: str, extent_update: Callable) -> None:
    EXTENT_UPDATES[name.upper()] = extent_update


def measurement_update(
    method: str,
    kin: KinematicBelief,
    ext: ExtentBelief,
    model: EttModel,
    b: MeasurementBatch,
    diagnostics: Optional[UpdateDiagnostics] = None,
):
    """Joint kinematic and extent update, both linearized at the prior."""
    try:
        extent_update = EXTENT_UPDATES[method.upper()]
    except KeyError:
        raise InvalidParameter(f"unknown update method {method!r}") from None
    X_hat = _extent_point(ext)
    kin_post = kinematic_update(kin, model, b, X_hat)
    ext_post = extent_update(kin, ext, model, b, diagnostics)
    return kin_post, ext_post


# --- time update ---------------------------------------------------------------


def time_update(kin: KinematicBelief, ext: ExtentBelief, motion: MotionModel):
    """Kalman prediction plus exponential forgetting of the extent statistics.

    The degrees of freedom decay by exp(-tau/tau0), floored at 2d + 3, and the
    scale is rescaled so the extent mean is unchanged.
    """
    d = ext.dim
    mean = motion.A @ kin.mean
    cov = sym(motion.A @ kin.cov @ motion.A.T + motion.Q)
    old = ext.dof - 2 * d - 2
    if old <= 0:
        raise MeanUndefined("extent mean undefined before forgetting")
    dof = max(math.exp(-motion.tau / motion.tau0) * ext.dof, 2 * d + 3.0)
    scale = ext.scale * ((dof - 2 * d - 2) / old)
    return KinematicBelief(mean, cov), ExtentBelief(dof, scale)


# --- likelihood factorization ------------------------------------------------


def exact_neg2_loglik(model: EttModel, b: MeasurementBatch, x, X) -> float:
    """-2 log prod_j N(y_j; H x, s X + R), dropping the 2 pi constant."""
    C = model.s * np.asarray(X, dtype=float) + model.R
    e = b.points - model.H @ np.asarray(x, dtype=float)
    return float(b.count * logdet_spd(C) + np.sum(e * solve(C, e.T).T))


def lemma2_scale_direct(model: EttModel, b: MeasurementBatch, x_hat, X_hat):
    """Inverse-Wishart increment before the matrix inversion lemma is applied."""
    X_hat = np.asarray(X_hat, dtype=float)
    s, R = model.s, model.R
    C = s * X_hat + R
    e = b.points - model.H @ np.asarray(x_hat, dtype=float)
    G = solve(C, X_hat)
    info = s * np.linalg.inv(R) + np.linalg.inv(X_hat)
    return sym(b.count * np.linalg.inv(info) + s * G.T @ (e.T @ e) @ G)


@dataclass(frozen=True, eq=False)
class Lemma2Factors:
    """Approximate likelihood ``prod_j N(y_j; H x, s X_hat + R) * IW(X; m, M)``."""

    model: EttModel
    batch: MeasurementBatch
    x_hat: np.ndarray
    X_hat: np.ndarray
    gaussian_cov: np.ndarray
    m: int
    M: np.ndarray

    def neg2_loglik(self, x, X) -> float:
        """-2 log of the factorized approximation (constants dropped)."""
        e = self.batch.points - self.model.H @ np.asarray(x, dtype=float)
        gauss = np.sum(e * solve(self.gaussian_cov, e.T).T)
        X = np.asarray(X, dtype=float)
        iw = self.m * logdet_spd(X) + np.trace(solve(X, self.M))
        return float(gauss + iw)

    def grad_inverse_extent(self):
        """Gradient of :meth:`neg2_loglik` with respect to Z = X^-1 at the nominal."""
        return sym(self.M - self.m * self.X_hat)

    @property
    def taylor_constant(self) -> float:
        """Exact minus approximate -2 log-likelihood at the nominal point."""
        Z = np.linalg.inv(self.X_hat)
        s, R = self.model.s, self.model.R
        e = self.batch.points - self.model.H @ self.x_hat
        N = e.T @ e
        F1 = grad_f1(Z, s, R)
        F2 = grad_f2(Z, s, R, N)
        return float(
            self.m * (f1(Z, s, R) - np.sum(F1 * Z)) - np.sum(F2 * Z)
        )


def lemma2_factorize(model: EttModel, b: MeasurementBatch, x_hat, X_hat) -> Lemma2Factors:
    X_hat = require_spd(X_hat, "X_hat")
    x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
    C = model.s * X_hat + model.R
    _, Y = batch_stats(b, model.H @ x_hat)
    M = linearized_increment(Y, C, X_hat, model.s, b.count)
    return Lemma2Factors(model, b, frozen(x_hat), frozen(X_hat), frozen(C), b.count, frozen(M))


# --- matrix gradients -------------------------------------------------------------


def f1(Z, s, R) -> float:
    """log|s I + Z^(1/2) R Z^(1/2)|, evaluated as log|Z| + log|s Z^-1 + R|."""
    Z = np.asarray(Z, dtype=float)
    return float(logdet_spd(Z) + logdet_spd(s * np.linalg.inv(Z) + R))


def f2(Z, s, R, N) -> float:
    """tr(N (s Z^-1 + R)^-1)."""
    Z = np.asarray(Z, dtype=float)
    return float(np.trace(solve(s * np.linalg.inv(Z) + R, np.asarray(N, dtype=float))))


def grad_f1(Z, s, R) -> np.ndarray:
    """Entrywise derivative of :func:`f1`: (Z + s R^-1)^-T."""
    Z = np.asarray(Z, dtype=float)
    R = np.asarray(R, dtype=float)
    A = Z + s * np.linalg.inv(R)
    return solve(A, np.eye(A.shape[0])).T


def grad_f2(Z, s, R, N) -> np.ndarray:
    """Entrywise derivative of :func:`f2`: s [Z^-1 B^-1 N B^-1 Z^-1]^T, B = s Z^-1 + R."""
    Z = np.asarray(Z, dtype=float)
    Zi = np.linalg.inv(Z)
    B = s * Zi + np.asarray(R, dtype=float)
    Bi = solve(B, np.eye(B.shape[0]))
    return (s * Zi @ Bi @ np.asarray(N, dtype=float) @ Bi @ Zi).T
