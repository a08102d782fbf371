"""Numerical self-checks and small demonstrations behind the CLI.

The gradient checks compare analytic matrix gradients with central finite
differences of independently written objective functions, so an error in a
shared helper cannot cancel out.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import argrelmax

from .errors import PosteriorImproper
from .expfam import (
    LikelihoodOffset,
    NaturalParam,
    check_conjugacy_scalar,
    conjugate_update,
    normalize_scalar_density,
    sin_example_offset,
    trig_loglik,
)
from .lll import (
    IGammaParams,
    default_linearization_point,
    igamma_neg2_loglik,
    igamma_posterior,
    igamma_solution_offsets,
    linearize_wrt_transform,
)
from .linalg import sym
from .oracle import RngStream
from .randmat import (
    EttModel,
    KinematicBelief,
    MeasurementBatch,
    exact_neg2_loglik,
    ffk_increment,
    grad_f1,
    grad_f2,
    lemma2_factorize,
    linearized_increment,
)

GRAD_RTOL = 1e-5


def random_spd(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T + d * np.eye(d)) / d


def entrywise_fd(f, Z, rel_step=1e-6):
    """Central differences over every entry of Z independently (no symmetry assumed)."""
    Z = np.asarray(Z, dtype=float)
    g = np.empty_like(Z)
    for idx in np.ndindex(Z.shape):
        h = rel_step * max(1.0, abs(Z[idx]))
        Zp, Zm = Z.copy(), Z.copy()
        Zp[idx] += h
        Zm[idx] -= h
        g[idx] = (f(Zp) - f(Zm)) / (2 * h)
    return g


def max_relative_error(analytic, reference) -> float:
    """Largest entry error relative to the largest reference entry."""
    analytic = np.asarray(analytic, dtype=float)
    reference = np.asarray(reference, dtype=float)
    denom = max(np.abs(reference).max(), np.finfo(float).tiny)
    return float(np.abs(analytic - reference).max() / denom)


# independent forms: log|s I + R Z| and tr(N Z (s I + R Z)^-1), valid for any square Z
def _f1_general(Z, s, R):
    sign, val = np.linalg.slogdet(s * np.eye(Z.shape[0]) + R @ Z)
    return val if sign > 0 else math.nan


def _f2_general(Z, s, R, N):
    return float(np.trace(N @ Z @ np.linalg.inv(s * np.eye(Z.shape[0]) + R @ Z)))


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.value) and self.value < self.tolerance)


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def as_dict(self):
        return {
            "passed": self.passed,
            "checks": [
                {"name": r.name, "value": r.value, "tolerance": r.tolerance, "passed": r.passed}
                for r in self.results
            ],
        }


def check_matrix_gradients(n_instances=50, dims=(2, 3), seed=0) -> list[CheckResult]:
    """Analytic F1, F2 against finite differences on random SPD instances."""
    rng = np.random.default_rng(seed)
    out = []
    for d in dims:
        e1 = e2 = 0.0
        for _ in range(n_instances):
            Z = random_spd(rng, d)
            R = random_spd(rng, d)
            s = rng.uniform(0.1, 2.0)
            E = rng.standard_normal((d, 5))
            N = E @ E.T
            fd1 = entrywise_fd(lambda z: _f1_general(z, s, R), Z)
            fd2 = entrywise_fd(lambda z: _f2_general(z, s, R, N), Z)
            e1 = max(e1, max_relative_error(grad_f1(Z, s, R), fd1))
            e2 = max(e2, max_relative_error(grad_f2(Z, s, R, N), fd2))
        out.append(CheckResult(f"grad_f1 d={d}", e1, GRAD_RTOL))
        out.append(CheckResult(f"grad_f2 d={d}", e2, GRAD_RTOL))
    return out


def check_linearization_tangency(n_instances=50, seed=0) -> list[CheckResult]:
    """Finite-difference slopes of the variance log-likelihood against the closed-form offsets.

    Whole-log-likelihood linearizations in log x and in 1/x must match the
    derivative of L at the nominal point.
    """
    rng = np.random.default_rng(seed)
    err_log = err_inv = 0.0
    for _ in range(n_instances):
        prior = IGammaParams(rng.uniform(1.5, 6.0), rng.uniform(0.5, 4.0))
        sigma2 = rng.uniform(0.1, 3.0)
        y = rng.normal(0.0, 2.0)
        x_hat = default_linearization_point(prior)
        sols = igamma_solution_offsets(prior, sigma2, y, x_hat)

        def L(x):
            return -0.5 * igamma_neg2_loglik(x, sigma2, y)

        lin_log = linearize_wrt_transform(L, np.log, np.exp, x_hat)
        lin_inv = linearize_wrt_transform(L, lambda x: 1.0 / x, lambda z: 1.0 / z, x_hat)
        err_log = max(err_log, max_relative_error(sols[0].offset.values[0], lin_log.gradient))
        err_inv = max(err_inv, max_relative_error(sols[1].offset.values[1], lin_inv.gradient))
    return [
        CheckResult("linearization slope in log x", err_log, GRAD_RTOL),
        CheckResult("linearization slope in 1/x", err_inv, GRAD_RTOL),
    ]


def random_ett_instance(rng: np.random.Generator, d=2, m=None):
    n = 2 * d
    H = np.hstack([np.eye(d), np.zeros((d, n - d))])
    R = random_spd(rng, d, rng.uniform(0.5, 2.0))
    model = EttModel(H, rng.uniform(0.1, 1.0), R)
    X_hat = random_spd(rng, d, rng.uniform(1.0, 4.0))
    x_hat = rng.standard_normal(n)
    m = int(rng.integers(2, 12)) if m is None else m
    pts = H @ x_hat + rng.standard_normal((m, d)) @ np.linalg.cholesky(
        model.s * X_hat + R
    ).T
    return model, MeasurementBatch(pts), x_hat, X_hat


@dataclass
class TangencyStats:
    difference_variance: float
    constant_error: float
    gradient_error: float


def lemma2_tangency(model, batch, x_hat, X_hat, rng, n_directions=20, eps=1e-4) -> TangencyStats:
    """Compare exact and factorized -2 log-likelihoods near the nominal extent.

    Perturbations are ``Z = Zh^(1/2) (I + eps S) Zh^(1/2)`` with ``Z = X^-1``
    and random unit-norm symmetric ``S``. The difference exact - approximate
    is constant to first order, so its variance over directions is O(eps^4).
    """
    fac = lemma2_factorize(model, batch, x_hat, X_hat)
    Zh = np.linalg.inv(fac.X_hat)
    w, v = np.linalg.eigh(Zh)
    root = (v * np.sqrt(w)) @ v.T
    d = Zh.shape[0]

    def diff(Z):
        X = np.linalg.inv(Z)
        return exact_neg2_loglik(model, batch, x_hat, X) - fac.neg2_loglik(x_hat, X)

    vals = []
    for _ in range(n_directions):
        S = rng.standard_normal((d, d))
        S = S + S.T
        S /= np.linalg.norm(S)
        vals.append(diff(root @ (np.eye(d) + eps * S) @ root))
    at_nominal = diff(Zh)
    const_err = abs(at_nominal - fac.taylor_constant) / max(1.0, abs(at_nominal))

    def exact_in_Z(Z):
        C = model.s * np.linalg.inv(Z) + model.R
        e = batch.points - model.H @ x_hat
        sign, logdet = np.linalg.slogdet(C)
        return batch.count * logdet + np.trace(np.linalg.solve(C, e.T @ e))

    fd = entrywise_fd(exact_in_Z, Zh)
    grad_err = max_relative_error(fac.grad_inverse_extent(), fd)
    return TangencyStats(float(np.var(vals)), float(const_err), float(grad_err))


def check_lemma2(n_instances=20, seed=0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    var = const = grad = 0.0
    for _ in range(n_instances):
        stats = lemma2_tangency(*random_ett_instance(rng), rng)
        var = max(var, stats.difference_variance)
        const = max(const, stats.constant_error)
        grad = max(grad, stats.gradient_error)
    return [
        CheckResult("factorization difference variance", var, 1e-8),
        CheckResult("factorization constant", const, 1e-8),
        CheckResult("factorization Z-gradient", grad, GRAD_RTOL),
    ]


def run_gradcheck(seed=0) -> GradcheckReport:
    report = GradcheckReport()
    report.results += check_matrix_gradients(seed=seed)
    report.results += check_linearization_tangency(seed=seed)
    report.results += check_lemma2(seed=seed)
    return report


# --- conditional moments of the extent increments ----------------------------------------


def simulate_increments(
    model: EttModel,
    kin: KinematicBelief,
    X_hat,
    n_batches: int,
    stream: RngStream,
    m_rate: float = 10.0,
    m_min: int = 2,
) -> dict:
    """Per-batch ``M / m`` for FFK, ULL and LLL with the true extent fixed at ``X_hat``.

    Each batch draws a true state from the kinematic prior, a size
    ``max(m_min, Poisson(m_rate))`` and that many measurements. Batches of
    equal size are processed as one stacked array.
    """
    H, s, R = model.H, model.s, model.R
    X_hat = np.asarray(X_hat, dtype=float)
    d = model.d
    rng = stream.rng
    ms = np.maximum(m_min, rng.poisson(m_rate, n_batches))
    HPH = H @ kin.cov @ H.T
    noise_chol = np.linalg.cholesky(s * X_hat + R)
    state_chol = np.linalg.cholesky(kin.cov)
    pred = H @ kin.mean
    out = {name: np.empty((n_batches, d, d)) for name in ("FFK", "ULL", "LLL")}
    for m in np.unique(ms):
        idx = np.flatnonzero(ms == m)
        k = idx.size
        x = kin.mean + rng.standard_normal((k, kin.dim)) @ state_chol.T
        y = (x @ H.T)[:, None, :] + rng.standard_normal((k, m, d)) @ noise_chol.T
        e = y - pred
        Y = np.einsum("kmi,kmj->kij", e, e) / m
        ybar = y.mean(axis=1)
        eb = ybar - pred
        Y1 = np.einsum("ki,kj->kij", eb, eb)
        c = y - ybar[:, None, :]
        Y2 = np.einsum("kmi,kmj->kij", c, c) / m
        out["ULL"][idx] = linearized_increment(Y, HPH + s * X_hat + R, X_hat, s, m) / m
        out["LLL"][idx] = linearized_increment(Y, s * X_hat + R, X_hat, s, m) / m
        out["FFK"][idx] = sym(ffk_increment(Y1, Y2, X_hat, HPH, s, R, m)) / m
    return out


def relative_bias(samples, X_hat) -> float:
    """``|mean(samples) - X_hat|_F / |X_hat|_F``."""
    return float(np.linalg.norm(samples.mean(axis=0) - X_hat) / np.linalg.norm(X_hat))


def min_eig_with_se(samples, X_hat):
    """Smallest eigenvalue of ``mean(samples) - X_hat`` and its MC standard error.

    The standard error is that of the Rayleigh quotient along the minimizing
    eigenvector.
    """
    D = samples.mean(axis=0) - X_hat
    w, v = np.linalg.eigh(D)
    u = v[:, 0]
    q = np.einsum("i,nij,j->n", u, samples, u)
    return float(w[0]), float(q.std(ddof=1) / math.sqrt(len(q)))


# --- conjugacy demonstrations ---------------------------------------------------------

TRIG_PRIOR = NaturalParam("trig", (-0.1, 0.0, 0.0, 0.0))


@dataclass
class TrigDemo:
    y: float
    grid: np.ndarray
    prior_pdf: np.ndarray
    likelihood: np.ndarray
    posterior_pdf: np.ndarray
    posterior_mass: float
    n_likelihood_maxima: int


def trig_demo(y=3.0, interval=(-30.0, 30.0), n_points=2**16 + 1, n_refined=2**18 + 1) -> TrigDemo:
    """Gaussian prior times the multimodal likelihood; the posterior stays in the trig family."""
    post = conjugate_update(TRIG_PRIOR, sin_example_offset(y))

    def log_of(eta):
        a, b, c, d = eta.flat()
        return lambda x: a * x * x + b * x + c * np.cos(x) + d * np.sin(x)

    _, prior_pdf = normalize_scalar_density(log_of(TRIG_PRIOR), interval, n_points)
    _, post_pdf = normalize_scalar_density(log_of(post), interval, n_points)
    fine = np.linspace(*interval, n_refined)
    mass = float(np.trapezoid(post_pdf(fine), fine))
    grid = np.linspace(*interval, 2001)
    lik = np.exp(trig_loglik(grid, y))
    n_max = len(argrelmax(lik)[0])
    return TrigDemo(y, grid, prior_pdf(grid), lik, post_pdf(grid), mass, n_max)


@dataclass
class VarianceDemo:
    prior: IGammaParams
    sigma2: float
    y: float
    solutions: tuple
    numeric_y_integrable: tuple
    posteriors: tuple  # IGammaParams or None when improper
    grid: np.ndarray = None
    exact_pdf: np.ndarray = None
    approx_pdfs: tuple = ()


def _igamma_logpdf(p: IGammaParams, x):
    return (
        p.shape * math.log(p.scale) - math.lgamma(p.shape)
        - (p.shape + 1.0) * np.log(x) - p.scale / x
    )


def variance_demo(prior=IGammaParams(3.0, 2.0), sigma2=1.0, y=2.0, n_points=4001) -> VarianceDemo:
    """The four (log x, 1/x) linearizations of a Gaussian likelihood with unknown variance."""
    x_hat = default_linearization_point(prior)
    sols = igamma_solution_offsets(prior, sigma2, y, x_hat)
    probes = x_hat * np.array([0.1, 1.0, 10.0, 100.0])
    t_hat = np.array([math.log(x_hat), 1.0 / x_hat])
    numeric = []
    for k in range(4):

        def offset_fn(yy, k=k):
            return igamma_solution_offsets(prior, sigma2, yy, x_hat)[k].offset

        def log_base(yy, k=k):
            off = offset_fn(yy).flat()
            return -0.5 * igamma_neg2_loglik(x_hat, sigma2, yy) - off @ t_hat

        rep = check_conjugacy_scalar(prior.natural(), offset_fn, y, log_base, probes)
        numeric.append(rep.likelihood_integrable_y)

    posts = []
    for sol in sols:
        try:
            posts.append(igamma_posterior(prior, sol.offset))
        except PosteriorImproper:
            posts.append(None)

    hi = 20.0 * max(x_hat, prior.scale)
    grid = np.linspace(hi / n_points, hi, n_points)

    def exact_log(x):
        return _igamma_logpdf(prior, x) - 0.5 * igamma_neg2_loglik(x, sigma2, y)

    _, exact_pdf = normalize_scalar_density(exact_log, (grid[0], grid[-1]), 2**15 + 1)
    approx = tuple(
        np.exp(_igamma_logpdf(p, grid)) if p is not None else np.full_like(grid, np.nan)
        for p in posts
    )
    return VarianceDemo(
        prior, sigma2, y, sols, tuple(numeric), tuple(posts), grid, exact_pdf(grid), approx
    )


def improper_solution2_instance():
    """Small-y instance where the 1/x linearization yields a negative posterior scale."""
    return IGammaParams(3.0, 0.05), 1.0, 0.0


def write_trig_csv(demo: TrigDemo, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "prior", "likelihood", "posterior"])
        for row in zip(demo.grid, demo.prior_pdf, demo.likelihood, demo.posterior_pdf):
            w.writerow([format(v, ".17g") for v in row])


def write_variance_csv(demo: VarianceDemo, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "exact", "solution1", "solution2", "solution3", "solution4"])
        for i, x in enumerate(demo.grid):
            row = [x, demo.exact_pdf[i]] + [a[i] for a in demo.approx_pdfs]
            w.writerow([format(v, ".17g") for v in row])
