"""Seeded sampling primitives and the importance-sampling reference posterior."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateWeights, InvalidParameter
from .expfam import GaussianParams, InvWishartParams
from .linalg import batch_inv_logdet, require_spd, sym

U64 = 2**64


@dataclass(frozen=True)
class RngStream:
    """Independent random stream keyed by (seed, stream_id).

    The generator state depends only on the key, so a run draws the same
    numbers no matter which worker executes it.
    """

    seed: int
    stream_id: tuple = ()
    algorithm: str = "PCG64"
    rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < U64:
            raise InvalidParameter("seed must be an unsigned 64-bit integer")
        if self.algorithm != "PCG64":
            raise InvalidParameter(f"unsupported generator {self.algorithm!r}")
        sid = tuple(int(i) for i in np.atleast_1d(self.stream_id)) if self.stream_id != () else ()
        object.__setattr__(self, "stream_id", sid)
        seq = np.random.SeedSequence(int(self.seed), spawn_key=sid)
        object.__setattr__(self, "rng", np.random.Generator(np.random.PCG64(seq)))


def _shape(size):
    if size is None:
        return ()
    return (size,) if np.isscalar(size) else tuple(size)


def sample_gaussian(stream: RngStream, mean, cov, size=None):
    mean = np.asarray(mean, dtype=float).reshape(-1)
    L = np.linalg.cholesky(require_spd(cov, "cov"))
    z = stream.rng.standard_normal(_shape(size) + (mean.shape[0],))
    return mean + z @ L.T


def sample_poisson(stream: RngStream, lam, size=None):
    if not lam > 0:
        raise InvalidParameter("Poisson rate must be positive")
    return stream.rng.poisson(lam, size=size)


def sample_wishart(stream: RngStream, n, scale, size=None):
    """Wishart(n, scale) draws by the Bartlett decomposition (mean n * scale)."""
    scale = require_spd(scale, "scale")
    d = scale.shape[0]
    if not n > d - 1:
        raise InvalidParameter(f"Wishart degrees of freedom must exceed {d - 1}")
    shape = _shape(size)
    L = np.linalg.cholesky(scale)
    A = np.zeros(shape + (d, d))
    idx = np.arange(d)
    A[..., idx, idx] = np.sqrt(stream.rng.chisquare(n - idx, size=shape + (d,)))
    lo = np.tril_indices(d, -1)
    A[(Ellipsis,) + lo] = stream.rng.standard_normal(shape + (lo[0].size,))
    LA = L @ A
    return sym(LA @ np.swapaxes(LA, -1, -2))


def sample_invwishart(stream: RngStream, nu, V, size=None):
    """IW(nu, V) draws: X^-1 ~ Wishart(nu - d - 1, V^-1), so E[X] = V / (nu - 2d - 2)."""
    p = InvWishartParams(nu, V)
    d = p.dim
    W = sample_wishart(stream, p.dof - d - 1, np.linalg.inv(p.scale), size)
    return sym(batch_inv_logdet(W)[0])


@dataclass(frozen=True, eq=False)
class OracleResult:
    x_opt: np.ndarray
    X_opt: np.ndarray
    ess: float
    n_samples: int
    x_se: np.ndarray = None
    X_se: np.ndarray = None


def log_likelihood_samples(xs, Xs, model, batch):
    """Sum over the batch of log N(y_j; H x_i, s X_i + R) for every sample i, up to a constant.

    Uses sum_j (y_j - H x)(y_j - H x)^T = S + m (ybar - H x)(ybar - H x)^T.
    """
    pts = batch.points
    m = pts.shape[0]
    ybar = pts.mean(axis=0)
    C = model.s * Xs + model.R
    Ci, logdet = batch_inv_logdet(C)
    # overflow here means a vanishing weight, handled by the caller
    with np.errstate(over="ignore", invalid="ignore"):
        c = pts - ybar
        S = c.T @ c
        e = ybar - xs @ model.H.T
        quad = np.einsum("nij,ji->n", Ci, S) + m * np.einsum("ni,nij,nj->n", e, Ci, e)
        out = -0.5 * (m * logdet + quad)
    return np.where(np.isnan(logdet), -np.inf, out)


def importance_posterior(
    kin: GaussianParams,
    ext: InvWishartParams,
    model,
    batch,
    n_samples: int,
    stream: RngStream,
) -> OracleResult:
    """Posterior means by self-normalized importance sampling from the prior."""
    if n_samples < 1000:
        raise InvalidParameter("n_samples must be at least 1000")
    xs = sample_gaussian(stream, kin.mean, kin.cov, n_samples)
    Xs = sample_invwishart(stream, ext.dof, ext.scale, n_samples)
    logw = log_likelihood_samples(xs, Xs, model, batch)
    logw = np.where(np.isnan(logw), -np.inf, logw)
    if not np.any(np.isfinite(logw)):
        raise DegenerateWeights("all importance weights are zero")
    w = np.exp(logw - logsumexp(logw))
    w /= w.sum()
    x_opt = w @ xs
    X_opt = sym(np.einsum("n,nij->ij", w, Xs))
    w2 = w * w
    x_se = np.sqrt(w2 @ (xs - x_opt) ** 2)
    X_se = np.sqrt(np.einsum("n,nij->ij", w2, (Xs - X_opt) ** 2))
    ess = 1.0 / w2.sum()
    return OracleResult(x_opt, X_opt, float(ess), int(n_samples), x_se, X_se)
