"""Small dense linear-algebra helpers for symmetric positive definite matrices.

All functions accept stacked matrices (leading batch axes) where noted so the
same code path serves single updates and vectorized Monte-Carlo checks.
"""

import numpy as np

from .errors import InvalidParameter, NumericalFailure

ASYMMETRY_RTOL = 1e-10
EIG_FLOOR_RTOL = 1e-12


def frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def sym(a):
    """Average with the transpose over the last two axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def as_symmetric(a, name="matrix"):
    """Return a symmetrized float copy of a square matrix.

    Inputs whose asymmetry exceeds ``ASYMMETRY_RTOL`` relative to their norm
    are rejected instead of silently repaired.
    """
    a = np.array(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidParameter(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidParameter(f"{name} has non-finite entries")
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > ASYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise InvalidParameter(f"{name} is not symmetric")
    return sym(a)


def is_spd(a):
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


def require_spd(a, name="matrix", exc=InvalidParameter):
    a = as_symmetric(a, name)
    if not is_spd(a):
        raise exc(f"{name} is not positive definite")
    return a


def spd_power(a, power):
    """Symmetric matrix power via eigendecomposition.

    Eigenvalues below ``EIG_FLOOR_RTOL * lambda_max`` are floored to that
    threshold before the power is taken. Works on stacks of matrices.
    """
    w, v = np.linalg.eigh(sym(a))
    top = w[..., -1:]
    if np.any(top <= 0):
        raise NumericalFailure("matrix has no positive eigenvalue")
    w = np.maximum(w, EIG_FLOOR_RTOL * top)
    return sym((v * w[..., None, :] ** power) @ np.swapaxes(v, -1, -2))


def spd_inverse(a):
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as err:
        raise NumericalFailure("matrix is not numerically positive definite") from err
    ci = np.linalg.inv(c)
    return sym(np.swapaxes(ci, -1, -2) @ ci)


def solve(a, b):
    try:
        out = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as err:
        raise NumericalFailure("singular linear system") from err
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("linear solve produced non-finite values")
    return out


def floor_eigenvalues(a, level):
    """Project a symmetric matrix onto {eigenvalues >= level}.

    Returns the (possibly unchanged) matrix and whether a repair happened.
    """
    w, v = np.linalg.eigh(sym(a))
    if w[0] >= level:
        return a, False
    w = np.maximum(w, level)
    return sym((v * w) @ v.T), True


def logdet_spd(a):
    sign, val = np.linalg.slogdet(a)
    if np.any(sign <= 0):
        raise NumericalFailure("determinant is not positive")
    return val


def batch_inv_logdet(a):
    """Inverses and log-determinants of a stack of symmetric matrices.

    2x2 stacks use the adjugate formula, which is several times faster than
    the LAPACK loop for the large sample stacks of Monte-Carlo code. Entries
    with non-positive determinant get logdet = nan.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[-1] == 2:
        p, q, r = a[..., 0, 0], a[..., 0, 1], a[..., 1, 1]
        det = p * r - q * q
        inv = np.empty_like(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv[..., 0, 0] = r / det
            inv[..., 1, 1] = p / det
            inv[..., 0, 1] = inv[..., 1, 0] = -q / det
            logdet = np.where(det > 0, np.log(np.where(det > 0, det, 1.0)), np.nan)
        return inv, logdet
    sign, logdet = np.linalg.slogdet(a)
    return np.linalg.inv(a), np.where(sign > 0, logdet, np.nan)
