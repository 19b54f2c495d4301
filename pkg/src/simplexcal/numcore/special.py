"""Numerically hardened special functions.

Everything downstream computes with log-location (raw logits) and goes
through these stabilized forms; exponentials of logits are never
materialized outside a log-sum-exp.
"""

import math

import numpy as np
from scipy import special as sp_special

from .. import kernels
from ..errors import ArgumentError, DomainError, NumericError


def log_sum_exp(v) -> float:
    """ln sum_i e^{v_i} of a nonempty vector, max-shifted against overflow."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ArgumentError(f"log_sum_exp expects a vector, got shape {arr.shape}")
    if arr.size == 0:
        raise ArgumentError("log_sum_exp of an empty vector")
    if np.isnan(arr).any():
        raise NumericError("log_sum_exp received NaN")
    m = float(np.max(arr))
    if math.isinf(m):
        # all -inf, or a genuine +inf input: the shifted sum is meaningless
        return m
    return m + math.log(float(np.sum(np.exp(arr - m))))


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise log_sum_exp of a (n, k) array (kernel-backed, no NaN check)."""
    return kernels.logsumexp_rows(np.ascontiguousarray(x, dtype=np.float64))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    return kernels.softmax_rows(np.ascontiguousarray(x, dtype=np.float64))


def softplus(x):
    """ln(1 + e^x), branch-stable, strictly positive. Scalar or array."""
    if np.isscalar(x) or np.ndim(x) == 0:
        xf = float(x)
        if math.isnan(xf):
            raise NumericError("softplus received NaN")
        return max(xf, 0.0) + math.log1p(math.exp(-abs(xf)))
    arr = np.asarray(x, dtype=np.float64)
    if np.isnan(arr).any():
        raise NumericError("softplus received NaN")
    return kernels.softplus_arr(np.ascontiguousarray(arr))


def sigmoid(x):
    """Logistic function; derivative of softplus."""
    return sp_special.expit(x)


def log_gamma(x):
    """ln Gamma(x) for x > 0. Scalar or array."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(arr > 0):
        raise DomainError("log_gamma requires strictly positive arguments")
    out = sp_special.gammaln(arr)
    return float(out) if np.ndim(x) == 0 else out


def digamma(x):
    """d/dx ln Gamma(x); backward companion of log_gamma."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(arr > 0):
        raise DomainError("digamma requires strictly positive arguments")
    out = sp_special.digamma(arr)
    return float(out) if np.ndim(x) == 0 else out
