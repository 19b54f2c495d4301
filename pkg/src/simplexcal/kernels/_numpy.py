"""Pure-numpy reference implementations of the hot kernels.

Semantics here are the contract; the numba twins in ``_numba.py`` must agree
within floating-point noise. All inputs are float64 arrays.
"""

import numpy as np

# Uniform draws below this are clamped before the double log of the Gumbel
# transform; -ln(-ln 0) is infinite.
_U_FLOOR = 1e-300


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise ln sum exp of a (n, k) array, max-shifted so nothing overflows."""
    m = np.max(x, axis=1)
    return m + np.log(np.sum(np.exp(x - m[:, None]), axis=1))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (n, k) array."""
    e = np.exp(x - np.max(x, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def softplus_arr(x: np.ndarray) -> np.ndarray:
    """Elementwise ln(1 + e^x), stable on both tails."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def concrete_draws(log_alpha: np.ndarray, lam: float, uniforms: np.ndarray) -> np.ndarray:
    """Transform (n, k) uniforms into n draws from a Concrete(exp(log_alpha), lam).

    Gumbel reparameterization: softmax((log_alpha + G) / lam) with
    G = -ln(-ln U).
    """
    g = -np.log(-np.log(np.maximum(uniforms, _U_FLOOR)))
    return softmax_rows((log_alpha[None, :] + g) / lam)


def concrete_log_density_rows(pis: np.ndarray, log_alpha: np.ndarray, lam: float) -> np.ndarray:
    """Log density of the Concrete distribution at each row of ``pis``.

    Computed entirely in log space: rows must be strictly positive.
    """
    import math

    k = log_alpha.shape[0]
    log_pi = np.log(pis)
    t = log_alpha[None, :] - lam * log_pi
    return (
        math.lgamma(k)
        + (k - 1) * math.log(lam)
        + np.sum(log_alpha)
        - (lam + 1.0) * np.sum(log_pi, axis=1)
        - k * logsumexp_rows(t)
    )


def mc_mean_rows(log_alpha: np.ndarray, lam: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Per-input Monte-Carlo mean of Concrete draws.

    log_alpha: (n, k) locations, lam: (n,) temperatures, uniforms: (n, p, k).
    Returns the (n, k) mean of p draws for each input.
    """
    g = -np.log(-np.log(np.maximum(uniforms, _U_FLOOR)))
    z = (log_alpha[:, None, :] + g) / lam[:, None, None]
    z -= np.max(z, axis=2, keepdims=True)
    e = np.exp(z)
    pis = e / np.sum(e, axis=2, keepdims=True)
    return np.mean(pis, axis=1)
