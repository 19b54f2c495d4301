"""Densities and samplers on the probability simplex.

Probability vectors are plain float64 arrays; ``check_prob_vector`` states
the contract (entries in [0, 1], sum 1 within 1e-9, length >= 2). Densities
are undefined on the simplex boundary; callers that synthesize labels clamp
them to the interior before coming here.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ArgumentError, DomainError
from .numcore.rng import Rng

# Sampled simplex coordinates are clamped here so a later log never sees an
# exact zero. Draws at this floor are treated as boundary hits upstream.
SAMPLE_FLOOR = 1e-300

PROB_SUM_TOL = 1e-9


def check_prob_vector(pi: np.ndarray) -> np.ndarray:
    """Validate and return a probability vector as a float64 array."""
    arr = np.asarray(pi, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ArgumentError(f"probability vector must be 1-D with length >= 2, got shape {arr.shape}")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError("probability vector entries must lie in [0, 1]")
    if abs(float(np.sum(arr)) - 1.0) > PROB_SUM_TOL:
        raise DomainError(f"probability vector sums to {np.sum(arr)!r}, not 1")
    return arr


@dataclass(frozen=True)
class ConcreteParams:
    """Concrete-distribution parameters: log-location (logits) and temperature."""

    log_location: np.ndarray
    temperature: float

    def __post_init__(self):
        arr = np.ascontiguousarray(self.log_location, dtype=np.float64)
        object.__setattr__(self, "log_location", arr)
        object.__setattr__(self, "temperature", float(self.temperature))
        if arr.ndim != 1 or arr.size < 2:
            raise ArgumentError("log_location must be a vector of length >= 2")
        if not np.all(np.isfinite(arr)):
            raise DomainError("log_location must be finite")
        if not (self.temperature > 0.0) or not math.isfinite(self.temperature):
            raise DomainError("temperature must be a positive finite real")

    @property
    def k(self) -> int:
        return self.log_location.size


@dataclass(frozen=True)
class DirichletParams:
    """Dirichlet concentration vector, all entries strictly positive."""

    concentration: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.concentration, dtype=np.float64)
        object.__setattr__(self, "concentration", arr)
        if arr.ndim != 1 or arr.size < 2:
            raise ArgumentError("concentration must be a vector of length >= 2")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
            raise DomainError("concentration entries must be positive and finite")

    @property
    def k(self) -> int:
        return self.concentration.size


def concrete_log_density(pi, params: ConcreteParams) -> float:
    """Log density of the Concrete distribution at an interior simplex point.

    ln[(K-1)! lam^{K-1} prod_j (alpha_j pi_j^{-(lam+1)} / sum_i alpha_i pi_i^{-lam})],
    assembled in log space from the logits so alpha is never materialized.
    """
    arr = check_prob_vector(pi)
    if arr.size != params.k:
        raise ArgumentError("dimension mismatch between pi and params")
    if np.any(arr <= 0.0):
        raise DomainError("Concrete density is undefined on the simplex boundary")
    row = np.ascontiguousarray(arr[None, :])
    return float(
        kernels.concrete_log_density_rows(row, params.log_location, params.temperature)[0]
    )


def concrete_log_density_batch(pis: np.ndarray, params: ConcreteParams) -> np.ndarray:
    """Log density at each row of ``pis`` (rows must be interior points)."""
    arr = np.ascontiguousarray(pis, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != params.k:
        raise ArgumentError("pis must be (n, K)")
    if np.any(arr <= 0.0):
        raise DomainError("Concrete density is undefined on the simplex boundary")
    return kernels.concrete_log_density_rows(arr, params.log_location, params.temperature)


def concrete_sample(params: ConcreteParams, rng: Rng) -> np.ndarray:
    """One draw via the Gumbel trick: softmax((log_location + G) / temperature)."""
    return concrete_sample_batch(params, 1, rng)[0]


def concrete_sample_batch(params: ConcreteParams, n: int, rng: Rng) -> np.ndarray:
    """n independent Concrete draws, shape (n, K)."""
    if n < 1:
        raise ArgumentError("sample count must be >= 1")
    u = np.ascontiguousarray(rng.uniform((n, params.k)))
    out = kernels.concrete_draws(params.log_location, params.temperature, u)
    # entries that underflowed to exactly 0 are floored so downstream logs stay finite
    np.maximum(out, SAMPLE_FLOOR, out=out)
    return out


def concrete_mean_mc(params: ConcreteParams, p: int, rng: Rng) -> np.ndarray:
    """Monte-Carlo estimate of E[pi] from p draws (the expectation has no closed form)."""
    if p < 1:
        raise ArgumentError("sample count p must be >= 1")
    return np.mean(concrete_sample_batch(params, p, rng), axis=0)


def dirichlet_log_density(pi, params: DirichletParams) -> float:
    """ln Gamma(sum mu) - sum ln Gamma(mu_k) + sum (mu_k - 1) ln pi_k."""
    arr = check_prob_vector(pi)
    if arr.size != params.k:
        raise ArgumentError("dimension mismatch between pi and params")
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise DomainError("Dirichlet density is undefined on the simplex boundary")
    mu = params.concentration
    return float(
        math.lgamma(float(np.sum(mu)))
        - np.sum([math.lgamma(m) for m in mu])
        + np.sum((mu - 1.0) * np.log(arr))
    )


def _gamma_draw(shape: float, rng: Rng) -> float:
    """Marsaglia-Tsang Gamma(shape, 1) draw; boosted for shape < 1."""
    if shape < 1.0:
        # Gamma(a) = Gamma(a + 1) * U^{1/a}
        u = max(float(rng.uniform()), SAMPLE_FLOOR)
        return _gamma_draw(shape + 1.0, rng) * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = float(rng.normal())
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = float(rng.uniform())
        if u < 1.0 - 0.0331 * x * x * x * x:
            return d * v
        if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def dirichlet_sample(params: DirichletParams, rng: Rng) -> np.ndarray:
    """Normalized independent Gamma(mu_k, 1) draws; strictly interior."""
    k = params.k
    while True:
        g = np.array([_gamma_draw(m, rng) for m in params.concentration])
        total = float(np.sum(g))
        if total <= 0.0:
            continue
        out = g / total
        if np.all(out > 0.0):  # reject exact-zero coordinates
            return out


def gumbel_sample(rng: Rng, n: int) -> np.ndarray:
    """n i.i.d. standard Gumbel(0, 1) draws, always finite."""
    if n < 1:
        raise ArgumentError("draw count must be >= 1")
    u = np.maximum(rng.uniform(n), SAMPLE_FLOOR)
    return -np.log(-np.log(u))
