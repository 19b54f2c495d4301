"""Class-stratified K-way mixup: synthetic inputs labeled with interior
simplex vectors.

Each step draws one Dirichlet weight vector per shuffle iteration, reshuffles
every class bucket, and interpolates one sample per class, so the synthetic
label equals the weight vector exactly (buckets carry pure one-hot labels).
Labels are then clamped to the simplex interior because the calibration loss
takes their log.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .distributions import DirichletParams, dirichlet_sample
from .errors import ArgumentError, CalibrationError, DataError
from .numcore.rng import Rng


@dataclass(frozen=True)
class MixupConfig:
    beta: float = 1.0  # Dirichlet concentration for the interpolation weights
    r: int = 10  # samples per class per step
    s: int = 10  # shuffle iterations per step
    label_clamp: float = 1e-6

    def __post_init__(self):
        if not self.beta > 0:
            raise ArgumentError("beta must be positive")
        if self.r < 1 or self.s < 1:
            raise ArgumentError("r and s must be >= 1")
        if not 0 < self.label_clamp < 0.5:
            raise ArgumentError("label_clamp must lie in (0, 0.5)")

    @property
    def batch_size(self) -> int:
        return self.s * self.r


@dataclass
class MixupBatch:
    inputs: np.ndarray  # (s*r, input_dim)
    labels: np.ndarray  # (s*r, K), strictly interior rows
    weights: np.ndarray = field(default=None)  # (s, K) raw Dirichlet draws


def default_beta_grid() -> list[float]:
    """0.2 to 2.0 in 0.1 increments."""
    return [round(0.2 + 0.1 * i, 10) for i in range(19)]


def stratified_minibatches(dataset: LabeledDataset, r: int, rng: Rng) -> list[np.ndarray]:
    """One bucket of r inputs per class; small classes upsampled with replacement."""
    if r < 1:
        raise ArgumentError("r must be >= 1")
    buckets = []
    for k in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            raise DataError(f"class {k} has no samples")
        if idx.size < r:
            pick = idx[rng.integers(0, idx.size, size=r)]
        else:
            pick = idx[rng.permutation(idx.size)[:r]]
        buckets.append(dataset.inputs[pick])
    return buckets


def multi_mixup_step(buckets: list[np.ndarray], config: MixupConfig, rng: Rng) -> MixupBatch:
    """Generate one synthetic batch of s*r (input, simplex-label) pairs."""
    k = len(buckets)
    if k < 2:
        raise ArgumentError("need at least two class buckets")
    r = buckets[0].shape[0]
    for b in buckets:
        if b.shape[0] != r:
            raise ArgumentError("all buckets must hold the same number of samples")
    if r != config.r:
        raise ArgumentError(f"bucket size {r} != configured r {config.r}")

    dim = buckets[0].shape[1]
    inputs = np.empty((config.s * r, dim))
    labels = np.empty((config.s * r, k))
    weights = np.empty((config.s, k))
    dir_params = DirichletParams(np.full(k, config.beta))
    for s in range(config.s):
        w = dirichlet_sample(dir_params, rng)
        weights[s] = w
        shuffled = [b[rng.permutation(r)] for b in buckets]
        row = s * r
        for pos in range(r):
            x = np.zeros(dim)
            for c in range(k):
                x += w[c] * shuffled[c][pos]
            inputs[row + pos] = x
            # one sample per distinct class with one-hot labels: the mixed
            # label is the weight vector itself
            labels[row + pos] = w

    _clamp_labels_interior(labels, config.label_clamp)
    return MixupBatch(inputs=inputs, labels=labels, weights=weights)


def _clamp_labels_interior(labels: np.ndarray, eps: float) -> None:
    """Clamp rows into [eps, 1-eps] and renormalize, only where needed.

    Rows already inside the band are left bit-identical so labels equal their
    Dirichlet weights exactly in the common case. The post-clip sum is always
    >= 1, so renormalizing can push a floored entry epsilon below ``eps``;
    such entries are restored to exactly ``eps`` with the difference absorbed
    by the row's largest coordinate.
    """
    bad = np.flatnonzero((labels.min(axis=1) < eps) | (labels.max(axis=1) > 1.0 - eps))
    for i in bad:
        row = np.clip(labels[i], eps, 1.0 - eps)
        row /= row.sum()
        low = row < eps
        if np.any(low):
            row[np.argmax(row)] -= np.sum(eps - row[low])
            row[low] = eps
        labels[i] = row


def tune_beta(grid, validation_data, calibrate_and_score) -> float:
    """Pick the grid value whose calibration gives the smallest validation ECE.

    ``calibrate_and_score(beta, validation_data)`` runs a full calibration and
    returns the validation ECE, or raises CalibrationError on divergence;
    diverged settings are excluded. Ties break toward the smaller beta.
    """
    grid = list(grid)
    if not grid:
        raise ArgumentError("beta grid is empty")
    best_beta = None
    best_ece = None
    for beta in sorted(grid):
        try:
            ece = float(calibrate_and_score(beta, validation_data))
        except CalibrationError:
            continue
        if best_ece is None or ece < best_ece:
            best_beta, best_ece = beta, ece
    if best_beta is None:
        raise CalibrationError("every beta in the grid diverged")
    return best_beta
