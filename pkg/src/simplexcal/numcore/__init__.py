"""Core numerics: seeded randomness, special functions, gradient tape."""

from .rng import Rng
from .special import log_gamma, log_sum_exp, softplus
from .tape import Tape, Var, grad

__all__ = ["Rng", "Tape", "Var", "grad", "log_gamma", "log_sum_exp", "softplus"]
