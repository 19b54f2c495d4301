"""simplexcal: accuracy-preserving confidence calibration on the probability
simplex, with Multi-Mixup label synthesis and Monte-Carlo confidence."""

__version__ = "0.1.0"
