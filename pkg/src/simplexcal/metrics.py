"""Confidence, calibration error, uncertainty estimators, and OOD curves."""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .distributions import (
    SAMPLE_FLOOR,
    ConcreteParams,
    concrete_log_density_batch,
    concrete_mean_mc,
    concrete_sample_batch,
)
from .errors import ArgumentError, NumericError
from .models import StsModel
from .numcore.rng import Rng
from .numcore.special import softplus

DEFAULT_MC_SAMPLES = 30
DEFAULT_BINS = 10


def sts_confidence(model: StsModel, x, p: int = DEFAULT_MC_SAMPLES, rng: Rng = None) -> float:
    """Max coordinate of the Monte-Carlo mean of p Concrete draws for one input.

    The location and temperature forwards run once; only the Gumbel noise is
    drawn p*K times.
    """
    if p < 1:
        raise ArgumentError("p must be >= 1")
    if rng is None:
        raise ArgumentError("an Rng is required (confidence must be reproducible)")
    params = model.concrete_params(x)
    return float(np.max(concrete_mean_mc(params, p, rng)))


def sts_confidences(model: StsModel, inputs: np.ndarray, p: int = DEFAULT_MC_SAMPLES,
                    rng: Rng = None) -> np.ndarray:
    """Vector of confidences for a batch, draws consumed in input order."""
    if p < 1:
        raise ArgumentError("p must be >= 1")
    if rng is None:
        raise ArgumentError("an Rng is required (confidence must be reproducible)")
    feats, logits = model.classifier.forward_all(inputs)
    lam = np.maximum(softplus(model.branch.raw(feats)), model.min_temperature)
    u = np.ascontiguousarray(rng.uniform((len(inputs), p, logits.shape[1])))
    mean_pi = kernels.mc_mean_rows(np.ascontiguousarray(logits), lam, u)
    return np.max(mean_pi, axis=1)


def confidence_mc_std(model: StsModel, x, p: int = DEFAULT_MC_SAMPLES, repeats: int = 50,
                      rng: Rng = None) -> float:
    """Monte-Carlo spread of the confidence estimator across fresh draws.

    Reported alongside confidences so the estimator noise at the configured
    p is visible rather than hidden.
    """
    if rng is None:
        raise ArgumentError("an Rng is required")
    reps = [sts_confidence(model, x, p, stream) for stream in rng.split(repeats)]
    return float(np.std(reps))


def _bin_indices(confidences: np.ndarray, bins: int) -> np.ndarray:
    # right-closed deciles (0, .1], (.1, .2], ..., with 0 folded into the first bin
    edges = np.linspace(0.0, 1.0, bins + 1)[1:]
    return np.minimum(np.searchsorted(edges, confidences, side="left"), bins - 1)


@dataclass
class ReliabilityRow:
    low: float
    high: float
    count: int
    mean_confidence: float | None
    accuracy: float | None


@dataclass
class ReliabilityTable:
    rows: list[ReliabilityRow]

    def to_csv(self) -> str:
        lines = ["bin_low,bin_high,count,mean_confidence,accuracy"]
        for r in self.rows:
            conf = "" if r.mean_confidence is None else repr(r.mean_confidence)
            acc = "" if r.accuracy is None else repr(r.accuracy)
            lines.append(f"{r.low!r},{r.high!r},{r.count},{conf},{acc}")
        return "\n".join(lines) + "\n"


def _validate_conf_correct(confidences, correct):
    conf = np.asarray(confidences, dtype=np.float64)
    hits = np.asarray(correct, dtype=np.float64)
    if conf.shape != hits.shape or conf.ndim != 1:
        raise ArgumentError("confidences and correctness flags must be equal-length vectors")
    if conf.size == 0:
        raise ArgumentError("empty inputs")
    if np.any(conf < 0.0) or np.any(conf > 1.0):
        raise ArgumentError("confidences must lie in [0, 1]")
    return conf, hits


def reliability_table(confidences, correct, bins: int = DEFAULT_BINS) -> ReliabilityTable:
    conf, hits = _validate_conf_correct(confidences, correct)
    idx = _bin_indices(conf, bins)
    rows = []
    for b in range(bins):
        mask = idx == b
        count = int(np.sum(mask))
        lo, hi = b / bins, (b + 1) / bins
        if count == 0:
            rows.append(ReliabilityRow(lo, hi, 0, None, None))
        else:
            rows.append(ReliabilityRow(
                lo, hi, count,
                float(np.mean(conf[mask])), float(np.mean(hits[mask])),
            ))
    return ReliabilityTable(rows)


def ece(confidences, correct, bins: int = DEFAULT_BINS) -> float:
    """Bin-weighted mean absolute gap between confidence and accuracy."""
    conf, hits = _validate_conf_correct(confidences, correct)
    table = reliability_table(conf, hits, bins)
    n = conf.size
    total = 0.0
    for row in table.rows:
        if row.count:
            total += (row.count / n) * abs(row.accuracy - row.mean_confidence)
    return total


def expected_entropy(params: ConcreteParams, p: int, rng: Rng) -> float:
    """Aleatoric uncertainty: Monte-Carlo mean of -sum pi ln pi over p draws."""
    if p < 1:
        raise ArgumentError("p must be >= 1")
    draws = concrete_sample_batch(params, p, rng)
    return float(np.mean(-np.sum(draws * np.log(draws), axis=1)))


def differential_entropy(params: ConcreteParams, p: int, rng: Rng,
                         max_retries: int = 10) -> float:
    """Epistemic uncertainty: -mean log density evaluated at p draws.

    Draws with a coordinate at the sampling clamp floor cannot be fed to the
    log density honestly; they are re-drawn a bounded number of times.
    """
    if p < 1:
        raise ArgumentError("p must be >= 1")
    draws = concrete_sample_batch(params, p, rng)
    bad = np.any(draws <= SAMPLE_FLOOR, axis=1)
    retries = 0
    while np.any(bad):
        if retries >= max_retries:
            raise NumericError("draws kept hitting the sampling clamp floor")
        fresh = concrete_sample_batch(params, int(np.sum(bad)), rng)
        draws[bad] = fresh
        bad = np.any(draws <= SAMPLE_FLOOR, axis=1)
        retries += 1
    return float(-np.mean(concrete_log_density_batch(draws, params)))


@dataclass
class UncertaintyScores:
    confidence: np.ndarray
    expected_entropy: np.ndarray
    differential_entropy: np.ndarray


def uncertainty_scores(model: StsModel, inputs: np.ndarray, p: int = DEFAULT_MC_SAMPLES,
                       rng: Rng = None) -> UncertaintyScores:
    """Per-sample confidence and both uncertainty estimators for a batch."""
    feats, logits = model.classifier.forward_all(inputs)
    lam = np.maximum(softplus(model.branch.raw(feats)), model.min_temperature)
    conf = np.empty(len(inputs))
    ent = np.empty(len(inputs))
    dent = np.empty(len(inputs))
    for i in range(len(inputs)):
        params = ConcreteParams(logits[i], float(lam[i]))
        streams = rng.split(3)
        conf[i] = float(np.max(concrete_mean_mc(params, p, streams[0])))
        ent[i] = expected_entropy(params, p, streams[1])
        dent[i] = differential_entropy(params, p, streams[2])
    return UncertaintyScores(conf, ent, dent)


def auroc_aupr(in_scores, ood_scores) -> tuple[float, float]:
    """Exact AUROC (rank statistic, ties half) and step-wise AUPR.

    Higher score must mean "more OOD"; OOD is the positive class.
    """
    s_in = np.asarray(in_scores, dtype=np.float64)
    s_ood = np.asarray(ood_scores, dtype=np.float64)
    if s_in.size == 0 or s_ood.size == 0:
        raise ArgumentError("both score sets must be nonempty")

    from scipy.stats import rankdata

    combined = np.concatenate([s_in, s_ood])
    ranks = rankdata(combined)  # average ranks: ties counted half
    n_i, n_o = s_in.size, s_ood.size
    rank_sum_ood = float(np.sum(ranks[n_i:]))
    auroc = (rank_sum_ood - n_o * (n_o + 1) / 2.0) / (n_i * n_o)

    # step-wise precision-recall integration, grouping tied thresholds
    labels = np.concatenate([np.zeros(n_i), np.ones(n_o)])
    order = np.argsort(-combined, kind="stable")
    sorted_scores = combined[order]
    sorted_labels = labels[order]
    tp = fp = 0
    prev_recall = 0.0
    aupr = 0.0
    i = 0
    n = combined.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            tp += sorted_labels[j]
            fp += 1.0 - sorted_labels[j]
            j += 1
        recall = tp / n_o
        precision = tp / (tp + fp)
        aupr += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(auroc), float(aupr)
