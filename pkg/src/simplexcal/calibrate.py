"""Training: cross-entropy pretraining, temperature calibration on synthetic
simplex labels, and the scalar / Dirichlet baselines.

All gradients flow through the tape in ``numcore.tape``; the losses below are
written once against tape-aware ops, so the same code evaluates in plain
numpy (for finite-difference checks and reporting) and differentiates during
training.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ArgumentError, CalibrationError, DomainError
from .mixup import MixupConfig, multi_mixup_step, stratified_minibatches
from .models import MlpModel, StsModel, apply_layers
from .numcore.rng import Rng
from .numcore.tape import (
    Tape,
    Var,
    add,
    clamp_max,
    clamp_min,
    div,
    exp,
    lgamma,
    log,
    logsumexp_rows,
    mul,
    neg,
    reshape,
    softplus,
    sub,
    vmean,
    vsum,
)

OPTIMIZERS = ("adam", "sgd-momentum")

# a loss beyond this (or any non-finite loss) counts as divergence
DIVERGENCE_THRESHOLD = 1e8

# the Dirichlet baseline's log-gamma terms scale like exp(logit), so on an
# overconfident classifier its healthy loss values already pass 1e8; only a
# genuinely exploding run crosses this
DIRICHLET_DIVERGENCE_THRESHOLD = 1e30

# exp guard for the Dirichlet baseline concentrations: the upper cap stops
# overflow, the lower cap stops exp underflowing to an exact 0 whose
# log-gamma is infinite
_DIRICHLET_EXP_CAP = 300.0


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 100
    epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ArgumentError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ArgumentError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ArgumentError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")


@dataclass
class TrainTrace:
    epoch_losses: list[float] = field(default_factory=list)
    diverged: bool = False
    snapshot_id: str = ""

    def to_csv(self) -> str:
        lines = ["epoch,loss"]
        lines += [f"{i},{loss!r}" for i, loss in enumerate(self.epoch_losses)]
        lines.append(f"# diverged,{str(self.diverged).lower()}")
        lines.append(f"# snapshot,{self.snapshot_id}")
        return "\n".join(lines) + "\n"


def snapshot_id(params: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()[:16]


def _is_divergent(loss: float, threshold: float = DIVERGENCE_THRESHOLD) -> bool:
    return not math.isfinite(loss) or abs(loss) > threshold


class SgdMomentum:
    """Classic momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: list[np.ndarray], momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr: float) -> None:
        for p, g, v in zip(params, grads, self.velocity):
            g = g + self.weight_decay * p
            v *= self.momentum
            v += g
            p -= lr * v


class Adam:
    """Adam with bias correction; weight decay is the classic L2-in-gradient form."""

    def __init__(self, params: list[np.ndarray], weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig, params: list[np.ndarray]):
    if config.optimizer == "adam":
        return Adam(params, config.weight_decay)
    return SgdMomentum(params, config.momentum, config.weight_decay)


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing from lr0 at epoch 0 toward 0 at the final epoch."""
    if total_epochs <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def cross_entropy_loss(logits, labels):
    """Mean of -(logit_y - logsumexp(logits)) over the batch.

    ``logits`` may be a tape Var (training) or an ndarray (evaluation).
    """
    values = logits.value if isinstance(logits, Var) else np.asarray(logits, dtype=np.float64)
    if values.ndim != 2:
        raise ArgumentError("logits must be (batch, K)")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != values.shape[0]:
        raise ArgumentError("labels must align with the logits batch")
    k = values.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ArgumentError(f"label out of range [0, {k})")
    onehot = np.zeros_like(values)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    picked = vsum(mul(logits, onehot), axis=1)
    return neg(vmean(sub(picked, logsumexp_rows(logits))))


def sts_nll(labels: np.ndarray, log_alpha, lam):
    """Calibration negative log-likelihood on simplex-labeled data.

    Per sample: -(K-1) ln lam - sum_k ln alpha_k + (lam + 1) sum_k ln pi_k
    + K ln sum_i alpha_i pi_i^{-lam}, with the last term assembled as
    K * logsumexp(ln alpha - lam ln pi). This omits the parameter-free
    ln (K-1)! of the Concrete log density (a constant offset).
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ArgumentError("labels must be (batch, K)")
    if np.any(labels <= 0.0) or np.any(labels >= 1.0):
        raise DomainError("labels must be interior simplex points")
    b, k = labels.shape
    la_val = log_alpha.value if isinstance(log_alpha, Var) else np.asarray(log_alpha)
    if la_val.shape != (b, k):
        raise ArgumentError("log_alpha must match the label batch shape")
    lam_val = lam.value if isinstance(lam, Var) else np.asarray(lam, dtype=np.float64)
    if lam_val.ndim == 0:
        lam = np.full(b, float(lam_val))
        lam_val = lam
    if lam_val.shape != (b,):
        raise ArgumentError("lam must be scalar or (batch,)")
    if np.any(lam_val <= 0.0):
        raise DomainError("temperatures must be positive")

    log_pi = np.log(labels)
    row_log_pi = np.sum(log_pi, axis=1)
    row_log_alpha_neg = -np.sum(la_val, axis=1) if not isinstance(log_alpha, Var) else None

    t1 = mul(log(lam), -(k - 1.0))
    t3 = mul(add(lam, 1.0), row_log_pi)
    inner = sub(log_alpha, mul(reshape(lam, (b, 1)), log_pi))
    t4 = mul(logsumexp_rows(inner), float(k))
    if row_log_alpha_neg is not None:
        per_sample = add(add(t1, row_log_alpha_neg), add(t3, t4))
    else:
        per_sample = add(sub(t1, vsum(log_alpha, axis=1)), add(t3, t4))
    return vmean(per_sample)


def dirichlet_ts_nll(labels: np.ndarray, logits: np.ndarray, t):
    """Dirichlet negative log-likelihood with temperature-annealed concentrations.

    Concentrations are exp(g_k / t); the exponent is capped at 300 so the
    loss stays finite while t shrinks.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if np.any(labels <= 0.0) or np.any(labels >= 1.0):
        raise DomainError("labels must be interior simplex points")
    b, k = labels.shape
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (b, k):
        raise ArgumentError("logits must match the label batch shape")
    t_val = t.value if isinstance(t, Var) else np.asarray(t, dtype=np.float64)
    if t_val.ndim == 0:
        t = np.full(b, float(t_val))
        t_val = t
    if np.any(t_val <= 0.0):
        raise DomainError("temperatures must be positive")

    z = clamp_min(clamp_max(div(logits, reshape(t, (b, 1))), _DIRICHLET_EXP_CAP), -_DIRICHLET_EXP_CAP)
    e = exp(z)
    log_pi = np.log(labels)
    t1 = neg(lgamma(vsum(e, axis=1)))
    t2 = vsum(lgamma(e), axis=1)
    t3 = neg(vsum(mul(sub(e, 1.0), log_pi), axis=1))
    return vmean(add(add(t1, t2), t3))


def _lift_layers(tape: Tape, layers):
    """Copy layer weights onto the tape; returns (pairs for apply_layers, flat vars)."""
    pairs, flat = [], []
    for layer in layers:
        w, b = tape.var(layer.W), tape.var(layer.b)
        pairs.append((w, b))
        flat += [w, b]
    return pairs, flat


def pretrain(model: MlpModel, dataset: LabeledDataset, config: TrainConfig) -> TrainTrace:
    """Minibatch gradient descent on cross entropy; deterministic per seed.

    On divergence the trace is flagged and the best-epoch parameters are
    restored.
    """
    if len(dataset) < 1:
        raise ArgumentError("dataset is empty")
    rng = Rng(config.seed)
    params = model.parameters()
    opt = make_optimizer(config, params)
    n = len(dataset)
    nb = (n + config.batch_size - 1) // config.batch_size
    trace = TrainTrace()
    best_loss, best_params = math.inf, None
    for epoch in range(config.epochs):
        lr = config.lr
        if config.optimizer == "sgd-momentum":
            lr = cosine_lr(config.lr, epoch, config.epochs)
        order = rng.permutation(n)
        total = 0.0
        for i in range(nb):
            idx = order[i * config.batch_size : (i + 1) * config.batch_size]
            x, y = dataset.inputs[idx], dataset.labels[idx]
            tape = Tape()
            pairs, flat = _lift_layers(tape, model.layers)
            logits = apply_layers(model.layers, x, weights=pairs)
            loss = cross_entropy_loss(logits, y)
            grads = tape.grad(loss, flat)
            opt.step(params, grads, lr)
            total += float(loss.value)
        epoch_loss = total / nb
        trace.epoch_losses.append(epoch_loss)
        if _is_divergent(epoch_loss):
            trace.diverged = True
            break
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_params = [p.copy() for p in params]
    if trace.diverged and best_params is not None:
        for p, saved in zip(params, best_params):
            p[...] = saved
    trace.snapshot_id = snapshot_id(params)
    return trace


def _calibrate_branch(model: StsModel, source: LabeledDataset, mixup_config: MixupConfig,
                      config: TrainConfig, loss_kind: str) -> TrainTrace:
    """Shared loop for branch-only calibration (sts or dirichlet-ts loss)."""
    rng = Rng(config.seed)
    branch = model.branch
    params = branch.parameters()
    opt = make_optimizer(config, params)
    steps = max(1, len(source) // mixup_config.batch_size)
    threshold = DIVERGENCE_THRESHOLD if loss_kind == "sts" else DIRICHLET_DIVERGENCE_THRESHOLD
    trace = TrainTrace()
    for epoch in range(config.epochs):
        lr = config.lr
        if config.optimizer == "sgd-momentum":
            lr = cosine_lr(config.lr, epoch, config.epochs)
        total = 0.0
        for _ in range(steps):
            buckets = stratified_minibatches(source, mixup_config.r, rng)
            batch = multi_mixup_step(buckets, mixup_config, rng)
            feats, logits = model.classifier.forward_all(batch.inputs)
            tape = Tape()
            pairs, flat = _lift_layers(tape, branch.layers)
            raw = reshape(apply_layers(branch.layers, feats, weights=pairs), (len(batch.inputs),))
            temp = clamp_min(softplus(raw), model.min_temperature)
            if loss_kind == "sts":
                loss = sts_nll(batch.labels, logits, temp)
            else:
                loss = dirichlet_ts_nll(batch.labels, logits, temp)
            step_loss = float(loss.value)
            if _is_divergent(step_loss, threshold):
                trace.epoch_losses.append(step_loss)
                trace.diverged = True
                trace.snapshot_id = snapshot_id(params)
                raise CalibrationError(
                    f"{loss_kind} calibration diverged at epoch {epoch}", trace=trace
                )
            grads = tape.grad(loss, flat)
            opt.step(params, grads, lr)
            total += step_loss
        trace.epoch_losses.append(total / steps)
    trace.snapshot_id = snapshot_id(params)
    return trace


def calibrate_sts(model: StsModel, source: LabeledDataset, mixup_config: MixupConfig,
                  config: TrainConfig) -> TrainTrace:
    """Fit the temperature branch on fresh Multi-Mixup batches (classifier frozen)."""
    return _calibrate_branch(model, source, mixup_config, config, "sts")


def calibrate_dirichlet_ts(model: StsModel, source: LabeledDataset, mixup_config: MixupConfig,
                           config: TrainConfig) -> TrainTrace:
    """Baseline: anneal Dirichlet concentrations with a trained temperature.

    The published setup needs lr ~1e-6; anything close to the sts rate
    diverges on the log-gamma terms.
    """
    return _calibrate_branch(model, source, mixup_config, config, "dirichlet")


def calibrate_scalar_ts(logits: np.ndarray, labels: np.ndarray,
                        lo: float = 0.05, hi: float = 20.0) -> float:
    """Single global temperature minimizing validation NLL (golden-section)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(logits) == 0:
        raise ArgumentError("logits must be a nonempty (n, K) array")

    def nll(t: float) -> float:
        return float(cross_entropy_loss(logits / t, labels))

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = nll(c), nll(d)
    while b - a > 1e-10:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = nll(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = nll(d)
    return (a + b) / 2.0
