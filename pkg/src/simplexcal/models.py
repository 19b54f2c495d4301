"""Classifier, temperature branch, and the assembled calibration model.

The classifier is an MLP with an explicit feature cut: layers before
``cut_index`` are the shared feature extractor, the rest are the
classification head. The temperature branch maps features to a single
positive scalar through a softplus. Once wrapped in ``StsModel`` the
classifier weights are frozen (literally marked read-only); calibration may
only ever touch the branch.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .distributions import ConcreteParams
from .errors import ArgumentError, FormatError
from .numcore import tape
from .numcore.rng import Rng
from .numcore.special import softmax_rows

ACTIVATIONS = ("relu", "linear")

DEFAULT_MIN_TEMPERATURE = 1e-4


@dataclass
class Layer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {self.activation!r}")


def _init_layer(fan_in: int, fan_out: int, activation: str, rng: Rng) -> Layer:
    # uniform(-s, s) with s = 1/sqrt(fan_in)
    s = 1.0 / math.sqrt(fan_in)
    w = (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * s
    b = (rng.uniform(fan_out) * 2.0 - 1.0) * s
    return Layer(w, b, activation)


def apply_layers(layers, x, weights=None):
    """Forward through affine+activation layers.

    ``weights`` optionally substitutes (W, b) pairs for the stored arrays,
    which is how training lifts a subnetwork onto a gradient tape; with the
    default arrays this is plain numpy inference.
    """
    h = x
    for i, layer in enumerate(layers):
        w, b = (layer.W, layer.b) if weights is None else weights[i]
        h = tape.add(tape.matmul(h, w), b)
        if layer.activation == "relu":
            h = tape.relu(h)
    return h


def _as_batch(x, in_dim: int):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != in_dim:
            raise ArgumentError(f"input dim {arr.shape[0]} != expected {in_dim}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != in_dim:
            raise ArgumentError(f"input dim {arr.shape[1]} != expected {in_dim}")
        return arr, False
    raise ArgumentError(f"input must be 1-D or 2-D, got shape {arr.shape}")


class MlpModel:
    """Affine+activation stack with a designated feature cut."""

    def __init__(self, layers: list[Layer], cut_index: int):
        if not 0 < cut_index < len(layers):
            raise ArgumentError("cut_index must satisfy 0 < cut_index < layer count")
        self.layers = layers
        self.cut_index = cut_index

    @classmethod
    def build(cls, in_dim: int, hidden: list[int], out_dim: int, cut_index: int, rng: Rng) -> "MlpModel":
        dims = [in_dim, *hidden, out_dim]
        layers = [
            _init_layer(dims[i], dims[i + 1], "relu" if i < len(dims) - 2 else "linear", rng)
            for i in range(len(dims) - 1)
        ]
        return cls(layers, cut_index)

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[self.cut_index - 1].W.shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in (layer.W, layer.b)]

    def forward_features(self, x) -> np.ndarray:
        batch, single = _as_batch(x, self.in_dim)
        feats = apply_layers(self.layers[: self.cut_index], batch)
        return feats[0] if single else feats

    def forward_logits(self, x) -> np.ndarray:
        _, logits = self.forward_all(x)
        return logits

    def forward_all(self, x):
        """(features, logits) with the shared trunk evaluated once."""
        batch, single = _as_batch(x, self.in_dim)
        feats = apply_layers(self.layers[: self.cut_index], batch)
        logits = apply_layers(self.layers[self.cut_index :], feats)
        if single:
            return feats[0], logits[0]
        return feats, logits


class TemperatureBranch:
    """Fully connected layers mapping features to one raw scalar per input."""

    def __init__(self, layers: list[Layer]):
        if layers[-1].W.shape[1] != 1:
            raise ArgumentError("branch output must be scalar")
        self.layers = layers

    @classmethod
    def build(cls, feature_dim: int, hidden: list[int], rng: Rng) -> "TemperatureBranch":
        dims = [feature_dim, *hidden, 1]
        layers = [
            _init_layer(dims[i], dims[i + 1], "relu" if i < len(dims) - 2 else "linear", rng)
            for i in range(len(dims) - 1)
        ]
        # zero-init the head with an identity bias: softplus(raw) is exactly 1
        # for every input before training, so calibration starts from the
        # untouched pre-trained model
        layers[-1].W[...] = 0.0
        layers[-1].b[:] = math.log(math.e - 1.0)
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[0]

    def parameters(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in (layer.W, layer.b)]

    def raw(self, features) -> np.ndarray:
        batch, single = _as_batch(features, self.in_dim)
        out = apply_layers(self.layers, batch)[:, 0]
        return out[0] if single else out


class StsModel:
    """Frozen classifier (location) plus trainable branch (temperature)."""

    def __init__(self, classifier: MlpModel, branch: TemperatureBranch,
                 min_temperature: float = DEFAULT_MIN_TEMPERATURE):
        if branch.in_dim != classifier.feature_dim:
            raise ArgumentError("branch input dim must match classifier feature dim")
        if not min_temperature > 0:
            raise ArgumentError("min_temperature must be positive")
        self.classifier = classifier
        self.branch = branch
        self.min_temperature = float(min_temperature)
        for arr in classifier.parameters():
            arr.flags.writeable = False

    def temperature(self, x):
        """softplus of the branch output, floored at min_temperature."""
        feats = self.classifier.forward_features(x)
        raw = self.branch.raw(feats)
        lam = np.maximum(tape.softplus(raw), self.min_temperature)
        return float(lam) if np.ndim(lam) == 0 else lam

    def predictive_distribution(self, x) -> np.ndarray:
        """Softmax of the frozen logits; provably independent of the branch."""
        logits = self.classifier.forward_logits(x)
        single = logits.ndim == 1
        probs = softmax_rows(logits[None, :] if single else logits)
        return probs[0] if single else probs

    def predict_class(self, x):
        """Argmax of the logits, ties broken by lowest index."""
        logits = self.classifier.forward_logits(x)
        return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)

    def concrete_params(self, x) -> ConcreteParams:
        """Per-input Concrete parameters (single input)."""
        feats, logits = self.classifier.forward_all(x)
        if logits.ndim != 1:
            raise ArgumentError("concrete_params expects a single input")
        raw = self.branch.raw(feats)
        lam = max(float(tape.softplus(raw)), self.min_temperature)
        return ConcreteParams(log_location=logits, temperature=lam)


_MAGIC_KEY = "simplexcal_checkpoint"
_VERSION = 1


def _layer_arrays(prefix: str, layers: list[Layer]) -> dict:
    out = {}
    for i, layer in enumerate(layers):
        out[f"{prefix}{i}_W"] = layer.W
        out[f"{prefix}{i}_b"] = layer.b
    return out


def save_checkpoint(path: str, model: StsModel, meta: dict | None = None) -> None:
    """Persist the full model to a self-describing npz; bit-exact round trip.

    Written atomically (temp file + rename) so concurrent readers never see
    a torn checkpoint.
    """
    header = {
        "version": _VERSION,
        "cut_index": model.classifier.cut_index,
        "min_temperature": model.min_temperature,
        "classifier_activations": [l.activation for l in model.classifier.layers],
        "branch_activations": [l.activation for l in model.branch.layers],
        "meta": meta or {},
    }
    arrays = {
        _MAGIC_KEY: np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        **_layer_arrays("clf", model.classifier.layers),
        **_layer_arrays("br", model.branch.layers),
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _read_layers(data, prefix: str, activations: list[str]) -> list[Layer]:
    layers = []
    for i, act in enumerate(activations):
        try:
            w = np.array(data[f"{prefix}{i}_W"], dtype=np.float64)
            b = np.array(data[f"{prefix}{i}_b"], dtype=np.float64)
        except KeyError as exc:
            raise FormatError(f"checkpoint missing array {exc}") from exc
        layers.append(Layer(w, b, act))
    return layers


def load_checkpoint(path: str):
    """Load a checkpoint; returns (StsModel, meta dict)."""
    with np.load(path) as data:
        if _MAGIC_KEY not in data:
            raise FormatError("not a simplexcal checkpoint")
        header = json.loads(bytes(data[_MAGIC_KEY]).decode())
        if header.get("version") != _VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")
        clf_layers = _read_layers(data, "clf", header["classifier_activations"])
        br_layers = _read_layers(data, "br", header["branch_activations"])
    classifier = MlpModel(clf_layers, header["cut_index"])
    branch = TemperatureBranch(br_layers)
    model = StsModel(classifier, branch, min_temperature=header["min_temperature"])
    return model, header["meta"]
