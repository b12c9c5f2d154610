"""Small dense networks: forward pass, seeded SGD training, ensembles, data."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, ParseError, TrainingError
from .params import LayerParams, ModelParams


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths from input to class count. Hidden layers use ReLU."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractError(f"invalid layer sizes {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @classmethod
    def of(cls, model: ModelParams) -> NetworkSpec:
        return cls(tuple(model.layer_sizes))


@dataclass
class Dataset:
    features: np.ndarray  # (n_samples, input_dim) float32
    labels: np.ndarray  # (n_samples,) int64
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ContractError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ContractError("row count does not match label count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError("label outside [0, n_classes)")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def split(self, n_first: int) -> tuple[Dataset, Dataset]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    epochs: int = 50
    learning_rate: float = 0.05
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ContractError(f"invalid training config {self}")


# ------------------------------------------------------------------ inference

def layer_forward(layer: LayerParams, h: np.ndarray, last: bool) -> np.ndarray:
    with np.errstate(all="ignore"):
        out = h @ layer.weights + layer.bias
        if not last:
            out = np.maximum(out, np.float32(0))  # propagates NaN
    return out


def forward(m: ModelParams, x) -> np.ndarray:
    """Scores for one sample (1-D ``x``) or a batch (2-D ``x``)."""
    h = np.asarray(x, dtype=np.float32)
    if h.shape[-1] != m.layers[0].weights.shape[0]:
        raise ContractError(f"input dim {h.shape[-1]} != model input {m.layers[0].weights.shape[0]}")
    last = m.n_layers - 1
    for n, layer in enumerate(m.layers):
        h = layer_forward(layer, h, n == last)
    return h


def softmax(z: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


def combine_scores(scores: Sequence[np.ndarray], combine: str = "logits") -> np.ndarray:
    """Mean of member outputs.

    Accumulates in float64 so that averaging k identical vectors gives the
    vector back exactly; the result is float32 like a single forward pass.
    """
    if not scores:
        raise ContractError("ensemble needs at least one model")
    if combine == "softmax":
        scores = [softmax(s) for s in scores]
    elif combine != "logits":
        raise ContractError(f"unknown combine mode {combine!r}")
    acc = np.zeros(scores[0].shape, dtype=np.float64)
    for s in scores:
        acc += s
    with np.errstate(all="ignore"):
        return (acc / len(scores)).astype(np.float32)


def ensemble_infer(models: Sequence[ModelParams], x, combine: str = "logits") -> np.ndarray:
    if not models:
        raise ContractError("ensemble needs at least one model")
    return combine_scores([forward(m, x) for m in models], combine)


def predict(models: Sequence[ModelParams], features, combine: str = "logits") -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(ensemble_infer(models, features, combine), axis=-1)


def evaluate(models: Sequence[ModelParams], data: Dataset, combine: str = "logits") -> float:
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(models, data.features, combine) == data.labels))


# ------------------------------------------------------------------- training

def init_model(spec: NetworkSpec, rng: np.random.Generator) -> ModelParams:
    layers = []
    for fan_in, fan_out in zip(spec.layer_sizes, spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)
        layers.append(LayerParams(w, np.zeros(fan_out, dtype=np.float32)))
    return ModelParams(layers)


def train_independent(spec: NetworkSpec, data: Dataset, cfg: TrainConfig) -> ModelParams:
    """Mini-batch SGD on softmax cross-entropy from a seeded He-uniform start."""
    if len(data) == 0:
        raise ContractError("empty training set")
    if data.input_dim != spec.input_dim or data.n_classes != spec.n_classes:
        raise ContractError(
            f"spec {spec.layer_sizes} does not match data dim {data.input_dim} / classes {data.n_classes}"
        )
    rng = np.random.default_rng(cfg.seed)
    m = init_model(spec, rng)
    lr = np.float32(cfg.learning_rate)
    onehot = np.eye(spec.n_classes, dtype=np.float32)[data.labels]
    n = len(data)
    last = m.n_layers - 1

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            acts = [data.features[idx]]
            for k, layer in enumerate(m.layers):
                acts.append(layer_forward(layer, acts[-1], k == last))
            probs = softmax(acts[-1])
            y = onehot[idx]
            with np.errstate(all="ignore"):
                loss_sum += float(-np.sum(y * np.log(probs + np.float32(1e-12))))
                grad = (probs - y) / np.float32(len(idx))
                for k in range(last, -1, -1):
                    layer = m.layers[k]
                    gw = acts[k].T @ grad
                    gb = grad.sum(axis=0)
                    if k > 0:
                        grad = (grad @ layer.weights.T) * (acts[k] > 0)
                    layer.weights -= lr * gw
                    layer.bias -= lr * gb
        if not np.isfinite(loss_sum):
            raise TrainingError("loss diverged (non-finite)", epoch)
    return m


# ----------------------------------------------------------------------- data

def gen_synthetic(seed: int, n_samples: int, input_dim: int, classes: int, spread: float) -> Dataset:
    """Gaussian blobs with one seeded centre per class and balanced labels."""
    if classes < 2 or n_samples < classes:
        raise ContractError("need classes >= 2 and n_samples >= classes")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, input_dim))
    labels = rng.permutation(np.arange(n_samples) % classes)
    noise = rng.standard_normal((n_samples, input_dim))
    feats = centers[labels] + spread * noise
    return Dataset(feats.astype(np.float32), labels, classes)


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read ``label,f0,f1,...`` rows; a first line starting with ``label,`` is a header."""
    feats, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and row[0].strip() == "label":
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise ParseError("row needs a label and at least one feature", lineno)
            elif len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", lineno)
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as e:
                raise ParseError(f"non-numeric field ({e})", lineno) from None
            if label < 0 or (n_classes is not None and label >= n_classes):
                raise ParseError(f"label {label} outside [0, {n_classes})", lineno)
            labels.append(label)
            feats.append(values)
    if width is None:
        raise ParseError("no data rows")
    k = n_classes if n_classes is not None else max(labels) + 1
    return Dataset(np.array(feats, dtype=np.float32), np.array(labels), k)


def save_csv(data: Dataset, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(data.input_dim)])
        for label, row in zip(data.labels.tolist(), data.features.tolist()):
            # repr of a Python float round-trips the float32 value exactly
            w.writerow([label] + [repr(v) for v in row])
