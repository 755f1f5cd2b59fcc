"""Fully-connected LOS/NLOS classifier.

The network takes the true (map-derived) distance and the FSPL-inverted
distance for one device-AP link and outputs softmax probabilities that the
link is LOS or NLOS. Four fixed layer stacks (A-D) are provided; D is the
deep expand-contract stack. Training is mini-batch gradient descent on the
binary cross-entropy, with momentum or adaptive-moment updates.

Class index convention matches the dataset labels: 0 = NLOS, 1 = LOS.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArchitectureMismatchError,
    ConfigError,
    DegenerateDataError,
    WeightsFormatError,
)

ARCH_DIMS: dict[str, tuple[int, ...]] = {
    "A": (2, 10, 20, 50, 100, 2),
    "B": (2, 10, 20, 50, 100, 50, 20, 10, 2),
    "C": (2, 10, 20, 50, 100, 200, 500, 1000, 2000, 2),
    "D": (2, 10, 20, 50, 100, 200, 1000, 200, 100, 50, 20, 10, 2),
}

DEFAULT_INPUT_SCALE = 15.0  # default sensing range; keeps inputs near [0, 1]

PROB_CLAMP = 1e-12


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Mlp:
    """Dense rectifier stack with a 2-way softmax head."""

    arch_id: str
    layers: list[DenseLayer]
    input_scale: np.ndarray  # (2,) divisor applied to (d_euc, d_fspl)

    def __post_init__(self):
        self.input_scale = np.asarray(self.input_scale, dtype=float).reshape(2)
        dims = self.dims
        if dims[0] != 2 or dims[-1] != 2:
            raise ConfigError(f"network must map 2 inputs to 2 outputs, got dims {dims}")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError("consecutive layer dimensions do not chain")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].in_dim, *(layer.out_dim for layer in self.layers))

    @property
    def n_weight_layers(self) -> int:
        return len(self.layers)

    def neuron_count(self) -> int:
        """Sum of hidden plus output neurons (the paper-style size metric)."""
        return sum(layer.out_dim for layer in self.layers)

    def parameter_count(self) -> int:
        """Trainable scalars: weights plus biases."""
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)

    def _normalize(self, d_euc, d_fspl) -> np.ndarray:
        x = np.stack(
            [np.asarray(d_euc, dtype=float), np.asarray(d_fspl, dtype=float)], axis=-1
        )
        if not np.all(np.isfinite(x)):
            raise ValueError("classifier inputs must be finite")
        return x / self.input_scale

    def logits(self, d_euc, d_fspl) -> np.ndarray:
        h = np.atleast_2d(self._normalize(d_euc, d_fspl))
        for layer in self.layers[:-1]:
            h = np.maximum(h @ layer.weights.T + layer.bias, 0.0)
        last = self.layers[-1]
        return h @ last.weights.T + last.bias

    def probs(self, d_euc, d_fspl) -> np.ndarray:
        """Softmax class probabilities, shape (..., 2) with column 1 = LOS."""
        out = softmax(self.logits(d_euc, d_fspl))
        if np.isscalar(d_euc) or np.ndim(d_euc) == 0:
            return out[0]
        return out

    def labels(self, d_euc, d_fspl):
        """1 = LOS, 0 = NLOS; ties at p = 0.5 resolve to LOS."""
        p = self.probs(d_euc, d_fspl)
        return (p[..., 1] >= 0.5).astype(int)


@dataclass(frozen=True)
class ClassProbabilities:
    p_los: float
    p_nlos: float


@dataclass(frozen=True)
class ConstantClassifier:
    """Stub classifier emitting a fixed LOS probability (testing/diagnostics)."""

    p_los: float = 1.0

    def probs(self, d_euc, d_fspl) -> np.ndarray:
        shape = np.broadcast(np.asarray(d_euc), np.asarray(d_fspl)).shape
        out = np.empty(shape + (2,), dtype=float)
        out[..., 0] = 1.0 - self.p_los
        out[..., 1] = self.p_los
        return out

    def labels(self, d_euc, d_fspl):
        return (self.probs(d_euc, d_fspl)[..., 1] >= 0.5).astype(int)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax, clamped at PROB_CLAMP so outputs stay positive."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    p = np.clip(p, PROB_CLAMP, 1.0)
    return p / p.sum(axis=-1, keepdims=True)


def build_network(
    config_id: str,
    rng: np.random.Generator,
    *,
    input_scale: float | tuple[float, float] = DEFAULT_INPUT_SCALE,
) -> Mlp:
    """Construct one of the named stacks with scaled-uniform initial weights.

    Each weight matrix is drawn U(-b, b) with b = sqrt(6 / (in + out)); biases
    start at zero. Deterministic for a fixed generator state.
    """
    if config_id not in ARCH_DIMS:
        raise ConfigError(f"unknown network configuration {config_id!r} (expected one of A-D)")
    dims = ARCH_DIMS[config_id]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(weights=w, bias=np.zeros(fan_out)))
    scale = (input_scale, input_scale) if np.isscalar(input_scale) else input_scale
    return Mlp(arch_id=config_id, layers=layers, input_scale=np.asarray(scale, dtype=float))


def forward(mlp: Mlp, d_euc_m: float, d_fspl_m: float) -> ClassProbabilities:
    p = mlp.probs(float(d_euc_m), float(d_fspl_m))
    return ClassProbabilities(p_los=float(p[1]), p_nlos=float(p[0]))


def get_probs(mlp: Mlp, d_euc_m: float, d_fspl_m: float) -> ClassProbabilities:
    return forward(mlp, d_euc_m, d_fspl_m)


def get_label(mlp: Mlp, d_euc_m: float, d_fspl_m: float) -> int:
    """1 = LOS iff p_los >= 0.5 (tie resolves to LOS), else 0 = NLOS."""
    return 1 if forward(mlp, d_euc_m, d_fspl_m).p_los >= 0.5 else 0


def cross_entropy(y, y_hat) -> float:
    """Binary cross-entropy -y*log(p) - (1-y)*log(1-p), with p clamped."""
    p = min(max(float(y_hat), PROB_CLAMP), 1.0 - PROB_CLAMP)
    y = float(y)
    return float(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p))


def _forward_cached(mlp: Mlp, x: np.ndarray):
    """Forward pass keeping post-activation values for backprop."""
    acts = [x]
    h = x
    for layer in mlp.layers[:-1]:
        h = np.maximum(h @ layer.weights.T + layer.bias, 0.0)
        acts.append(h)
    last = mlp.layers[-1]
    logits = h @ last.weights.T + last.bias
    return logits, acts


def _nll_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    # log-sum-exp form of the mean cross-entropy
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(y)), y].mean())


def loss_and_gradients(mlp: Mlp, d_euc, d_fspl, y):
    """Mean cross-entropy and its gradients for every weight and bias.

    Returns (loss, [(dW, db), ...]) ordered like ``mlp.layers``.
    """
    x = mlp._normalize(d_euc, d_fspl)
    x = np.atleast_2d(x)
    y = np.asarray(y, dtype=int).reshape(-1)
    logits, acts = _forward_cached(mlp, x)
    n = len(y)
    probs = softmax(logits)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(mlp.layers)
    for k in range(len(mlp.layers) - 1, -1, -1):
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ mlp.layers[k].weights) * (acts[k] > 0.0)
    return _nll_from_logits(logits, y), grads


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    optimizer: str = "momentum"  # "momentum" | "adam"
    momentum: float = 0.9
    split: float = 0.8  # train fraction
    seed: int = 0
    balance_max_ratio: float = 1.5  # majority/minority cap (60/40)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split must lie in (0, 1)")
        if self.optimizer not in ("momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainResult:
    mlp: Mlp
    metrics: list[EpochMetrics]

    @property
    def final_test_accuracy(self) -> float:
        return self.metrics[-1].test_acc


def _dataset_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    de = np.array([s.d_euc_m for s in samples], dtype=float)
    dr = np.array([s.d_fspl_m for s in samples], dtype=float)
    y = np.array([s.label for s in samples], dtype=int)
    return np.stack([de, dr], axis=1), y


def balance_classes(x: np.ndarray, y: np.ndarray, rng: np.random.Generator, max_ratio: float = 1.5):
    """Down-sample the majority class until majority/minority <= max_ratio."""
    idx0 = np.flatnonzero(y == 0)
    idx1 = np.flatnonzero(y == 1)
    minority, majority = (idx0, idx1) if len(idx0) <= len(idx1) else (idx1, idx0)
    cap = int(np.floor(max_ratio * len(minority)))
    if len(majority) > cap:
        majority = rng.permutation(majority)[:cap]
    keep = np.sort(np.concatenate([minority, majority]))
    return x[keep], y[keep]


def evaluate_accuracy(mlp: Mlp, x: np.ndarray, y: np.ndarray, chunk: int = 16384) -> float:
    hits = 0
    for lo in range(0, len(y), chunk):
        p = mlp.probs(x[lo:lo + chunk, 0], x[lo:lo + chunk, 1])
        hits += int(((p[:, 1] >= 0.5).astype(int) == y[lo:lo + chunk]).sum())
    return hits / len(y)


def train(mlp: Mlp, samples, cfg: TrainConfig) -> TrainResult:
    """Fit the network by mini-batch gradient descent on the cross-entropy.

    Balances classes, splits train/test, and reports per-epoch train loss and
    train/test accuracy. Deterministic given ``cfg.seed``.
    """
    x, y = _dataset_arrays(samples) if not isinstance(samples, tuple) else samples
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("training data must contain both classes")
    rng = np.random.default_rng(cfg.seed)
    x, y = balance_classes(x, y, rng, cfg.balance_max_ratio)

    order = rng.permutation(len(y))
    n_train = int(cfg.split * len(y))
    if n_train == 0 or n_train == len(y):
        raise ConfigError("split leaves an empty train or test set")
    train_idx, test_idx = order[:n_train], order[n_train:]
    x_train, y_train = x[train_idx], y[train_idx]
    x_test, y_test = x[test_idx], y[test_idx]

    velocity = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in mlp.layers]
    adam_m = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in mlp.layers]
    adam_v = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in mlp.layers]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    adam_t = 0

    metrics: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_train)
        loss_sum = 0.0
        for lo in range(0, n_train, cfg.batch_size):
            batch = perm[lo:lo + cfg.batch_size]
            xb, yb = x_train[batch], y_train[batch]
            loss, grads = loss_and_gradients(mlp, xb[:, 0], xb[:, 1], yb)
            loss_sum += loss * len(batch)
            if cfg.optimizer == "momentum":
                for layer, vel, (dw, db) in zip(mlp.layers, velocity, grads):
                    vel[0][:] = cfg.momentum * vel[0] - cfg.learning_rate * dw
                    vel[1][:] = cfg.momentum * vel[1] - cfg.learning_rate * db
                    layer.weights += vel[0]
                    layer.bias += vel[1]
            else:
                adam_t += 1
                corr1 = 1.0 - beta1**adam_t
                corr2 = 1.0 - beta2**adam_t
                for layer, m, v, (dw, db) in zip(mlp.layers, adam_m, adam_v, grads):
                    for target, mom, sec, g in ((layer.weights, m[0], v[0], dw), (layer.bias, m[1], v[1], db)):
                        mom[:] = beta1 * mom + (1 - beta1) * g
                        sec[:] = beta2 * sec + (1 - beta2) * g * g
                        target -= cfg.learning_rate * (mom / corr1) / (np.sqrt(sec / corr2) + eps)
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=loss_sum / n_train,
                train_acc=evaluate_accuracy(mlp, x_train, y_train),
                test_acc=evaluate_accuracy(mlp, x_test, y_test),
            )
        )
    return TrainResult(mlp=mlp, metrics=metrics)


def write_metrics_csv(metrics, path) -> None:
    lines = ["epoch,train_loss,train_acc,test_acc"]
    for m in metrics:
        lines.append(f"{m.epoch},{m.train_loss!r},{m.train_acc!r},{m.test_acc!r}")
    Path(path).write_text("\n".join(lines) + "\n")


_MAGIC = b"MLPW"
_VERSION = 1


def save_weights(mlp: Mlp, path) -> None:
    """Serialize to the versioned binary container (with trailing SHA-256)."""
    dims = mlp.dims
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<I", _VERSION)
    buf += mlp.arch_id[:1].encode("ascii").ljust(1, b"X")
    buf += struct.pack("<H", len(mlp.layers))
    buf += struct.pack(f"<{len(dims)}I", *dims)
    buf += struct.pack("<2d", *mlp.input_scale)
    for layer in mlp.layers:
        buf += np.ascontiguousarray(layer.weights, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
    buf += hashlib.sha256(bytes(buf)).digest()
    Path(path).write_bytes(bytes(buf))


def load_weights(path, expect_arch: str | None = None) -> Mlp:
    """Inverse of ``save_weights``; validates checksum, dims, and architecture."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 + 1 + 2 + 32:
        raise WeightsFormatError(f"{path}: file too short to be a weights container")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightsFormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    off = 0
    if body[:4] != _MAGIC:
        raise WeightsFormatError(f"{path}: bad magic bytes")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != _VERSION:
        raise WeightsFormatError(f"{path}: unsupported weights version {version}")
    arch_id = body[off:off + 1].decode("ascii")
    off += 1
    (n_layers,) = struct.unpack_from("<H", body, off)
    off += 2
    try:
        dims = struct.unpack_from(f"<{n_layers + 1}I", body, off)
        off += 4 * (n_layers + 1)
        input_scale = struct.unpack_from("<2d", body, off)
        off += 16
    except struct.error as e:
        raise WeightsFormatError(f"{path}: truncated header") from e
    if expect_arch is not None and arch_id != expect_arch:
        raise ArchitectureMismatchError(
            f"{path}: file holds architecture {arch_id!r}, caller expects {expect_arch!r}"
        )
    if arch_id in ARCH_DIMS and tuple(dims) != ARCH_DIMS[arch_id]:
        raise WeightsFormatError(f"{path}: dims do not match architecture {arch_id}")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        need = 8 * (fan_out * fan_in + fan_out)
        if off + need > len(body):
            raise WeightsFormatError(f"{path}: truncated layer data")
        w = np.frombuffer(body, dtype="<f8", count=fan_out * fan_in, offset=off).reshape(fan_out, fan_in)
        off += 8 * fan_out * fan_in
        b = np.frombuffer(body, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        layers.append(DenseLayer(weights=w.copy(), bias=b.copy()))
    if off != len(body):
        raise WeightsFormatError(f"{path}: trailing bytes after layer data")
    if not all(np.all(np.isfinite(l.weights)) and np.all(np.isfinite(l.bias)) for l in layers):
        raise WeightsFormatError(f"{path}: non-finite weights")
    return Mlp(arch_id=arch_id, layers=layers, input_scale=np.asarray(input_scale))


def weights_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
