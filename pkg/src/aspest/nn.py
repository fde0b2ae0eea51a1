"""From-scratch multi-layer perceptron with joint source/target training.

Everything is plain numpy in double precision.  The model object only holds
parameters and its random stream; training and inference are functions so
ensemble members can be copied and trained independently.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, NumericError, ShapeError

LOG_FLOOR = 1e-12
_LOG_EPS = math.log(LOG_FLOOR)
LOSS_KINDS = ("cross_entropy", "kl_divergence")
ACTIVATIONS = ("relu", "tanh")
MODEL_FORMAT_VERSION = 1
_MAGIC = b"MLPDUMP1"


@dataclass
class MlpModel:
    layer_sizes: list
    weights: list
    biases: list
    dropout_rate: float = 0.0
    l2_coeff: float = 0.0
    activation: str = "relu"
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def embedding_dim(self) -> int:
        return self.layer_sizes[-2]

    def params(self) -> list:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self, seed: Optional[int] = None) -> "MlpModel":
        """Deep copy; a new ``seed`` gives the copy its own random stream."""
        new = copy.deepcopy(self)
        if seed is not None:
            new.seed = int(seed)
            new.rng = np.random.default_rng(seed)
        return new


def mlp_init(layer_sizes: Sequence[int], dropout_rate: float = 0.0,
             l2_coeff: float = 0.0, seed: int = 0,
             activation: str = "relu") -> MlpModel:
    """Initialize an MLP with fan-in scaled uniform weights and zero biases.

    Parameters
    ----------
    layer_sizes : sequence of int
        Input width, hidden widths, number of classes.  At least two entries.
    dropout_rate : float
        Dropout applied to every hidden activation in training mode.
    l2_coeff : float
        Coefficient of the ``sum(W**2)`` penalty over weight matrices.
    seed : int
        Seeds both the initialization and the model's random stream.
    activation : {'relu', 'tanh'}
    """
    sizes = [int(s) for s in layer_sizes] if layer_sizes is not None else []
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ConfigurationError(
            f"layer_sizes needs >= 2 positive entries, got {list(layer_sizes or [])}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    if l2_coeff < 0:
        raise ConfigurationError(f"l2_coeff must be nonnegative, got {l2_coeff}")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")

    init_rng = np.random.default_rng([int(seed), 0x1A17])
    gain = 6.0 if activation == "relu" else 3.0
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(gain / fan_in)
        weights.append(init_rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(sizes, weights, biases, float(dropout_rate), float(l2_coeff),
                    activation, int(seed))


def _check_input(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeError(
            f"expected input of shape (n, {model.n_features}), got {X.shape}")
    if not np.isfinite(X).all():
        raise NumericError("input contains NaN or Inf")
    return X


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def _forward(model: MlpModel, X: np.ndarray, train_mode: bool):
    """Returns (log_probs, embedding, cache) where cache feeds backprop."""
    relu = model.activation == "relu"
    keep = 1.0 - model.dropout_rate
    use_dropout = train_mode and model.dropout_rate > 0
    h = X
    cache = []
    embedding = X
    n_layers = len(model.weights)
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        if i == n_layers - 1:
            cache.append((h, None, None))
            return _log_softmax(z), embedding, cache
        a = np.maximum(z, 0.0) if relu else np.tanh(z)
        embedding = a
        mask = None
        if use_dropout:
            mask = (model.rng.random(a.shape) < keep) / keep
            out = a * mask
        else:
            out = a
        cache.append((h, a, mask))
        h = out
    raise AssertionError("unreachable")


def mlp_forward(model: MlpModel, X, train_mode: bool = False):
    """Softmax probabilities and penultimate-layer embedding.

    With ``train_mode`` set, dropout masks are drawn from ``model.rng``.
    For a model without hidden layers the embedding is the input itself.
    """
    X = _check_input(model, X)
    log_probs, embedding, _ = _forward(model, X, train_mode)
    return np.exp(log_probs), embedding


def as_target_matrix(targets, n_classes: int) -> np.ndarray:
    """Hard labels -> one-hot rows; soft (n, K) distributions pass through."""
    t = np.asarray(targets)
    if t.ndim == 1:
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(np.equal(np.mod(t, 1), 0)):
                raise ShapeError("hard labels must be integers")
            t = t.astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= n_classes):
            raise ShapeError(f"labels must lie in [0, {n_classes})")
        Y = np.zeros((t.shape[0], n_classes))
        Y[np.arange(t.shape[0]), t] = 1.0
        return Y
    if t.ndim != 2 or t.shape[1] != n_classes:
        raise ShapeError(f"soft targets must have shape (n, {n_classes}), got {t.shape}")
    Y = t.astype(np.float64)
    if not np.isfinite(Y).all():
        raise NumericError("targets contain NaN or Inf")
    return Y


def _data_loss_and_grads(model: MlpModel, X: np.ndarray, Y: np.ndarray,
                         loss_kind: str, train_mode: bool):
    """Mean data loss and its gradients, without the L2 term."""
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss_kind {loss_kind!r}")
    n = X.shape[0]
    log_probs, _, cache = _forward(model, X, train_mode)
    probs = np.exp(log_probs)
    active = log_probs >= _LOG_EPS
    floored = np.where(active, log_probs, _LOG_EPS)
    loss = -(Y * floored).sum()
    if loss_kind == "kl_divergence":
        pos = Y > 0
        loss += (Y[pos] * np.log(Y[pos])).sum()
    loss /= n

    # d/dz of -sum_k y_k log max(p_k, eps); reduces to p - y when nothing is floored.
    Ya = np.where(active, Y, 0.0)
    delta = (probs * Ya.sum(axis=1, keepdims=True) - Ya) / n

    relu = model.activation == "relu"
    grads = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        h_in = cache[i][0]
        grads[2 * i] = h_in.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0:
            break
        _, a_prev, mask_prev = cache[i - 1]
        dh = delta @ model.weights[i].T
        if mask_prev is not None:
            dh = dh * mask_prev
        delta = dh * (a_prev > 0) if relu else dh * (1.0 - a_prev * a_prev)
    return loss, grads


def l2_penalty(model: MlpModel) -> float:
    return model.l2_coeff * sum(float((W * W).sum()) for W in model.weights)


def _add_l2(model: MlpModel, grads: list) -> None:
    if model.l2_coeff:
        for i, W in enumerate(model.weights):
            grads[2 * i] = grads[2 * i] + 2.0 * model.l2_coeff * W


def loss_and_grads(model: MlpModel, X, targets, loss_kind: str = "cross_entropy",
                   train_mode: bool = False):
    """Mean loss over rows plus L2 penalty, and analytic gradients.

    ``targets`` are either integer labels or an (n, K) matrix of row
    distributions.  The KL loss uses ``0 log 0 = 0`` and floors the model
    probability at 1e-12 inside the log.  Gradients follow the order of
    :meth:`MlpModel.params`.
    """
    X = _check_input(model, X)
    Y = as_target_matrix(targets, model.n_classes)
    if Y.shape[0] != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} inputs but {Y.shape[0]} targets")
    if loss_kind == "kl_divergence" and Y.ndim == 2:
        if np.any(Y < 0) or not np.allclose(Y.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ShapeError("soft targets must be nonnegative rows summing to 1")
    loss, grads = _data_loss_and_grads(model, X, Y, loss_kind, train_mode)
    _add_l2(model, grads)
    return loss + l2_penalty(model), grads


def data_loss(model: MlpModel, X, targets, loss_kind: str = "cross_entropy") -> float:
    """Mean data loss in evaluation mode (no dropout, no L2)."""
    X = _check_input(model, X)
    Y = as_target_matrix(targets, model.n_classes)
    log_probs, _, _ = _forward(model, X, False)
    loss = -(Y * np.maximum(log_probs, _LOG_EPS)).sum()
    if loss_kind == "kl_divergence":
        pos = Y > 0
        loss += (Y[pos] * np.log(Y[pos])).sum()
    return float(loss / X.shape[0])


# --- optimizers -------------------------------------------------------------

class SGD:
    def __init__(self, learning_rate: float, momentum: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = None

    def step(self, params: list, grads: list) -> None:
        if self.momentum:
            if self._velocity is None:
                self._velocity = [np.zeros_like(p) for p in params]
            for p, g, v in zip(params, grads, self._velocity):
                v *= self.momentum
                v -= self.learning_rate * g
                p += v
        else:
            for p, g in zip(params, grads):
                p -= self.learning_rate * g


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = self._v = None
        self._t = 0

    def step(self, params: list, grads: list) -> None:
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.learning_rate * math.sqrt(1 - b2 ** self._t) / (1 - b1 ** self._t)
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr_t * m / (np.sqrt(v) + self.eps)


def make_optimizer(name: str, learning_rate: float, momentum: float = 0.0):
    if name == "sgd":
        return SGD(learning_rate, momentum)
    if name == "adam":
        return Adam(learning_rate)
    raise ConfigurationError(f"unknown optimizer {name!r}")


@dataclass
class TrainConfig:
    """Fine-tuning protocol.

    An epoch is one pass over the labeled target set.  ``lam`` weights the
    source cross-entropy term of the joint objective.
    """

    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    min_epochs: int = 50
    patience: int = 10
    lam: float = 1.0
    optimizer: str = "sgd"
    momentum: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size <= 0 or self.max_epochs <= 0:
            raise ConfigurationError("batch_size and max_epochs must be positive")
        if self.min_epochs < 0 or self.patience < 0:
            raise ConfigurationError("min_epochs and patience must be nonnegative")
        if self.min_epochs > self.max_epochs:
            raise ConfigurationError(
                f"min_epochs ({self.min_epochs}) exceeds max_epochs ({self.max_epochs})")
        if self.lam < 0:
            raise ConfigurationError("lam must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


class BatchStream:
    """Endless stream of minibatch indices over reshuffled passes."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self, batch_size: int) -> np.ndarray:
        if self._pos + batch_size > self.n:
            if batch_size >= self.n:
                return self.rng.permutation(self.n)
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + batch_size]
        self._pos += batch_size
        return idx


@dataclass
class TrainHistory:
    epochs: int = 0
    steps: int = 0
    monitor: list = field(default_factory=list)
    checkpoints: int = 0


def _joint_step(model, optimizer, Xb, Yb, loss_kind, Xs, Ys, lam):
    _, grads = _data_loss_and_grads(model, Xb, Yb, loss_kind, True)
    if Xs is not None and lam > 0:
        _, src = _data_loss_and_grads(model, Xs, Ys, "cross_entropy", True)
        grads = [g + lam * s for g, s in zip(grads, src)]
    _add_l2(model, grads)
    optimizer.step(model.params(), grads)


def sgd_train(model: MlpModel, X, targets, cfg: TrainConfig, *,
              X_source=None, y_source=None, loss_kind: str = "cross_entropy",
              checkpoint_hook: Optional[Callable[[MlpModel, int], None]] = None,
              checkpoint_every: Optional[int] = None,
              early_stopping: bool = True) -> TrainHistory:
    """Minimize ``target_loss + lam * source_cross_entropy`` in place.

    Each step draws one target minibatch and one source minibatch.  Training
    runs at least ``cfg.min_epochs`` and at most ``cfg.max_epochs`` epochs
    and stops once the full-pass target data loss has not improved for
    ``cfg.patience`` epochs.  ``checkpoint_hook(model, epoch)`` is called
    after every ``checkpoint_every``-th completed epoch.
    """
    X = _check_input(model, X)
    if X.shape[0] == 0:
        raise ConfigurationError("labeled target set is empty")
    Y = as_target_matrix(targets, model.n_classes)
    if Y.shape[0] != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} inputs but {Y.shape[0]} targets")
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss_kind {loss_kind!r}")
    if checkpoint_hook is not None and (checkpoint_every is None or checkpoint_every <= 0):
        raise ConfigurationError("checkpoint_every must be a positive integer")

    use_source = X_source is not None and cfg.lam > 0
    if use_source:
        Xs_all = _check_input(model, X_source)
        Ys_all = as_target_matrix(y_source, model.n_classes)
        source_stream = BatchStream(Xs_all.shape[0], model.rng)

    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.momentum)
    history = TrainHistory()
    n = X.shape[0]
    best = math.inf
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = model.rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Xs = Ys = None
            if use_source:
                sidx = source_stream.next(cfg.batch_size)
                Xs, Ys = Xs_all[sidx], Ys_all[sidx]
            _joint_step(model, optimizer, X[idx], Y[idx], loss_kind, Xs, Ys, cfg.lam)
            history.steps += 1
        history.epochs = epoch
        if checkpoint_hook is not None and epoch % checkpoint_every == 0:
            checkpoint_hook(model, epoch)
            history.checkpoints += 1
        monitored = data_loss(model, X, Y, loss_kind)
        history.monitor.append(monitored)
        if monitored < best:
            best, stale = monitored, 0
        else:
            stale += 1
        if early_stopping and epoch >= cfg.min_epochs and stale >= cfg.patience:
            break
    return history


def train_steps(model: MlpModel, X, y, n_steps: int, learning_rate: float,
                batch_size: int, optimizer: str = "sgd", momentum: float = 0.0,
                checkpoint_hook: Optional[Callable[[MlpModel, int], None]] = None,
                checkpoint_every: Optional[int] = None) -> TrainHistory:
    """Plain cross-entropy training for a fixed number of minibatch steps."""
    X = _check_input(model, X)
    if X.shape[0] == 0:
        raise ConfigurationError("training set is empty")
    Y = as_target_matrix(y, model.n_classes)
    opt = make_optimizer(optimizer, learning_rate, momentum)
    stream = BatchStream(X.shape[0], model.rng)
    history = TrainHistory()
    for step in range(1, int(n_steps) + 1):
        idx = stream.next(batch_size)
        _joint_step(model, opt, X[idx], Y[idx], "cross_entropy", None, None, 0.0)
        history.steps = step
        if checkpoint_hook is not None and step % checkpoint_every == 0:
            checkpoint_hook(model, step)
            history.checkpoints += 1
    return history


def train_epochs(model: MlpModel, X, y, epochs: int, learning_rate: float,
                 batch_size: int, optimizer: str = "sgd",
                 momentum: float = 0.0) -> TrainHistory:
    """Cross-entropy training for whole passes over ``X``."""
    X = _check_input(model, X)
    if X.shape[0] == 0:
        raise ConfigurationError("training set is empty")
    Y = as_target_matrix(y, model.n_classes)
    opt = make_optimizer(optimizer, learning_rate, momentum)
    history = TrainHistory()
    n = X.shape[0]
    for epoch in range(1, int(epochs) + 1):
        order = model.rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _joint_step(model, opt, X[idx], Y[idx], "cross_entropy", None, None, 0.0)
            history.steps += 1
        history.epochs = epoch
    return history


def gradient_embedding(model: MlpModel, X) -> np.ndarray:
    """Last-layer loss gradients under the model's own predicted label.

    Row ``i`` is ``outer(p_i - onehot(argmax p_i), phi(x_i))`` flattened to
    length ``K * h`` (class index major).
    """
    probs, emb = mlp_forward(model, X)
    residual = probs.copy()
    residual[np.arange(probs.shape[0]), probs.argmax(axis=1)] -= 1.0
    return (residual[:, :, None] * emb[:, None, :]).reshape(probs.shape[0], -1)


# --- persistence ------------------------------------------------------------

def save_model(model: MlpModel, path) -> None:
    """Write a JSON header line followed by little-endian float64 parameters."""
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "dropout_rate": model.dropout_rate,
        "l2_coeff": model.l2_coeff,
        "activation": model.activation,
        "seed": model.seed,
        "dtype": "<f8",
    }
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    head = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(blob)


def load_model(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise ConfigurationError(f"{path}: not a model dump")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format {header.get('format_version')}")
    model = mlp_init(header["layer_sizes"], header["dropout_rate"], header["l2_coeff"],
                     header["seed"], header["activation"])
    flat = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    expected = sum(p.size for p in model.params())
    if flat.size != expected:
        raise ShapeError(f"{path}: expected {expected} parameters, found {flat.size}")
    pos = 0
    for p in model.params():
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return model
