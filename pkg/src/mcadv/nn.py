"""Dropout MLP classifiers: training, deterministic and MC-dropout prediction.

Drop probabilities apply to the *input* of each layer, so a classifier with
layer sizes ``[784, 512, 512, 10]`` has three drop probabilities, the first
acting on the pixels. Weights are stored as ``(fan_in, fan_out)`` so the
forward pass is ``x @ W + b``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mcadv import checkpoint
from mcadv import tensor as T
from mcadv.errors import ConfigError, DimensionError, NonFiniteError, ParseError, TrainingError
from mcadv.tensor import Tensor

log = logging.getLogger(__name__)

# Counter-word tags keeping mask streams of different consumers disjoint.
STREAM_PREDICT = 0
STREAM_ATTACK = 1

# Fixed example-chunk size for batched inference; independent of worker count
# so BLAS sees identical blocks for any parallel width.
CHUNK = 128


def mask_generator(seed: int, example_id: int, sample: int, step: int = 0,
                   stream: int = STREAM_PREDICT) -> np.random.Generator:
    """Counter-based generator for one (seed, example, sample) triple.

    Philox keyed by (seed, example id) with the sample index, step and stream
    in the counter, so every draw is a pure function of its coordinates and
    execution order never matters.
    """
    bits = np.random.Philox(key=[seed, example_id], counter=[0, sample, step, stream])
    return np.random.Generator(bits)


def dropout_forward(x, drop_prob: float, rng: np.random.Generator):
    """Inverted dropout: zero each unit with ``drop_prob``, rescale survivors by 1/(1-p)."""
    if not 0.0 <= drop_prob < 1.0:
        raise ConfigError(f"drop probability must be in [0, 1), got {drop_prob}")
    if drop_prob == 0.0:
        return x
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    keep = rng.random(data.shape) >= drop_prob
    mask = keep / (1.0 - drop_prob)
    if isinstance(x, Tensor):
        return T.mul(x, mask)
    return data * mask


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.05
    weight_decay: float = 1e-5
    seed: int = 0
    momentum: float = 0.9
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError(f"invalid training config: {self}")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError(f"invalid training config: {self}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


@dataclass
class DropoutClassifier:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    drop_probs: list[float]
    seed: int = 0
    epochs_trained: int = 0
    history: TrainHistory = field(default_factory=TrainHistory, repr=False)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.drop_probs)) or not self.weights:
            raise ConfigError("need one weight, bias and drop probability per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i} input {w.shape[0]} != previous width {self.weights[i - 1].shape[1]}")
        for p in self.drop_probs:
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"drop probability must be in [0, 1), got {p}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def without_dropout(self) -> DropoutClassifier:
        return DropoutClassifier(self.weights, self.biases, [0.0] * len(self.weights), self.seed,
                                 self.epochs_trained)

    def save(self, path) -> None:
        meta = {"kind": "dropout_classifier", "layer_sizes": self.layer_sizes,
                "drop_probs": list(self.drop_probs), "seed": self.seed,
                "epochs_trained": self.epochs_trained}
        tensors = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            tensors[f"W{i}"] = w
            tensors[f"b{i}"] = b
        checkpoint.save(path, meta, tensors)

    @classmethod
    def load(cls, path) -> DropoutClassifier:
        meta, tensors = checkpoint.load(path)
        if meta.get("kind") != "dropout_classifier":
            raise ParseError(f"{path} is not a classifier checkpoint")
        n = len(meta["drop_probs"])
        return cls([tensors[f"W{i}"] for i in range(n)], [tensors[f"b{i}"] for i in range(n)],
                   [float(p) for p in meta["drop_probs"]], int(meta["seed"]), int(meta["epochs_trained"]))


def init_classifier(layer_sizes, drop_probs, seed: int = 0) -> DropoutClassifier:
    """He-normal weights, zero biases."""
    if len(drop_probs) != len(layer_sizes) - 1:
        raise ConfigError(f"{len(layer_sizes) - 1} layers but {len(drop_probs)} drop probabilities")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DropoutClassifier(weights, biases, [float(p) for p in drop_probs], seed)


def forward(weights, biases, x: Tensor, masks=None) -> Tensor:
    """Logits of the MLP; ``masks[l]`` (or None) multiplies the input of layer l."""
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        if masks is not None and masks[i] is not None:
            h = T.mul(h, masks[i])
        h = T.add(T.matmul(h, w), b)
        if i < last:
            h = T.relu(h)
    return h


def _as_batch(model: DropoutClassifier, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != model.input_dim:
        raise DimensionError(f"input shape {np.shape(x)} does not match input_dim {model.input_dim}")
    return arr, single


def logits_deterministic(model: DropoutClassifier, x: np.ndarray) -> np.ndarray:
    return forward(model.weights, model.biases, Tensor(x)).data


def predict_deterministic(model: DropoutClassifier, x) -> np.ndarray:
    """Softmax output with every mask replaced by its expectation (plain forward pass)."""
    arr, single = _as_batch(model, x)
    out = np.concatenate([T.softmax(Tensor(logits_deterministic(model, arr[s:s + CHUNK]))).data
                          for s in range(0, len(arr), CHUNK)]) if len(arr) else np.zeros((0, model.num_classes))
    return out[0] if single else out


def draw_masks(model: DropoutClassifier, seed: int, example_ids, samples, step: int = 0,
               stream: int = STREAM_PREDICT) -> list[np.ndarray | None]:
    """Per-layer masks for rows ``(example_ids[n], samples[k])`` in example-major order."""
    sizes = model.layer_sizes[:-1]
    live = [i for i, p in enumerate(model.drop_probs) if p > 0.0]
    if not live:
        return [None] * len(sizes)
    widths = [sizes[i] for i in live]
    total = sum(widths)
    rows = len(example_ids) * len(samples)
    u = np.empty((rows, total))
    r = 0
    for ex in example_ids:
        for s in samples:
            u[r] = mask_generator(seed, int(ex), int(s), step, stream).random(total)
            r += 1
    masks: list[np.ndarray | None] = [None] * len(sizes)
    col = 0
    for i, w in zip(live, widths):
        p = model.drop_probs[i]
        masks[i] = (u[:, col:col + w] >= p) / (1.0 - p)
        col += w
    return masks


@dataclass
class McPrediction:
    """Sampled class distributions, shape ``(..., T, C)``, and their mean ``(..., C)``."""

    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim < 2 or self.samples.shape[-2] < 1:
            raise ConfigError(f"McPrediction needs at least one sample, got shape {self.samples.shape}")
        first = self.samples[..., :1, :]
        # first row plus mean deviation: identical rows average to that row exactly
        self.mean = first[..., 0, :] + (self.samples - first).mean(axis=-2)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[-2]

    @property
    def num_classes(self) -> int:
        return self.samples.shape[-1]

    def __len__(self) -> int:
        return self.samples.shape[0] if self.samples.ndim == 3 else 1

    def __getitem__(self, idx) -> McPrediction:
        if self.samples.ndim != 3:
            raise IndexError("single McPrediction is not indexable")
        return McPrediction(self.samples[idx])


def _mc_chunk(model, x, ids, samples, seed):
    n, t = len(x), len(samples)
    masks = draw_masks(model, seed, ids, samples)
    xs = np.repeat(x, t, axis=0)
    logits = forward(model.weights, model.biases, Tensor(xs), masks).data
    return T.softmax(Tensor(logits)).data.reshape(n, t, -1)


def run_chunks(fn, n: int, workers: int = 1, chunk: int = CHUNK) -> list:
    """Apply ``fn(start, stop)`` over fixed-size chunks of ``range(n)``, preserving order."""
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if workers <= 1 or len(bounds) <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def mc_predict(model: DropoutClassifier, x, num_samples: int, seed: int = 0, example_ids=None,
               sample_offset: int = 0, workers: int = 1) -> McPrediction:
    """MC-dropout prediction: ``num_samples`` stochastic passes per example.

    Sample ``i`` of example ``example_ids[n]`` (default: row index) uses masks
    drawn from ``mask_generator(seed, example_id, sample_offset + i)``.
    A 1-D ``x`` gives a ``(T, C)`` prediction; a batch gives ``(N, T, C)``.
    """
    if num_samples < 1:
        raise ConfigError(f"need at least one MC sample, got {num_samples}")
    arr, single = _as_batch(model, x)
    ids = np.arange(len(arr)) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    if len(ids) != len(arr):
        raise DimensionError(f"{len(ids)} example ids for {len(arr)} inputs")
    samples = range(sample_offset, sample_offset + num_samples)
    parts = run_chunks(lambda a, b: _mc_chunk(model, arr[a:b], ids[a:b], samples, seed), len(arr), workers)
    out = np.concatenate(parts) if parts else np.zeros((0, num_samples, model.num_classes))
    return McPrediction(out[0] if single else out)


class SGD:
    def __init__(self, params, lr, momentum=0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate)
    return SGD(params, cfg.learning_rate, cfg.momentum)


def train_classifier(images, labels, layer_sizes, drop_probs, cfg: TrainConfig) -> DropoutClassifier:
    """Minibatch training of mean cross-entropy + weight_decay * sum ||W||^2.

    Dropout masks are redrawn on every forward pass from one generator seeded
    by ``cfg.seed``, which also fixes initialization and shuffling.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise DimensionError(f"{len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= layer_sizes[-1]:
        raise ConfigError(f"labels outside [0, {layer_sizes[-1]})")
    model = init_classifier(layer_sizes, drop_probs, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    weights = [Tensor(w, requires_grad=True) for w in model.weights]
    biases = [Tensor(b, requires_grad=True) for b in model.biases]
    params = weights + biases
    opt = make_optimizer(params, cfg)
    history = TrainHistory()
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb, yb = images[idx], labels[idx]
                masks = [dropout_forward(np.ones((len(idx), k)), p, rng) if p > 0 else None
                         for k, p in zip(model.layer_sizes[:-1], model.drop_probs)]
                logits = forward(weights, biases, Tensor(xb), masks)
                loss = T.softmax_cross_entropy(logits, yb)
                if cfg.weight_decay:
                    penalty = T.tensor_sum(T.square(weights[0]))
                    for w in weights[1:]:
                        penalty = T.add(penalty, T.tensor_sum(T.square(w)))
                    loss = T.add(loss, T.mul(penalty, cfg.weight_decay))
                for p in params:
                    p.zero_grad()
                T.backward(loss)
                opt.step()
                total_loss += loss.item() * len(idx)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
        except NonFiniteError as exc:
            raise TrainingError(f"training diverged in epoch {epoch}: {exc}") from exc
        if not np.isfinite(total_loss):
            raise TrainingError(f"training diverged in epoch {epoch}")
        history.loss.append(total_loss / n)
        history.accuracy.append(correct / n)
        log.info("epoch %d loss %.4f acc %.4f", epoch, history.loss[-1], history.accuracy[-1])
    return DropoutClassifier([w.data for w in weights], [b.data for b in biases],
                             model.drop_probs, cfg.seed, cfg.epochs, history)


def accuracy(model: DropoutClassifier, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float((predict_deterministic(model, images).argmax(axis=1) == np.asarray(labels)).mean())
