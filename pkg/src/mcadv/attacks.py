"""Untargeted L-infinity gradient-sign attacks (FGM, BIM, MIM).

The loss label is always the model's own prediction on the clean input;
true labels are only carried along for reporting. With ``mc_samples > 1``
the gradient is that of the mean cross-entropy over freshly drawn dropout
masks at every iteration.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mcadv import nn
from mcadv import tensor as T
from mcadv.data import read_idx, write_idx
from mcadv.errors import AttackError, ConfigError, DimensionError, NonFiniteError
from mcadv.nn import DropoutClassifier
from mcadv.tensor import Tensor

METHODS = ("fgm", "bim", "mim")
MANIFEST_COLUMNS = ("index", "true_label", "pred_before", "pred_after", "success", "linf_dist")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "bim"
    epsilon: float = 0.1
    step_size: float | None = None
    iterations: int = 10
    momentum_decay: float = 1.0
    mc_samples: int = 1
    seed: int = 0
    # MC samples used to decide the predicted label of an MC-mode model
    eval_samples: int = 20

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.iterations < 1 or self.mc_samples < 1 or self.eval_samples < 1:
            raise ConfigError("iterations, mc_samples and eval_samples must be >= 1")
        if self.momentum_decay < 0:
            raise ConfigError("momentum_decay must be >= 0")
        # a zero step is only meaningful for an empty ball, which is what eps/n gives at eps=0
        if self.step_size is not None and (self.step_size < 0 or (self.step_size == 0 and self.epsilon > 0)):
            raise ConfigError("step_size must be > 0")

    @property
    def stochastic(self) -> bool:
        return self.mc_samples > 1

    def resolved(self) -> AttackConfig:
        """FGM forces one step of size epsilon; BIM/MIM default to epsilon / iterations."""
        if self.method == "fgm":
            return replace(self, iterations=1, step_size=self.epsilon)
        if self.step_size is None:
            return replace(self, step_size=self.epsilon / self.iterations)
        return self


@dataclass
class AdvBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    true_labels: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.true_labels))

    @property
    def success(self) -> np.ndarray:
        return self.pred_after != self.pred_before

    @property
    def success_rate(self) -> float:
        return float(self.success.mean()) if len(self) else 0.0

    @property
    def linf(self) -> np.ndarray:
        if not len(self):
            return np.zeros(0)
        return np.abs(self.adversarials - self.originals).max(axis=1)

    def __len__(self) -> int:
        return len(self.true_labels)

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        # float64 IDX keeps the crafted pixels bit-exact
        write_idx(out / "originals.idx", self.originals)
        write_idx(out / "adversarials.idx", self.adversarials)
        with open(out / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for k in range(len(self)):
                w.writerow([int(self.indices[k]), int(self.true_labels[k]), int(self.pred_before[k]),
                            int(self.pred_after[k]), int(self.success[k]), repr(float(self.linf[k]))])
        return out

    @classmethod
    def load(cls, in_dir) -> AdvBatch:
        src = Path(in_dir)
        originals = read_idx(src / "originals.idx").astype(np.float64)
        adversarials = read_idx(src / "adversarials.idx").astype(np.float64)
        with open(src / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k: np.array([int(r[k]) for r in rows], dtype=np.int64)  # noqa: E731
        return cls(originals.reshape(len(rows), -1), adversarials.reshape(len(rows), -1),
                   col("true_label"), col("pred_before"), col("pred_after"), col("index"))


def predict_labels(model: DropoutClassifier, x: np.ndarray, cfg: AttackConfig, ids) -> np.ndarray:
    """Labels of the model as attacked: deterministic, or argmax of the MC mean."""
    if not cfg.stochastic:
        return nn.predict_deterministic(model, x).argmax(axis=-1)
    return nn.mc_predict(model, x, cfg.eval_samples, cfg.seed, ids).mean.argmax(axis=-1)


def attack_loss_grad(model: DropoutClassifier, x, y, mc_samples: int = 1, seed: int = 0,
                     example_ids=None, step: int = 0) -> np.ndarray:
    """Gradient w.r.t. ``x`` of each example's mean cross-entropy over ``mc_samples`` masks.

    ``mc_samples == 1`` disables dropout and gives the deterministic gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"input shape {x.shape} does not match input_dim {model.input_dim}")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    ids = np.arange(len(x)) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    xt = Tensor(x, requires_grad=True)
    try:
        if mc_samples == 1:
            logits = nn.forward(model.weights, model.biases, xt)
            loss = T.softmax_cross_entropy(logits, y, reduction="sum")
        else:
            masks = nn.draw_masks(model, seed, ids, range(mc_samples), step, nn.STREAM_ATTACK)
            xs = T.repeat_rows(xt, mc_samples)
            logits = nn.forward(model.weights, model.biases, xs, masks)
            loss = T.mul(T.softmax_cross_entropy(logits, np.repeat(y, mc_samples), reduction="sum"),
                         1.0 / mc_samples)
        T.backward(loss)
    except NonFiniteError as exc:
        raise AttackError(f"non-finite attack gradient: {exc}") from exc
    return xt.grad[0] if single else xt.grad


def _project(x, original, eps):
    return np.clip(np.clip(x, original - eps, original + eps), 0.0, 1.0)


def fgm(model, x, cfg: AttackConfig, labels=None, example_ids=None) -> np.ndarray:
    """One step of size epsilon along the gradient sign, clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    ids = np.arange(len(x)) if example_ids is None else example_ids
    y = predict_labels(model, x, cfg, ids) if labels is None else labels
    g = attack_loss_grad(model, x, y, cfg.mc_samples, cfg.seed, ids, 0)
    return np.clip(x + cfg.epsilon * np.sign(g), 0.0, 1.0)


def _iterate(model, x, cfg: AttackConfig, labels, example_ids, momentum: float | None):
    cfg = cfg.resolved()
    x0 = np.asarray(x, dtype=np.float64)
    ids = np.arange(len(x0)) if example_ids is None else example_ids
    y = predict_labels(model, x0, cfg, ids) if labels is None else labels
    xk = x0.copy()
    velocity = np.zeros_like(x0)
    for k in range(cfg.iterations):
        g = attack_loss_grad(model, xk, y, cfg.mc_samples, cfg.seed, ids, k)
        if momentum is not None:
            norm = np.maximum(np.abs(g).sum(axis=1, keepdims=True), 1e-12)
            velocity = momentum * velocity + g / norm
            g = velocity
        xk = _project(xk + cfg.step_size * np.sign(g), x0, cfg.epsilon)
    return xk


def bim(model, x, cfg: AttackConfig, labels=None, example_ids=None) -> np.ndarray:
    """Iterated gradient-sign steps projected onto the epsilon ball and [0, 1]."""
    return _iterate(model, x, cfg, labels, example_ids, None)


def mim(model, x, cfg: AttackConfig, labels=None, example_ids=None) -> np.ndarray:
    """BIM driven by an accumulated, L1-normalised gradient with decay ``momentum_decay``."""
    return _iterate(model, x, cfg, labels, example_ids, cfg.momentum_decay)


ATTACKS = {"fgm": fgm, "bim": bim, "mim": mim}


def craft_batch(model: DropoutClassifier, images, true_labels, cfg: AttackConfig,
                example_ids=None, workers: int = 1) -> AdvBatch:
    """Attack every example; success means the model's predicted label changed."""
    images = np.asarray(images, dtype=np.float64).reshape(len(true_labels), -1) if len(true_labels) else \
        np.zeros((0, model.input_dim))
    true_labels = np.asarray(true_labels, dtype=np.int64)
    ids = np.arange(len(images)) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    attack = ATTACKS[cfg.method]

    def run(a, b):
        before = predict_labels(model, images[a:b], cfg, ids[a:b])
        adv = attack(model, images[a:b], cfg, before, ids[a:b])
        after = predict_labels(model, adv, cfg, ids[a:b])
        return before, adv, after

    parts = nn.run_chunks(run, len(images), workers)
    if not parts:
        empty = np.zeros(0, dtype=np.int64)
        return AdvBatch(images, images.copy(), true_labels, empty, empty, ids)
    before = np.concatenate([p[0] for p in parts])
    adv = np.concatenate([p[1] for p in parts])
    after = np.concatenate([p[2] for p in parts])
    return AdvBatch(images, adv, true_labels, before, after, ids)
