"""Uncertainty measures over MC-dropout predictions (all logs natural, results in nats).

Every function accepts an :class:`~mcadv.nn.McPrediction` or a raw sample
array of shape ``(..., T, C)`` and returns one value per leading index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcadv.errors import ConfigError
from mcadv.nn import McPrediction

MEASURES = ("predictive_entropy", "expected_entropy", "mutual_information",
            "softmax_variance", "variation_ratio", "mi_first_order")

# short names accepted by configs and the CLI
ALIASES = {"entropy": "predictive_entropy", "mi": "mutual_information",
           "variance": "softmax_variance", "vr": "variation_ratio"}


def _samples(mc) -> np.ndarray:
    return mc.samples if isinstance(mc, McPrediction) else np.asarray(mc, dtype=np.float64)


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy over the last axis with 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.maximum(p, 1e-12))
    return -np.where(p > 0, p * logp, 0.0).sum(axis=-1)


def sample_mean(s: np.ndarray, axis: int = -2) -> np.ndarray:
    """Average along ``axis`` computed as first slice plus mean deviation.

    Identical slices then average to exactly that slice, which keeps every
    measure exactly zero for a deterministic model.
    """
    first = np.take(s, [0], axis=axis)
    return np.squeeze(first + (s - first).mean(axis=axis, keepdims=True), axis=axis)


def predictive_entropy(mc) -> np.ndarray:
    return entropy(sample_mean(_samples(mc)))


def expected_entropy(mc) -> np.ndarray:
    return sample_mean(entropy(_samples(mc)), axis=-1)


def mutual_information(mc) -> np.ndarray:
    """Predictive entropy minus expected entropy, floored at 0 against rounding."""
    s = _samples(mc)
    return np.maximum(predictive_entropy(s) - expected_entropy(s), 0.0)


def softmax_variance(mc) -> np.ndarray:
    """Class-averaged population variance (divisor T) of the sampled probabilities."""
    s = _samples(mc)
    dev = s - sample_mean(s)[..., None, :]
    return (dev * dev).mean(axis=-2).mean(axis=-1)


def mi_first_order(mc) -> np.ndarray:
    """Leading term of the series expansion of the mutual information.

    Sum over classes of (mean squared probability - squared mean probability);
    algebraically C times the softmax variance.
    """
    s = _samples(mc)
    mean = s.mean(axis=-2)
    return ((s * s).mean(axis=-2) - mean * mean).sum(axis=-1)


def variation_ratio(mc) -> np.ndarray:
    """Fraction of samples whose argmax differs from the modal argmax (ties -> lowest class)."""
    s = _samples(mc)
    t, c = s.shape[-2], s.shape[-1]
    votes = s.argmax(axis=-1)
    counts = (votes[..., None] == np.arange(c)).sum(axis=-2)
    return 1.0 - counts.max(axis=-1) / t


@dataclass(frozen=True)
class UncertaintyScores:
    predictive_entropy: np.ndarray
    expected_entropy: np.ndarray
    mutual_information: np.ndarray
    softmax_variance: np.ndarray
    variation_ratio: np.ndarray
    mi_first_order: np.ndarray

    def get(self, measure: str) -> np.ndarray:
        return getattr(self, ALIASES.get(measure, measure))


def score_all(mc) -> UncertaintyScores:
    s = _samples(mc)
    h_mean = predictive_entropy(s)
    h_exp = expected_entropy(s)
    return UncertaintyScores(
        predictive_entropy=h_mean,
        expected_entropy=h_exp,
        mutual_information=np.maximum(h_mean - h_exp, 0.0),
        softmax_variance=softmax_variance(s),
        variation_ratio=variation_ratio(s),
        mi_first_order=mi_first_order(s),
    )


def score(mc, measure: str) -> np.ndarray:
    name = ALIASES.get(measure, measure)
    if name not in MEASURES:
        raise ConfigError(f"unknown uncertainty measure {measure!r}")
    return globals()[name](mc)
