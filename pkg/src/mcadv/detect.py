"""Adversarial-example detection by thresholding uncertainty scores.

Negatives are clean and Gaussian-noised test images, positives are crafted
adversarial examples. Scores are oriented so that higher means "more likely
adversarial"; AUCs below 0.5 are reported as they are.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from mcadv import nn
from mcadv import uncertainty as U
from mcadv.attacks import AdvBatch, AttackConfig, craft_batch
from mcadv.errors import ConfigError, ContractError
from mcadv.nn import DropoutClassifier

CLEAN, NOISY, ADVERSARIAL = "clean", "noisy", "adversarial"
REPORT_COLUMNS = ("attack", "epsilon", "model_mode", "measure", "auc", "auc_success_filtered",
                  "attack_success_rate")
NOT_AVAILABLE = "N.A"


def add_gaussian_noise(x, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """clip(x + sigma * N(0, I), 0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    noise = rng.standard_normal(x.shape)
    return np.clip(x + sigma * noise, 0.0, 1.0)


@dataclass
class DetectionDataset:
    images: np.ndarray
    provenance: np.ndarray
    success: np.ndarray
    attack: AdvBatch | None = None

    @property
    def is_positive(self) -> np.ndarray:
        return self.provenance == ADVERSARIAL

    def __len__(self) -> int:
        return len(self.provenance)

    def success_filtered(self) -> DetectionDataset:
        """Drop adversarial items that failed to change the predicted label."""
        keep = ~self.is_positive | self.success
        return DetectionDataset(self.images[keep], self.provenance[keep], self.success[keep], self.attack)


def build_detection_set(model: DropoutClassifier, images, labels, attack_cfg: AttackConfig,
                        noise_sigma: float = 10 / 255, counts=(300, 300, 300), seed: int = 0,
                        workers: int = 1) -> DetectionDataset:
    """Disjoint clean / noisy / adversarial pools drawn from a test set.

    ``counts`` is (clean, noisy, adversarial). Items are taken from one
    permutation of the test set, so no test image appears in two pools.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_clean, n_noisy, n_adv = counts
    if min(counts) < 0 or sum(counts) > len(images):
        raise ConfigError(f"requested pools {tuple(counts)} exceed the {len(images)} available test images")
    order = np.random.default_rng([seed, 2]).permutation(len(images))
    clean_idx = order[:n_clean]
    noisy_idx = order[n_clean:n_clean + n_noisy]
    adv_idx = order[n_clean + n_noisy:n_clean + n_noisy + n_adv]
    noisy = add_gaussian_noise(images[noisy_idx], noise_sigma, np.random.default_rng([seed, 3]))
    batch = craft_batch(model, images[adv_idx], labels[adv_idx], attack_cfg, adv_idx, workers)
    parts = [images[clean_idx], noisy, batch.adversarials]
    dim = images.shape[1] if images.ndim == 2 else model.input_dim
    stacked = np.concatenate([p.reshape(-1, dim) for p in parts])
    provenance = np.array([CLEAN] * n_clean + [NOISY] * n_noisy + [ADVERSARIAL] * n_adv)
    success = np.concatenate([np.zeros(n_clean + n_noisy, dtype=bool), batch.success])
    return DetectionDataset(stacked, provenance, success, batch)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def roc_auc(pos_scores, neg_scores) -> RocCurve:
    """ROC by sweeping every distinct score as a threshold (score >= t flags positive).

    The trapezoidal AUC of the swept curve is cross-checked against the
    Mann-Whitney rank statistic with midranks.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ContractError(f"roc_auc needs both pools non-empty (got {len(pos)} positive, {len(neg)} negative)")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    # number of scores >= t in each pool
    tp = len(pos) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg_sorted, thresholds, side="left")
    tpr = np.concatenate([[0.0], tp / len(pos)])
    fpr = np.concatenate([[0.0], fp / len(neg)])
    thresholds = np.concatenate([[np.inf], thresholds])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    rank = rank_auc(pos, neg)
    if abs(auc - rank) > 1e-9:
        raise ArithmeticError(f"ROC sweep AUC {auc} disagrees with rank statistic {rank}")
    return RocCurve(thresholds, tpr, fpr, auc)


def rank_auc(pos, neg) -> float:
    """(sum of positive midranks - n+(n+ + 1)/2) / (n+ n-)."""
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    n_pos, n_neg = len(pos), len(neg)
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def score_items(model: DropoutClassifier, images, mode: str, num_samples: int = 20, seed: int = 0,
                example_ids=None, workers: int = 1) -> U.UncertaintyScores:
    """Uncertainty of every item under the deterministic or MC-dropout model."""
    if mode == "deterministic":
        probs = nn.predict_deterministic(model, images)
        return U.score_all(probs[:, None, :])
    if mode == "mc":
        return U.score_all(nn.mc_predict(model, images, num_samples, seed, example_ids, workers=workers))
    raise ConfigError(f"unknown model mode {mode!r}")


@dataclass
class ReportRow:
    attack: str
    epsilon: float
    model_mode: str
    measure: str
    auc: float | None
    auc_success_filtered: float | None
    attack_success_rate: float
    roc: RocCurve | None = None
    roc_success_filtered: RocCurve | None = None

    def as_csv(self) -> list[str]:
        fmt = lambda v: NOT_AVAILABLE if v is None else repr(float(v))  # noqa: E731
        return [self.attack, repr(float(self.epsilon)), self.model_mode, self.measure,
                fmt(self.auc), fmt(self.auc_success_filtered), repr(float(self.attack_success_rate))]


def detection_report(model: DropoutClassifier, dataset: DetectionDataset, attack_cfg: AttackConfig,
                     mode: str, measures=("entropy", "mi", "variance", "vr"), num_samples: int = 20,
                     seed: int = 0, workers: int = 1) -> list[ReportRow]:
    """AUC per measure, on the full dataset and on its success-filtered version.

    Measures that are identically zero (MI and variance of a deterministic
    model) are reported as not available.
    """
    scores = score_items(model, dataset.images, mode, num_samples, seed, np.arange(len(dataset)), workers)
    positive = dataset.is_positive
    keep = ~positive | dataset.success
    rate = dataset.attack.success_rate if dataset.attack is not None else float(dataset.success[positive].mean())
    rows = []
    for measure in measures:
        values = scores.get(measure)
        constant_zero = not np.any(values)
        if constant_zero and mode == "deterministic":
            rows.append(ReportRow(attack_cfg.method, attack_cfg.epsilon, mode, measure, None, None, rate))
            continue
        roc = roc_auc(values[positive], values[~positive]) if positive.any() and (~positive).any() else None
        filt_pos = positive & keep
        roc_s = roc_auc(values[filt_pos], values[~positive]) if filt_pos.any() and (~positive).any() else None
        rows.append(ReportRow(attack_cfg.method, attack_cfg.epsilon, mode, measure,
                              roc.auc if roc else None, roc_s.auc if roc_s else None, rate, roc, roc_s))
    return rows


def write_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow(row.as_csv())


def write_roc(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr"))
        for f, t in zip(curve.fpr, curve.tpr):
            w.writerow((repr(float(f)), repr(float(t))))


def write_rocs(out_dir, rows) -> list[Path]:
    out = Path(out_dir)
    written = []
    for row in rows:
        for tag, curve in (("", row.roc), ("_S", row.roc_success_filtered)):
            if curve is None:
                continue
            path = out / f"roc_{row.attack}_{row.epsilon:.6g}_{row.model_mode}_{row.measure}{tag}.csv"
            write_roc(path, curve)
            written.append(path)
    return written
