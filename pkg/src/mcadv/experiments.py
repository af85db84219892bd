"""Interpolation studies, garbage-point search and dropout-ensemble pooling."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from mcadv import nn
from mcadv import uncertainty as U
from mcadv import vae as V
from mcadv.errors import ConfigError
from mcadv.nn import DropoutClassifier, McPrediction

MODES = ("pixel", "latent")
HIST_BINS = 50
HIST_RANGE = (0.0, float(np.log(10.0)))


def interpolate_pixel(x0, x1, lam: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    return (1.0 - lam) * x0 + lam * x1


def interpolate_latent(vae: V.Vae2D, x0, x1, lam) -> np.ndarray:
    """Decode the convex combination of the two encoder means.

    At lam = 0 this is the reconstruction of x0, not x0 itself. ``lam`` may be
    an array, giving one decoded image per value.
    """
    mu = V.encode_mean(vae, np.stack([x0, x1]))
    lam = np.asarray(lam, dtype=np.float64)
    z = (1.0 - lam)[..., None] * mu[0] + lam[..., None] * mu[1]
    return V.decode(vae, z)


def ensemble_mc_predict(models: list[DropoutClassifier], x, num_samples: int, seed: int = 0,
                        example_ids=None, workers: int = 1) -> McPrediction:
    """Pool ``num_samples`` dropout samples from each model into one prediction.

    Member m draws sample indices ``m*num_samples ... (m+1)*num_samples - 1``,
    so M copies of one checkpoint reproduce a single model with M*num_samples.
    """
    if not models:
        raise ConfigError("ensemble needs at least one model")
    dims = {(m.input_dim, m.num_classes) for m in models}
    if len(dims) != 1:
        raise ConfigError(f"ensemble members disagree on (input_dim, classes): {sorted(dims)}")
    parts = [nn.mc_predict(m, x, num_samples, seed, example_ids, k * num_samples, workers).samples
             for k, m in enumerate(models)]
    return McPrediction(np.concatenate(parts, axis=-2))


@dataclass
class InterpolationProfile:
    lambdas: np.ndarray
    scores: dict[str, U.UncertaintyScores]
    endpoints: np.ndarray
    labels: tuple[int, int]
    images: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def rows(self):
        for mode in MODES:
            s = self.scores[mode]
            for k, lam in enumerate(self.lambdas):
                yield (mode, float(lam), float(s.predictive_entropy[k]), float(s.mutual_information[k]),
                       float(s.softmax_variance[k]), float(s.variation_ratio[k]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("mode", "lambda", "entropy", "mi", "variance", "vr"))
            for mode, lam, *vals in self.rows():
                w.writerow([mode, repr(lam)] + [repr(v) for v in vals])


def interpolation_profile(classifier: DropoutClassifier, vae: V.Vae2D, x0, x1, steps: int = 21,
                          num_samples: int = 20, seed: int = 0, labels=(-1, -1)) -> InterpolationProfile:
    """Score both interpolation modes on a uniform grid of ``steps`` lambdas in [0, 1]."""
    if steps < 2:
        raise ConfigError(f"need at least 2 interpolation steps, got {steps}")
    lambdas = np.linspace(0.0, 1.0, steps)
    images = {
        "pixel": np.stack([interpolate_pixel(x0, x1, lam) for lam in lambdas]),
        "latent": interpolate_latent(vae, x0, x1, lambdas),
    }
    ids = np.arange(steps)
    scores = {mode: U.score_all(nn.mc_predict(classifier, images[mode], num_samples, seed, ids))
              for mode in MODES}
    return InterpolationProfile(lambdas, scores, np.stack([x0, x1]), tuple(int(v) for v in labels), images)


@dataclass
class MidpointPopulation:
    pairs: np.ndarray
    class_pairs: np.ndarray
    entropy: dict[str, np.ndarray]
    mi: dict[str, np.ndarray]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def histograms(self) -> dict[tuple[str, str], np.ndarray]:
        """Counts over 50 uniform bins on [0, ln 10] for each (measure, mode)."""
        out = {}
        for name, table in (("entropy", self.entropy), ("mi", self.mi)):
            for mode in MODES:
                out[(name, mode)] = np.histogram(np.clip(table[mode], *HIST_RANGE), HIST_BINS, HIST_RANGE)[0]
        return out

    def summary(self) -> dict[str, float]:
        out = {}
        for name, table in (("entropy", self.entropy), ("mi", self.mi)):
            for mode in MODES:
                vals = table[mode]
                out[f"{name}_{mode}_median"] = float(np.median(vals)) if len(vals) else float("nan")
                out[f"{name}_{mode}_mean"] = float(np.mean(vals)) if len(vals) else float("nan")
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("pair_id", "class_a", "class_b", "mode", "entropy", "mi"))
            for k, (a, b) in enumerate(self.class_pairs):
                for mode in MODES:
                    w.writerow((k, int(a), int(b), mode, repr(float(self.entropy[mode][k])),
                                repr(float(self.mi[mode][k]))))

    def write_histograms(self, path) -> None:
        edges = np.linspace(*HIST_RANGE, HIST_BINS + 1)
        hists = self.histograms()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("measure", "mode", "bin_lo", "bin_hi", "count"))
            for (name, mode), counts in hists.items():
                for k, c in enumerate(counts):
                    w.writerow((name, mode, repr(float(edges[k])), repr(float(edges[k + 1])), int(c)))


def sample_cross_class_pairs(labels, n_pairs: int, seed: int) -> np.ndarray:
    """``n_pairs`` distinct unordered index pairs whose labels differ."""
    labels = np.asarray(labels)
    counts = np.bincount(labels) if len(labels) else np.zeros(0, dtype=np.int64)
    available = (len(labels) ** 2 - int((counts ** 2).sum())) // 2
    if n_pairs > available:
        raise ConfigError(f"requested {n_pairs} cross-class pairs but only {available} exist")
    rng = np.random.default_rng([seed, 4])
    chosen, seen = [], set()
    while len(chosen) < n_pairs:
        a, b = rng.integers(0, len(labels), size=2)
        if labels[a] == labels[b]:
            continue
        key = (min(a, b), max(a, b))
        if key in seen:
            continue
        seen.add(key)
        chosen.append((int(a), int(b)))
    return np.array(chosen, dtype=np.int64).reshape(-1, 2)


def midpoint_population(classifier: DropoutClassifier, vae: V.Vae2D, images, labels, n_pairs: int = 300,
                        num_samples: int = 20, seed: int = 0, workers: int = 1) -> MidpointPopulation:
    """Entropy and MI of the halfway point between random cross-class test pairs."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pairs = sample_cross_class_pairs(labels, n_pairs, seed)
    if len(pairs) == 0:
        empty = {m: np.zeros(0) for m in MODES}
        return MidpointPopulation(pairs, np.zeros((0, 2), dtype=np.int64), empty, dict(empty))
    a, b = images[pairs[:, 0]], images[pairs[:, 1]]
    mids = {"pixel": interpolate_pixel(a, b, 0.5)}
    mu_a, mu_b = V.encode_mean(vae, a), V.encode_mean(vae, b)
    mids["latent"] = V.decode(vae, 0.5 * mu_a + 0.5 * mu_b)
    ids = np.arange(len(pairs))
    entropy, mi = {}, {}
    for mode in MODES:
        scores = U.score_all(nn.mc_predict(classifier, mids[mode], num_samples, seed, ids, workers=workers))
        entropy[mode] = scores.predictive_entropy
        mi[mode] = scores.mutual_information
    return MidpointPopulation(pairs, labels[pairs], entropy, mi)


def standardized_gap(a, b) -> float:
    """|median(a) - median(b)| divided by the pooled interquartile range."""
    pooled = np.concatenate([a, b])
    iqr = np.subtract(*np.percentile(pooled, [75, 25]))
    gap = abs(float(np.median(a) - np.median(b)))
    return gap / iqr if iqr > 0 else float("inf") if gap > 0 else 0.0


@dataclass
class GarbageCandidate:
    z: np.ndarray
    image: np.ndarray
    predicted: int
    confidence: float
    mi: float
    min_dist: float


def garbage_scan(vae: V.Vae2D, classifier: DropoutClassifier, train_encodings, bounds=(-3.0, 3.0),
                 resolution: int = 100, num_samples: int = 20, conf_threshold: float = 0.9,
                 dist_threshold: float = 0.5, seed: int = 0, workers: int = 1,
                 grid: V.LatentGrid | None = None) -> list[GarbageCandidate]:
    """Latent grid points decoded into confidently classified, low-MI images far from the data.

    Keeps points where the deterministic confidence exceeds ``conf_threshold``,
    the MI is below the grid median, and the nearest training encoding is more
    than ``dist_threshold`` away in latent space.
    """
    if grid is None:
        grid = V.latent_grid_map(vae, classifier, bounds, resolution, "mi", num_samples, seed, workers)
    pts = grid.points
    images = V.decode(vae, pts)
    probs = nn.predict_deterministic(classifier, images)
    conf = probs.max(axis=1)
    mi = grid.values.ravel()
    enc = np.asarray(train_encodings, dtype=np.float64).reshape(-1, 2)
    dist = cKDTree(enc).query(pts)[0] if len(enc) else np.full(len(pts), np.inf)
    keep = (conf > conf_threshold) & (mi < np.median(mi)) & (dist > dist_threshold)
    return [GarbageCandidate(pts[k], images[k], int(probs[k].argmax()), float(conf[k]), float(mi[k]), float(dist[k]))
            for k in np.flatnonzero(keep)]


def write_garbage_csv(path, candidates: list[GarbageCandidate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("z1", "z2", "pred", "conf", "mi", "min_dist"))
        for c in candidates:
            w.writerow((repr(float(c.z[0])), repr(float(c.z[1])), c.predicted, repr(c.confidence),
                        repr(c.mi), repr(c.min_dist)))
