"""Variational autoencoder with a 2-D latent space, and uncertainty maps over that space."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mcadv import checkpoint, nn
from mcadv import tensor as T
from mcadv import uncertainty as U
from mcadv.errors import ConfigError, ContractError, NonFiniteError, ParseError, TrainingError
from mcadv.nn import DropoutClassifier, TrainConfig
from mcadv.tensor import Tensor

log = logging.getLogger(__name__)

LATENT_DIM = 2
PARAM_NAMES = ("enc_W", "enc_b", "mu_W", "mu_b", "logvar_W", "logvar_b", "dec_W", "dec_b", "out_W", "out_b")


@dataclass
class Vae2D:
    params: dict[str, np.ndarray]
    seed: int = 0
    epochs_trained: int = 0
    elbo_history: list[float] = field(default_factory=list, repr=False)

    @property
    def input_dim(self) -> int:
        return self.params["enc_W"].shape[0]

    def save(self, path) -> None:
        meta = {"kind": "vae2d", "seed": self.seed, "epochs_trained": self.epochs_trained,
                "input_dim": self.input_dim, "hidden": self.params["enc_W"].shape[1]}
        checkpoint.save(path, meta, {k: self.params[k] for k in PARAM_NAMES})

    @classmethod
    def load(cls, path) -> Vae2D:
        meta, tensors = checkpoint.load(path)
        if meta.get("kind") != "vae2d":
            raise ParseError(f"{path} is not a VAE checkpoint")
        return cls(tensors, int(meta["seed"]), int(meta["epochs_trained"]))


def init_vae(input_dim: int = 784, hidden: int = 512, seed: int = 0) -> Vae2D:
    rng = np.random.default_rng([seed, 7])

    def dense(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), np.zeros(fan_out)

    p = {}
    p["enc_W"], p["enc_b"] = dense(input_dim, hidden)
    p["mu_W"], p["mu_b"] = dense(hidden, LATENT_DIM)
    p["logvar_W"], p["logvar_b"] = dense(hidden, LATENT_DIM)
    p["dec_W"], p["dec_b"] = dense(LATENT_DIM, hidden)
    p["out_W"], p["out_b"] = dense(hidden, input_dim)
    return Vae2D(p, seed)


def _encode(p, x: Tensor):
    h = T.relu(T.add(T.matmul(x, p["enc_W"]), p["enc_b"]))
    return T.add(T.matmul(h, p["mu_W"]), p["mu_b"]), T.add(T.matmul(h, p["logvar_W"]), p["logvar_b"])


def _decode_logits(p, z: Tensor) -> Tensor:
    h = T.relu(T.add(T.matmul(z, p["dec_W"]), p["dec_b"]))
    return T.add(T.matmul(h, p["out_W"]), p["out_b"])


def kl_divergence(mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)) per row."""
    return 0.5 * (mu * mu + np.exp(log_var) - 1.0 - log_var).sum(axis=-1)


def reparameterize(mu, log_var, noise):
    """z = mu + exp(log_var / 2) * noise, on tensors or arrays."""
    if isinstance(mu, Tensor):
        return T.add(mu, T.mul(T.exp(T.mul(log_var, 0.5)), noise))
    return mu + np.exp(0.5 * np.asarray(log_var)) * noise


def negative_elbo(p, x: np.ndarray, noise: np.ndarray) -> tuple[Tensor, float, float]:
    """Mean over the batch of (Bernoulli reconstruction NLL + KL); also returns both parts."""
    xt = Tensor(x)
    mu, log_var = _encode(p, xt)
    z = reparameterize(mu, log_var, noise)
    recon = T.bce_with_logits(_decode_logits(p, z), x)
    kl_terms = T.mul(T.add(T.add(T.square(mu), T.exp(log_var)), T.add(T.neg(log_var), -1.0)), 0.5)
    kl = T.tensor_sum(kl_terms)
    n = len(x)
    loss = T.mul(T.add(recon, kl), 1.0 / n)
    return loss, recon.item() / n, kl.item() / n


def train_vae(images, cfg: TrainConfig, hidden: int = 512) -> Vae2D:
    """Maximise the ELBO by minibatch gradient descent with the reparameterisation trick."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ConfigError("cannot train a VAE on an empty dataset")
    if images.min() < 0 or images.max() > 1:
        raise ConfigError("VAE inputs must lie in [0, 1]")
    vae = init_vae(images.shape[1], hidden, cfg.seed)
    params = {k: Tensor(v, requires_grad=True) for k, v in vae.params.items()}
    opt = nn.make_optimizer(list(params.values()), cfg)
    rng = np.random.default_rng([cfg.seed, 8])
    history = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                xb = images[order[start:start + cfg.batch_size]]
                noise = rng.standard_normal((len(xb), LATENT_DIM))
                loss, _, kl = negative_elbo(params, xb, noise)
                if kl < 0:
                    raise TrainingError(f"negative KL {kl} in epoch {epoch}")
                for t in params.values():
                    t.zero_grad()
                T.backward(loss)
                opt.step()
                total += loss.item() * len(xb)
        except NonFiniteError as exc:
            raise TrainingError(f"VAE training produced a NaN ELBO in epoch {epoch}: {exc}") from exc
        history.append(-total / n)
        log.info("vae epoch %d elbo %.3f", epoch, history[-1])
    return Vae2D({k: t.data for k, t in params.items()}, cfg.seed, cfg.epochs, history)


def encode(vae: Vae2D, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    parts = [_encode(vae.params, Tensor(x[s:s + nn.CHUNK])) for s in range(0, len(x), nn.CHUNK)]
    if not parts:
        return np.zeros((0, LATENT_DIM)), np.zeros((0, LATENT_DIM))
    return np.concatenate([m.data for m, _ in parts]), np.concatenate([v.data for _, v in parts])


def encode_mean(vae: Vae2D, x) -> np.ndarray:
    return encode(vae, x)[0]


def decode_tensor(vae: Vae2D, z: Tensor) -> Tensor:
    """Differentiable decode: sigmoid of the decoder logits."""
    return T.sigmoid(_decode_logits(vae.params, z))


def decode(vae: Vae2D, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    out = np.concatenate([decode_tensor(vae, Tensor(z[s:s + nn.CHUNK])).data
                          for s in range(0, len(z), nn.CHUNK)]) if len(z) else np.zeros((0, vae.input_dim))
    return out[0] if single else out


def reconstruction_bce(vae: Vae2D, x) -> np.ndarray:
    """Per-image Bernoulli NLL of ``x`` given decode(encode_mean(x))."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu = encode_mean(vae, x)
    logits = np.concatenate([_decode_logits(vae.params, Tensor(mu[s:s + nn.CHUNK])).data
                             for s in range(0, len(mu), nn.CHUNK)])
    return (np.logaddexp(0.0, -np.abs(logits)) + np.maximum(logits, 0.0) - logits * x).sum(axis=1)


@dataclass
class LatentGrid:
    """Row ``r`` holds latent z2 = z2_values[r] (descending), column ``c`` z1 = z1_values[c]."""

    z1_values: np.ndarray
    z2_values: np.ndarray
    values: np.ndarray
    argmax: np.ndarray
    measure: str

    @property
    def points(self) -> np.ndarray:
        z1, z2 = np.meshgrid(self.z1_values, self.z2_values)
        return np.stack([z1.ravel(), z2.ravel()], axis=1)


def grid_points(bounds, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = bounds
    if resolution < 2:
        raise ConfigError(f"grid resolution must be >= 2, got {resolution}")
    if not hi > lo:
        raise ConfigError(f"grid bounds must satisfy min < max, got {bounds}")
    axis = np.linspace(lo, hi, resolution)
    return axis, axis[::-1].copy()


def _require_trained(vae: Vae2D, classifier: DropoutClassifier) -> None:
    if vae.epochs_trained <= 0 or classifier.epochs_trained <= 0:
        raise ContractError("latent maps need trained VAE and classifier checkpoints")


def latent_grid_map(vae: Vae2D, classifier: DropoutClassifier, bounds=(-3.0, 3.0), resolution: int = 100,
                    measure: str = "mi", num_samples: int = 20, seed: int = 0, workers: int = 1,
                    models: list[DropoutClassifier] | None = None) -> LatentGrid:
    """Decode every grid point, MC-predict it and score it with ``measure``.

    ``models`` switches to a pooled dropout ensemble (``num_samples`` per member).
    """
    name = U.ALIASES.get(measure, measure)
    if name not in U.MEASURES:
        raise ConfigError(f"unknown uncertainty measure {measure!r}")
    for m in models or [classifier]:
        _require_trained(vae, m)
    z1, z2 = grid_points(bounds, resolution)
    grid = LatentGrid(z1, z2, np.empty(0), np.empty(0), name)
    images = decode(vae, grid.points)
    ids = np.arange(len(images))
    if models is None:
        mc = nn.mc_predict(classifier, images, num_samples, seed, ids, workers=workers)
    else:
        from mcadv.experiments import ensemble_mc_predict

        mc = ensemble_mc_predict(models, images, num_samples, seed, ids, workers)
    grid.values = U.score(mc, name).reshape(resolution, resolution)
    grid.argmax = mc.mean.argmax(axis=-1).reshape(resolution, resolution)
    return grid


def write_grid_csv(path, grid: LatentGrid) -> None:
    pts = grid.points
    with open(path, "w") as fh:
        fh.write("z1,z2,argmax_class,value\n")
        for (a, b), k, v in zip(pts, grid.argmax.ravel(), grid.values.ravel()):
            fh.write(f"{float(a)!r},{float(b)!r},{int(k)},{float(v)!r}\n")


def to_pgm(values: np.ndarray) -> bytes:
    """8-bit binary PGM, min-max normalised so the largest value is white."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi > lo:
        pixels = np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(values.shape, dtype=np.uint8)
    rows, cols = values.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, values: np.ndarray) -> None:
    Path(path).write_bytes(to_pgm(values))


def write_encodings_csv(path, vae: Vae2D, images, labels) -> None:
    mu = encode_mean(vae, images)
    with open(path, "w") as fh:
        fh.write("z1,z2,label\n")
        for (a, b), y in zip(mu, labels):
            fh.write(f"{float(a)!r},{float(b)!r},{int(y)}\n")
