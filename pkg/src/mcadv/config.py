"""Flat ``key = value`` run configuration.

One pair per line, ``#`` starts a comment. Every key has a default; unknown
keys are rejected so typos never pass silently. Float values may be written
as fractions (``10/255``).
"""
from __future__ import annotations

from fractions import Fraction
from pathlib import Path

from mcadv import __version__
from mcadv.errors import ConfigError


def _float(text: str) -> float:
    text = text.strip()
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"not a number: {text!r}") from exc


def _int(text: str) -> int:
    return int(text.strip())


def _list(conv):
    def parse(text: str):
        text = text.strip()
        return [conv(part) for part in text.split(",") if part.strip()] if text else []
    return parse


def _str(text: str) -> str:
    return text.strip()


# key -> (parser, default text)
SCHEMA: dict[str, tuple] = {
    "out_dir": (_str, "out"),
    "seed": (_int, "0"),
    # data
    "train_images": (_str, ""),
    "train_labels": (_str, ""),
    "test_images": (_str, ""),
    "test_labels": (_str, ""),
    "train_size": (_int, "10000"),
    "test_size": (_int, "2000"),
    "subsample_seed": (_int, "0"),
    # classifier
    "layer_sizes": (_list(_int), "784,512,512,10"),
    "drop_probs": (_list(_float), "0.0,0.5,0.5"),
    "epochs": (_int, "20"),
    "batch_size": (_int, "128"),
    "learning_rate": (_float, "0.05"),
    "momentum": (_float, "0.9"),
    "weight_decay": (_float, "1e-5"),
    "optimizer": (_str, "sgd"),
    "classifier_checkpoint": (_str, ""),
    "mc_samples": (_int, "20"),
    # vae
    "vae_hidden": (_int, "512"),
    "vae_epochs": (_int, "30"),
    "vae_batch_size": (_int, "128"),
    "vae_learning_rate": (_float, "1e-3"),
    "vae_optimizer": (_str, "adam"),
    "vae_checkpoint": (_str, ""),
    # attack
    "attack_method": (_str, "bim"),
    "attack_epsilon": (_float, "0.1"),
    "attack_step_size": (_float, "0"),
    "attack_iterations": (_int, "10"),
    "attack_momentum": (_float, "1.0"),
    "attack_mc_samples": (_int, "1"),
    "attack_count": (_int, "300"),
    # detection
    "detect_attacks": (_list(_str), "fgm,bim,mim"),
    "detect_epsilons": (_list(_float), "5/255,10/255,0.1"),
    "detect_modes": (_list(_str), "deterministic,mc"),
    "detect_measures": (_list(_str), "entropy,mi,variance,vr"),
    "detect_attack_mc_samples": (_int, "10"),
    "noise_sigma": (_float, "10/255"),
    "pool_clean": (_int, "300"),
    "pool_noisy": (_int, "300"),
    "pool_adversarial": (_int, "300"),
    # latent maps and experiments
    "grid_min": (_float, "-3"),
    "grid_max": (_float, "3"),
    "grid_resolution": (_int, "100"),
    "map_measures": (_list(_str), "mi,entropy"),
    "interp_index_a": (_int, "-1"),
    "interp_index_b": (_int, "-1"),
    "interp_class_a": (_int, "3"),
    "interp_class_b": (_int, "8"),
    "interp_steps": (_int, "21"),
    "population_pairs": (_int, "300"),
    "garbage_conf": (_float, "0.9"),
    "garbage_dist": (_float, "0.5"),
    "ensemble_checkpoints": (_list(_str), ""),
    "ensemble_samples_per_model": (_int, "0"),
}


class RunConfig:
    """Resolved configuration; raw text is kept so it can be written back verbatim."""

    def __init__(self, raw: dict[str, str] | None = None):
        self.raw = {k: default for k, (_, default) in SCHEMA.items()}
        self.values: dict = {}
        for key, text in (raw or {}).items():
            self.set(key, text)
        for key in SCHEMA:
            if key not in self.values:
                self._parse(key)

    def _parse(self, key: str) -> None:
        parser = SCHEMA[key][0]
        try:
            self.values[key] = parser(self.raw[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    def set(self, key: str, text: str) -> None:
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.raw[key] = text.strip()
        self._parse(key)

    def __getitem__(self, key: str):
        return self.values[key]

    def require(self, key: str) -> str:
        value = self.values[key]
        if value in ("", [], None):
            raise ConfigError(f"config key {key!r} is required but not set")
        return value

    def dumps(self) -> str:
        lines = [f"# resolved configuration, mcadv {__version__}"]
        lines += [f"{k} = {self.raw[k]}" for k in SCHEMA]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key in raw:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            raw[key] = value
        return cls(raw)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text)
