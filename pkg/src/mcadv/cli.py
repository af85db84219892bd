"""Command-line entry point: ``mcadv <command> --config run.cfg [--set key=value ...]``.

Exit codes: 0 success, 1 configuration error, 2 data/parse error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from mcadv import __version__
from mcadv import data as D
from mcadv import detect as DT
from mcadv import experiments as E
from mcadv import vae as V
from mcadv.attacks import AttackConfig, craft_batch
from mcadv.config import RunConfig
from mcadv.errors import ConfigError, McadvError
from mcadv.nn import DropoutClassifier, TrainConfig, accuracy, train_classifier

log = logging.getLogger("mcadv")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.cfg").write_text(cfg.dumps(), encoding="utf-8")
    (out / "VERSION").write_text(f"mcadv {__version__}\n", encoding="utf-8")
    return out


def _load_split(cfg: RunConfig, which: str) -> D.LabeledDataset:
    images = cfg.require(f"{which}_images")
    labels = cfg.require(f"{which}_labels")
    full = D.load_dataset(images, labels, name=which)
    size = cfg[f"{which}_size"]
    if size >= len(full) or size <= 0:
        return full
    return D.subsample(full, size, cfg["subsample_seed"])


def _classifier(cfg: RunConfig) -> DropoutClassifier:
    return DropoutClassifier.load(cfg.require("classifier_checkpoint"))


def _vae(cfg: RunConfig) -> V.Vae2D:
    return V.Vae2D.load(cfg.require("vae_checkpoint"))


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_train(cfg: RunConfig, workers: int) -> int:
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    tc = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["learning_rate"], cfg["weight_decay"],
                     cfg["seed"], cfg["momentum"], cfg["optimizer"])
    model = train_classifier(train.images, train.labels, cfg["layer_sizes"], cfg["drop_probs"], tc)
    out = _out_dir(cfg)
    model.save(out / "classifier.ckpt")
    _write_rows(out / "history.csv", ("epoch", "loss", "accuracy"),
                [(k, repr(l), repr(a)) for k, (l, a) in enumerate(zip(model.history.loss, model.history.accuracy))])
    acc = accuracy(model, test.images, test.labels)
    (out / "summary.txt").write_text(f"test_accuracy={acc!r}\n")
    print(f"test_accuracy={acc:.4f}")
    return 0


def cmd_train_vae(cfg: RunConfig, workers: int) -> int:
    train = _load_split(cfg, "train")
    tc = TrainConfig(cfg["vae_epochs"], cfg["vae_batch_size"], cfg["vae_learning_rate"], 0.0,
                     cfg["seed"], cfg["momentum"], cfg["vae_optimizer"])
    model = V.train_vae(train.images, tc, cfg["vae_hidden"])
    out = _out_dir(cfg)
    model.save(out / "vae.ckpt")
    _write_rows(out / "elbo.csv", ("epoch", "elbo"), [(k, repr(e)) for k, e in enumerate(model.elbo_history)])
    V.write_encodings_csv(out / "encodings.csv", model, train.images, train.labels)
    return 0


def _attack_cfg(cfg: RunConfig, method=None, epsilon=None, mc_samples=None) -> AttackConfig:
    step = cfg["attack_step_size"]
    return AttackConfig(
        method=method or cfg["attack_method"],
        epsilon=cfg["attack_epsilon"] if epsilon is None else epsilon,
        step_size=step if step > 0 else None,
        iterations=cfg["attack_iterations"],
        momentum_decay=cfg["attack_momentum"],
        mc_samples=cfg["attack_mc_samples"] if mc_samples is None else mc_samples,
        seed=cfg["seed"],
        eval_samples=cfg["mc_samples"],
    )


def cmd_attack(cfg: RunConfig, workers: int) -> int:
    model = _classifier(cfg)
    test = _load_split(cfg, "test")
    n = cfg["attack_count"]
    if n > len(test):
        raise ConfigError(f"attack_count={n} exceeds the {len(test)} test images")
    ac = _attack_cfg(cfg)
    batch = craft_batch(model, test.images[:n], test.labels[:n], ac, np.arange(n), workers)
    out = _out_dir(cfg)
    batch.save(out / "adv")
    line = f"method={ac.method} epsilon={ac.epsilon!r} n={len(batch)} success_rate={batch.success_rate!r}"
    (out / "summary.txt").write_text(line + "\n")
    print(line)
    return 0


def cmd_detect(cfg: RunConfig, workers: int) -> int:
    model = _classifier(cfg)
    test = _load_split(cfg, "test")
    out = _out_dir(cfg)
    roc_dir = out / "roc"
    roc_dir.mkdir(exist_ok=True)
    counts = (cfg["pool_clean"], cfg["pool_noisy"], cfg["pool_adversarial"])
    rows = []
    for method in cfg["detect_attacks"]:
        for eps in cfg["detect_epsilons"]:
            for mode in cfg["detect_modes"]:
                ta = 1 if mode == "deterministic" else cfg["detect_attack_mc_samples"]
                ac = _attack_cfg(cfg, method, eps, ta)
                ds = DT.build_detection_set(model, test.images, test.labels, ac, cfg["noise_sigma"], counts,
                                            cfg["seed"], workers)
                part = DT.detection_report(model, ds, ac, mode, cfg["detect_measures"], cfg["mc_samples"],
                                           cfg["seed"], workers)
                DT.write_rocs(roc_dir, part)
                rows += part
                log.info("%s eps=%.4f %s done", method, eps, mode)
    DT.write_report(out / "report.csv", rows)
    return 0


def _grid_outputs(out: Path, tag: str, grid: V.LatentGrid) -> None:
    V.write_grid_csv(out / f"{tag}.csv", grid)
    V.write_pgm(out / f"{tag}.pgm", grid.values)


def _bounds(cfg: RunConfig):
    return cfg["grid_min"], cfg["grid_max"]


def cmd_latent_map(cfg: RunConfig, workers: int) -> int:
    model, vae = _classifier(cfg), _vae(cfg)
    out = _out_dir(cfg)
    for measure in cfg["map_measures"]:
        grid = V.latent_grid_map(vae, model, _bounds(cfg), cfg["grid_resolution"], measure,
                                 cfg["mc_samples"], cfg["seed"], workers)
        _grid_outputs(out, f"latent_map_{measure}", grid)
    return 0


def _pick_pair(cfg: RunConfig, test: D.LabeledDataset) -> tuple[int, int]:
    a, b = cfg["interp_index_a"], cfg["interp_index_b"]
    if a >= 0 and b >= 0:
        if max(a, b) >= len(test):
            raise ConfigError(f"interpolation indices ({a}, {b}) exceed the {len(test)} test images")
        return a, b
    found = []
    for cls in (cfg["interp_class_a"], cfg["interp_class_b"]):
        hits = np.flatnonzero(test.labels == cls)
        if not len(hits):
            raise ConfigError(f"no test image of class {cls} for interpolation")
        found.append(int(hits[0]))
    return found[0], found[1]


def cmd_interpolate(cfg: RunConfig, workers: int) -> int:
    model, vae = _classifier(cfg), _vae(cfg)
    test = _load_split(cfg, "test")
    a, b = _pick_pair(cfg, test)
    prof = E.interpolation_profile(model, vae, test.images[a], test.images[b], cfg["interp_steps"],
                                   cfg["mc_samples"], cfg["seed"], (test.labels[a], test.labels[b]))
    out = _out_dir(cfg)
    prof.write_csv(out / "interpolation.csv")
    side = int(round(np.sqrt(model.input_dim)))
    for mode in E.MODES:
        imgs = prof.images[mode]
        # one square tile per lambda, left to right; non-square inputs fall back to one row each
        strip = np.concatenate([im.reshape(side, side) for im in imgs], axis=1) if side * side == imgs.shape[1] else imgs
        V.write_pgm(out / f"interpolation_{mode}.pgm", strip)
    return 0


def cmd_population(cfg: RunConfig, workers: int) -> int:
    model, vae = _classifier(cfg), _vae(cfg)
    test = _load_split(cfg, "test")
    pop = E.midpoint_population(model, vae, test.images, test.labels, cfg["population_pairs"],
                                cfg["mc_samples"], cfg["seed"], workers)
    out = _out_dir(cfg)
    pop.write_csv(out / "population.csv")
    pop.write_histograms(out / "population_histograms.csv")
    _write_rows(out / "population_summary.csv", ("statistic", "value"),
                [(k, repr(v)) for k, v in pop.summary().items()])
    return 0


def cmd_garbage(cfg: RunConfig, workers: int) -> int:
    model, vae = _classifier(cfg), _vae(cfg)
    train = _load_split(cfg, "train")
    enc = V.encode_mean(vae, train.images)
    found = E.garbage_scan(vae, model, enc, _bounds(cfg), cfg["grid_resolution"], cfg["mc_samples"],
                           cfg["garbage_conf"], cfg["garbage_dist"], cfg["seed"], workers)
    out = _out_dir(cfg)
    E.write_garbage_csv(out / "garbage.csv", found)
    if found:
        best = max(found, key=lambda c: (c.confidence, c.min_dist))
        V.write_pgm(out / "garbage_best.pgm", best.image.reshape(28, 28))
    print(f"candidates={len(found)}")
    return 0


def cmd_ensemble(cfg: RunConfig, workers: int) -> int:
    paths = cfg.require("ensemble_checkpoints")
    models = [DropoutClassifier.load(p) for p in paths]
    vae = _vae(cfg)
    per = cfg["ensemble_samples_per_model"] or max(1, cfg["mc_samples"] // len(models))
    out = _out_dir(cfg)
    for measure in cfg["map_measures"]:
        grid = V.latent_grid_map(vae, models[0], _bounds(cfg), cfg["grid_resolution"], measure, per,
                                 cfg["seed"], workers, models=models)
        _grid_outputs(out, f"ensemble_map_{measure}", grid)
    return 0


def cmd_make_standin(cfg: RunConfig, workers: int) -> int:
    out = _out_dir(cfg)
    paths = D.write_standin(out, n_train=cfg["train_size"], n_test=cfg["test_size"], seed=cfg["seed"])
    for p in paths:
        print(p)
    return 0


COMMANDS = {
    "train": cmd_train,
    "train-vae": cmd_train_vae,
    "attack": cmd_attack,
    "detect": cmd_detect,
    "latent-map": cmd_latent_map,
    "interpolate": cmd_interpolate,
    "population": cmd_population,
    "garbage": cmd_garbage,
    "ensemble": cmd_ensemble,
    "make-standin": cmd_make_standin,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcadv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mcadv {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--workers", type=int, default=1, help="parallel width of per-example loops")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            cfg.set(key, value)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        return COMMANDS[args.command](cfg, args.workers)
    except McadvError as exc:
        print(f"mcadv: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
