import numpy as np
import pytest

from mcadv import __version__
from mcadv.cli import main
from mcadv.config import SCHEMA, RunConfig
from mcadv.data import STANDIN_FILES
from mcadv.errors import ConfigError


def test_defaults_cover_every_key():
    cfg = RunConfig()
    assert set(cfg.values) == set(SCHEMA)
    assert cfg["layer_sizes"] == [784, 512, 512, 10]
    assert cfg["noise_sigma"] == 10 / 255
    assert cfg["detect_epsilons"] == [5 / 255, 10 / 255, 0.1]


def test_parse_comments_and_overrides():
    cfg = RunConfig.parse("# header\nseed = 4  # trailing\n\nepochs=2\n")
    assert cfg["seed"] == 4 and cfg["epochs"] == 2
    cfg.set("seed", "9")
    assert cfg["seed"] == 9
    assert "seed = 9" in cfg.dumps()
    assert __version__ in cfg.dumps().splitlines()[0]


def test_resolved_dump_round_trips():
    cfg = RunConfig.parse("attack_epsilon = 8/255\nlayer_sizes = 784, 32, 10\n")
    again = RunConfig.parse(cfg.dumps())
    assert again.values == cfg.values


@pytest.mark.parametrize("text", ["bogus = 1", "seed = x", "seed = 1\nseed = 2", "just words",
                                  "attack_epsilon = 1/0"])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        RunConfig.parse(text)


def test_require_names_the_key():
    with pytest.raises(ConfigError, match="train_images"):
        RunConfig().require("train_images")


# ---- command line ---------------------------------------------------------

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-standin", "--set", f"out_dir={root / 'data'}", "--set", "train_size=300",
                 "--set", "test_size=120"]) == 0
    d = root / "data"
    cfg = root / "run.cfg"
    cfg.write_text("\n".join([
        f"train_images = {d / STANDIN_FILES[0]}", f"train_labels = {d / STANDIN_FILES[1]}",
        f"test_images = {d / STANDIN_FILES[2]}", f"test_labels = {d / STANDIN_FILES[3]}",
        "train_size = 300", "test_size = 120", "layer_sizes = 784,16,10", "drop_probs = 0,0.5",
        "epochs = 2", "vae_hidden = 16", "vae_epochs = 2", "mc_samples = 4", "attack_count = 20",
        "pool_clean = 10", "pool_noisy = 10", "pool_adversarial = 10", "detect_attacks = fgm,mim",
        "detect_epsilons = 0.1", "detect_attack_mc_samples = 2", "grid_resolution = 5",
        "population_pairs = 12", "interp_steps = 3",
        f"classifier_checkpoint = {root / 'clf' / 'classifier.ckpt'}",
        f"vae_checkpoint = {root / 'vae' / 'vae.ckpt'}",
    ]) + "\n")
    assert run(cfg, "train", root / "clf") == 0
    assert run(cfg, "train-vae", root / "vae") == 0
    return root, cfg


def run(cfg, command, out, *sets, workers=1):
    argv = [command, "--config", str(cfg), "--set", f"out_dir={out}", "--workers", str(workers)]
    for s in sets:
        argv += ["--set", s]
    return main(argv)


def test_outputs_carry_config_and_version(workspace):
    root, _ = workspace
    for sub in ("clf", "vae"):
        assert (root / sub / "VERSION").read_text().strip() == f"mcadv {__version__}"
        assert (root / sub / "resolved_config.cfg").exists()
    assert (root / "clf" / "history.csv").read_text().startswith("epoch,loss,accuracy\n")
    assert (root / "vae" / "encodings.csv").read_text().startswith("z1,z2,label\n")


def test_training_twice_is_bit_identical(workspace):
    root, cfg = workspace
    assert run(cfg, "train", root / "clf2") == 0
    assert (root / "clf" / "classifier.ckpt").read_bytes() == (root / "clf2" / "classifier.ckpt").read_bytes()


def test_zero_epochs_writes_initialization(workspace):
    from mcadv.nn import DropoutClassifier, init_classifier

    root, cfg = workspace
    assert run(cfg, "train", root / "init", "epochs=0") == 0
    m = DropoutClassifier.load(root / "init" / "classifier.ckpt")
    ref = init_classifier([784, 16, 10], [0.0, 0.5], seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(m.weights, ref.weights))


def test_attack_summary_matches_manifest(workspace):
    root, cfg = workspace
    assert run(cfg, "attack", root / "atk", "attack_epsilon=0.2") == 0
    rows = (root / "atk" / "adv" / "manifest.csv").read_text().splitlines()[1:]
    rate = sum(int(r.split(",")[4]) for r in rows) / len(rows)
    summary = (root / "atk" / "summary.txt").read_text()
    assert f"success_rate={rate!r}" in summary


def test_attack_with_zero_epsilon(workspace):
    root, cfg = workspace
    assert run(cfg, "attack", root / "atk0", "attack_epsilon=0") == 0
    assert "success_rate=0.0" in (root / "atk0" / "summary.txt").read_text()


def test_mim_without_momentum_reproduces_bim(workspace):
    root, cfg = workspace
    assert run(cfg, "attack", root / "bim", "attack_method=bim") == 0
    assert run(cfg, "attack", root / "mim", "attack_method=mim", "attack_momentum=0") == 0
    for name in ("manifest.csv", "adversarials.idx"):
        assert (root / "bim" / "adv" / name).read_bytes() == (root / "mim" / "adv" / name).read_bytes()


def test_detect_report(workspace):
    root, cfg = workspace
    assert run(cfg, "detect", root / "det") == 0
    lines = (root / "det" / "report.csv").read_text().splitlines()
    assert lines[0] == "attack,epsilon,model_mode,measure,auc,auc_success_filtered,attack_success_rate"
    assert len(lines) == 1 + 2 * 2 * 4
    assert any(",deterministic,mi,N.A,N.A," in line for line in lines)
    assert list((root / "det" / "roc").glob("*.csv"))


def test_latent_map_without_dropout_is_black(workspace):
    root, cfg = workspace
    assert run(cfg, "train", root / "nodrop", "drop_probs=0,0") == 0
    assert run(cfg, "latent-map", root / "map0",
               f"classifier_checkpoint={root / 'nodrop' / 'classifier.ckpt'}", "map_measures=mi") == 0
    assert (root / "map0" / "latent_map_mi.pgm").read_bytes() == b"P5\n5 5\n255\n" + bytes(25)


def test_interpolate_two_steps(workspace):
    root, cfg = workspace
    assert run(cfg, "interpolate", root / "int2", "interp_steps=2") == 0
    lines = (root / "int2" / "interpolation.csv").read_text().splitlines()
    # one row per lambda in each of the two modes
    assert [l.split(",")[:2] for l in lines[1:]] == [["pixel", "0.0"], ["pixel", "1.0"],
                                                      ["latent", "0.0"], ["latent", "1.0"]]


def test_single_member_ensemble_equals_single_model(workspace):
    root, cfg = workspace
    assert run(cfg, "latent-map", root / "map1") == 0
    assert run(cfg, "ensemble", root / "ens1", f"ensemble_checkpoints={root / 'clf' / 'classifier.ckpt'}") == 0
    for m in ("mi", "entropy"):
        assert (root / "map1" / f"latent_map_{m}.csv").read_bytes() == \
            (root / "ens1" / f"ensemble_map_{m}.csv").read_bytes()


@pytest.mark.parametrize("command", ["population", "garbage"])
def test_other_commands_succeed(workspace, command):
    root, cfg = workspace
    assert run(cfg, command, root / command) == 0


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_exit_codes(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["train", "--set", "nope=1"]) == 1
    assert main(["train", "--set", f"out_dir={tmp_path}"]) == 1
    assert "train_images" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 1
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x05")
    assert run(cfg, "train", tmp_path / "o", f"train_images={bad}") == 2
    assert run(cfg, "latent-map", tmp_path / "o", f"vae_checkpoint={tmp_path / 'missing.ckpt'}") == 2
    assert run(cfg, "train", tmp_path / "o", "learning_rate=1e200") == 3
