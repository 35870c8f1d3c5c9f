import pytest

from trunksnn.config import ExperimentConfig, load_config, parse_config
from trunksnn.errors import ConfigError


def test_defaults_build_library_objects():
    cfg = ExperimentConfig()
    spec = cfg.arm_spec()
    assert spec.n_joints == 4 and spec.tilt_max == 16.0
    assert cfg.neuron().v_thr == 0.61
    assert cfg.topology().n_in == 3 + 4
    tc = cfg.train_config()
    assert (tc.batch_size, tc.lr0, tc.epochs) == (128, 0.001, 64)
    assert cfg.infer_options().max_iters == 5000


def test_parse_types_comments_and_none():
    cfg = parse_config("""
    # desk run
    arm.variant = three   # trailing comment
    arm.n_joints = 10
    arm.tilt_max = 35
    model.n_alif = none
    train.epochs = 1_000
    infer.correction = off
    infer.eta0 = 0.05
    seed = 7
    """)
    assert cfg.arm.variant == "three" and cfg.arm.n_joints == 10
    assert cfg.arm.tilt_max == 35.0 and isinstance(cfg.arm.tilt_max, float)
    assert cfg.model.n_alif is None and cfg.train.epochs == 1000
    assert cfg.infer.correction is False and cfg.infer.eta0 == 0.05 and cfg.seed == 7
    assert cfg.arm_spec().tilt_max == 35.0


@pytest.mark.parametrize("text", [
    "arm.colour = red",
    "nosuch.key = 1",
    "train.epochs = many",
    "train.epochs = none",
    "infer.correction = maybe",
    "just some words",
    "arm = 3",
])
def test_bad_lines_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_error_names_line_number():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("seed = 1\ntrain.bogus = 2\n")


def test_invalid_arm_is_config_error():
    cfg = parse_config("arm.variant = five")
    with pytest.raises(ConfigError):
        cfg.arm_spec()


def test_dump_round_trip(tmp_path):
    cfg = parse_config("arm.n_joints = 6\nmodel.alpha = 0.9\ninfer.early_stop = false\n")
    path = tmp_path / "c.cfg"
    path.write_text(cfg.dumps())
    assert load_config(path) == cfg


def test_typed_set():
    cfg = ExperimentConfig()
    cfg.set("train.lr0", 1)
    assert cfg.train.lr0 == 1.0 and isinstance(cfg.train.lr0, float)
    with pytest.raises(ConfigError):
        cfg.set("train.epochs", "x")
    with pytest.raises(ConfigError):
        cfg.set("train.epochs", 1.5)
