import pytest
import yaml

from ctscan_cnn.engine.layers import REFERENCE_SHAPE_CHAIN
from ctscan_cnn.engine.rng import make_rng
from ctscan_cnn.engine.run_config import PACKAGED_DEFAULT_CONFIG, RunConfig, load_run_config
from ctscan_cnn.errors import ConfigError, DataError

from conftest import write_config


def test_packaged_default_is_the_reference_run():
    cfg = load_run_config(PACKAGED_DEFAULT_CONFIG)
    assert cfg.train.learning_rate == 0.01
    assert cfg.train.epochs == 50
    assert cfg.train.batch_size == 13
    assert cfg.train.seed == 1000
    assert cfg.train.epsilon == 1e-7
    assert cfg.split_ratios == (0.70, 0.15, 0.15)
    assert cfg.preprocess.size == 64 and cfg.preprocess.grayscale
    assert [shape for _, shape in cfg.model_spec().shape_trace()] == REFERENCE_SHAPE_CHAIN
    assert cfg.fingerprint() == RunConfig().fingerprint()


def test_relative_paths_resolve_against_config_dir(tmp_path):
    path = tmp_path / "cfg" / "run.yaml"
    path.parent.mkdir()
    path.write_text("data_root: ../data\noutput_dir: out\n")
    cfg = load_run_config(path)
    assert cfg.data_root.is_absolute()
    assert cfg.data_root.resolve() == (tmp_path / "data").resolve()
    assert cfg.output_dir.resolve() == (tmp_path / "cfg" / "out").resolve()


def test_precedence_cli_over_env_over_file(tmp_path, monkeypatch):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"train": {"seed": 1, "epochs": 5}}))
    assert load_run_config(path).train.seed == 1

    monkeypatch.setenv("CTSCAN_SEED", "2")
    monkeypatch.setenv("CTSCAN_OUT_DIR", str(tmp_path / "env_out"))
    cfg = load_run_config(path)
    assert cfg.train.seed == 2
    assert cfg.output_dir.resolve() == (tmp_path / "env_out").resolve()

    cfg = load_run_config(path, {"seed": 3, "epochs": 7, "output_dir": str(tmp_path / "cli_out")})
    assert cfg.train.seed == 3 and cfg.train.epochs == 7
    assert cfg.output_dir.resolve() == (tmp_path / "cli_out").resolve()


def test_bad_env_seed(tmp_path, monkeypatch):
    path = tmp_path / "run.yaml"
    path.write_text("{}")
    monkeypatch.setenv("CTSCAN_SEED", "abc")
    with pytest.raises(ConfigError, match="CTSCAN_SEED"):
        load_run_config(path)


@pytest.mark.parametrize("body,needle", [
    ("train: {learning_rate: -1}", "train.learning_rate"),
    ("unknown_key: 1", "unknown_key"),
    ("split_ratios: [0.5, 0.3, 0.3]", "split_ratios"),
    ("class_map: {normal: 7}", "class_map"),
    ("metrics: {auc_averaging: weighted}", "auc_averaging"),
    ("model: {dtype: float16}", "dtype"),
    ("train: {seed: -1}", "train.seed"),
])
def test_invalid_configs_name_the_field(tmp_path, body, needle):
    path = tmp_path / "run.yaml"
    path.write_text(body)
    with pytest.raises(ConfigError, match=needle):
        load_run_config(path)


def test_unparseable_and_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "nope.yaml")
    path = tmp_path / "run.yaml"
    path.write_text("train: [unclosed")
    with pytest.raises(ConfigError):
        load_run_config(path)
    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_model_that_does_not_fit_is_a_config_error(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"preprocess": {"size": 8}}))
    with pytest.raises(ConfigError, match="does not fit"):
        load_run_config(path).model_spec()


def test_fingerprint_ignores_paths_but_not_hyperparameters(tmp_path, dataset_root):
    a = load_run_config(write_config(tmp_path / "a.yaml", dataset_root, tmp_path / "out_a"))
    b = load_run_config(write_config(tmp_path / "b.yaml", tmp_path / "elsewhere", tmp_path / "out_b",
                                     workers=4, cache=True))
    c = load_run_config(write_config(tmp_path / "c.yaml", dataset_root, tmp_path / "out_a",
                                     train={"learning_rate": 0.001}))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    assert len(a.fingerprint()) == 64


def test_check_paths(tmp_path, dataset_root):
    load_run_config(write_config(tmp_path / "ok.yaml", dataset_root, tmp_path / "out")).check_paths()
    cfg = load_run_config(write_config(tmp_path / "bad.yaml", tmp_path / "missing", tmp_path / "out"))
    with pytest.raises(DataError):
        cfg.check_paths()


def test_negative_seed_is_a_config_error(tmp_path, monkeypatch):
    path = tmp_path / "run.yaml"
    path.write_text("{}")
    with pytest.raises(ConfigError, match="seed"):
        load_run_config(path, {"seed": -1})
    monkeypatch.setenv("CTSCAN_SEED", "-5")
    with pytest.raises(ConfigError, match="seed"):
        load_run_config(path)
    with pytest.raises(ConfigError):
        make_rng(-1, "split")
