import importlib.util
from pathlib import Path

import numpy as np
import pytest
import yaml

ROOT = Path(__file__).resolve().parent.parent

_spec = importlib.util.spec_from_file_location(
    "make_synthetic_dataset", ROOT / "scripts" / "make_synthetic_dataset.py")
synthetic = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(synthetic)


# Small chain: 16x16 -> conv3 14 -> pool 7 -> conv3 5 -> pool 2 -> 16 -> 8 -> 4
TINY_MODEL = {
    "conv_filters": [2, 4],
    "conv_kernels": [3, 3],
    "dense_units": [8],
    "num_classes": 4,
    "dtype": "float32",
}


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("CTSCAN_DATA_DIR", "CTSCAN_OUT_DIR", "CTSCAN_SEED", "CTSCAN_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def dataset_root(tmp_path):
    """40 quadrant-brightness PNGs, 10 per class, 32x32."""
    root = tmp_path / "dataset"
    synthetic.write_dataset(root, per_class=10, size=32, seed=7)
    return root


def write_config(path: Path, data_root: Path, out_dir: Path, **overrides) -> Path:
    cfg = {
        "data_root": str(data_root),
        "output_dir": str(out_dir),
        "preprocess": {"size": 16},
        "model": dict(TINY_MODEL),
        "train": {"epochs": 3, "batch_size": 5, "seed": 1000},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


@pytest.fixture
def tiny_config(tmp_path, dataset_root):
    return write_config(tmp_path / "run.yaml", dataset_root, tmp_path / "out")
