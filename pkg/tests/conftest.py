"""Shared fixtures: a 32x32 scene config, a tiny model config and a small on-disk corpus."""

import pytest

from src.config.schema import DatasetConfig, ModelConfig, RunConfig, SceneConfig, run_config_from_dict
from src.data.records import build_dataset, load_dataset
from src.data.scenegen import default_vocabulary


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def scene_config():
    return SceneConfig(width=32, height=32, max_objects=3)


@pytest.fixture(scope="session")
def tiny_config(vocab):
    """RunConfig small enough for a few optimisation steps per test."""
    return run_config_from_dict({
        "scene": {"width": 32, "height": 32, "max_objects": 3},
        "dataset": {"num_scenes": 16, "val_ratio": 0.25, "test_ratio": 0.25, "detection_scenes": 4},
        "model": {"d": 16, "heads": 2, "enc_layers": 1, "dec_layers": 1, "num_queries": 2,
                  "image_height": 32, "image_width": 32, "vocab_size": len(vocab)},
        "train": {"epochs": 1, "lr": 1e-3, "batch_size": 4, "checkpoint_every": 0},
        "cycle": {"epochs": 1, "lr": 1e-3, "batch_size": 4, "checkpoint_every": 0,
                  "cycle_batch_size": 2, "cycle_every": 1},
        "beam": {"beam_width": 1, "max_new_tokens": 20},
    })


@pytest.fixture(scope="session")
def tiny_model_config(vocab):
    return ModelConfig(d=16, heads=2, enc_layers=1, dec_layers=1, num_queries=2, patch=8,
                       image_height=32, image_width=32, max_seq_len=64, vocab_size=len(vocab))


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, tiny_config):
    root = tmp_path_factory.mktemp("corpus")
    build_dataset(str(root), tiny_config.dataset, tiny_config.scene)
    return str(root)


@pytest.fixture
def dataset(dataset_dir):
    return load_dataset(dataset_dir)


@pytest.fixture
def default_run_config():
    return RunConfig()


@pytest.fixture
def small_dataset_config():
    return DatasetConfig(num_scenes=10, val_ratio=0.2, test_ratio=0.2, seed=7)
