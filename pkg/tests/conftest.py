import os

import pytest
import torch

from data_loader.synthetic import make_synthetic
from domain.config import DatabaseConfig, DataConfig, ModelConfig, RunConfig, TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="esegue anche i test lenti")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: addestramento completo sul dataset sintetico")
    config.addinivalue_line("markers", "external_data: richiede i dataset reali nella cartella LEUKODET_DATA")


def pytest_collection_modifyitems(config, items):
    skip_slow = pytest.mark.skip(reason="test lento, usare --runslow")
    skip_data = pytest.mark.skip(reason="LEUKODET_DATA non impostata")
    for item in items:
        if "slow" in item.keywords and not config.getoption("--runslow"):
            item.add_marker(skip_slow)
        if "external_data" in item.keywords and not os.environ.get("LEUKODET_DATA"):
            item.add_marker(skip_data)


@pytest.fixture(autouse=True)
def fixed_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    make_synthetic(str(out), seed=0, n_images=4, classes=3)
    return out


@pytest.fixture
def tiny_model_config():
    return ModelConfig(d_ffn=64, dropout=0.0, points=2, enc_layers=1, dec_layers=2, num_queries=10)


@pytest.fixture
def tiny_config(tmp_path, synthetic_dir, tiny_model_config):
    annotations = str(synthetic_dir / "annotations.json")
    images = str(synthetic_dir / "images")
    return RunConfig(
        data=DataConfig(dataset="synthetic", train_annotations=annotations, train_images=images,
                        test_annotations=annotations, test_images=images, batch_size=2),
        model=tiny_model_config,
        train=TrainConfig(epochs=1, max_iterations=2, eval_every=0, checkpoint_every=1, seed=0,
                          output_dir=str(tmp_path / "run")),
        database=DatabaseConfig(enabled=True, path=str(tmp_path / "metrics.db")),
    )
