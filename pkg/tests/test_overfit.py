import os

import numpy as np
import pytest

from data_loader.synthetic import make_synthetic
from domain.config import load_config
from training.trainer import Trainer

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..")


@pytest.mark.slow
def test_overfit_synthetic_dataset(tmp_path):
    data_dir = tmp_path / "synthetic"
    make_synthetic(str(data_dir), seed=0, n_images=20)
    annotations, images = str(data_dir / "annotations.json"), str(data_dir / "images")
    config = load_config(os.path.join(ROOT, "config_synthetic.yaml"), [
        f"data.train_annotations={annotations}", f"data.train_images={images}",
        f"data.test_annotations={annotations}", f"data.test_images={images}",
        f"train.output_dir={tmp_path / 'run'}", "database.enabled=false",
    ])
    trainer = Trainer(config)
    report = trainer.fit()

    history = np.asarray(trainer.history)
    assert len(history) == config.train.max_iterations
    assert history[-20:].mean() < 0.5 * history[:20].mean()
    assert report.ap50 >= 0.95
