import copy
import json
import os

import numpy as np
import pytest
import torch
from PIL import Image

from database.sqlite_db import Database
from domain.config import OptimConfig, save_config
from domain.errors import TrainingAborted
from main import main
from training.checkpoint import link_last, prune_checkpoints, read_checkpoint
from training.inference import infer, legend, list_images
from training.trainer import Trainer, load_split


def _events(trainer):
    with open(os.path.join(trainer.report_dir, "metrics.jsonl")) as f:
        return [json.loads(line) for line in f]


def test_fit_writes_checkpoints_reports_and_metrics(tiny_config):
    trainer = Trainer(tiny_config)
    report = trainer.fit()
    assert trainer.iteration == 2
    assert len(trainer.history) == 2
    assert all(np.isfinite(trainer.history))
    assert os.path.exists(os.path.join(trainer.checkpoint_dir, "epoch_0001.pt"))
    assert os.path.exists(os.path.join(trainer.checkpoint_dir, "last.pt"))
    assert os.path.exists(os.path.join(tiny_config.train.output_dir, "config.yaml"))

    types = [e["type"] for e in _events(trainer)]
    assert types == ["epoch_completed", "checkpoint_saved", "evaluation_completed"]
    epoch = _events(trainer)[0]
    assert set(epoch["learning_rates"]) == {"backbone", "fpn", "transformer"}
    assert "total" in epoch["losses"] and "class_loss_0" in epoch["losses"]

    assert report is not None
    present = {c for c, n in report.num_ground_truth.items() if n > 0}
    assert set(report.per_class) == present

    db = Database(tiny_config.database.path)
    try:
        assert db.load_runs() == [trainer.run_hash]
        assert len(db.load_evaluations()) == 1
        assert [c["epoch"] for c in db.load_checkpoints()] == [1]
    finally:
        db.close()


def test_training_is_reproducible(tiny_config, tmp_path):
    first = Trainer(tiny_config)
    first.fit()
    second_config = copy.deepcopy(tiny_config)
    second_config.train.output_dir = str(tmp_path / "second")
    second = Trainer(second_config)
    second.fit()
    assert second.history == pytest.approx(first.history, rel=1e-5)


def test_resume_continues_from_next_epoch(tiny_config):
    tiny_config.train.max_iterations = 0
    trainer = Trainer(tiny_config)
    trainer.fit()
    last = os.path.join(trainer.checkpoint_dir, "last.pt")

    resumed_config = copy.deepcopy(tiny_config)
    resumed_config.train.epochs = 2
    resumed = Trainer(resumed_config)
    resumed.resume(last)
    assert resumed.start_epoch == 2
    assert resumed.iteration == 2
    resumed.fit()
    assert resumed.iteration == 4
    assert os.path.exists(os.path.join(resumed.checkpoint_dir, "epoch_0002.pt"))
    epochs = [e["epoch"] for e in _events(resumed) if e["type"] == "epoch_completed"]
    assert epochs == [1, 2]


def test_only_recent_checkpoints_are_kept(tiny_config):
    tiny_config.train.max_iterations = 0
    tiny_config.train.epochs = 3
    tiny_config.train.keep_checkpoints = 2
    trainer = Trainer(tiny_config)
    trainer.fit()
    files = sorted(os.listdir(trainer.checkpoint_dir))
    assert files == ["epoch_0002.pt", "epoch_0003.pt", "last.pt"]
    assert read_checkpoint(os.path.join(trainer.checkpoint_dir, "last.pt"))["epoch"] == 3


def test_prune_checkpoints_keeps_everything_with_zero(tmp_path):
    for epoch in range(1, 4):
        (tmp_path / f"epoch_{epoch:04d}.pt").write_bytes(b"x")
    assert prune_checkpoints(str(tmp_path), 0) == []
    removed = prune_checkpoints(str(tmp_path), 1)
    assert [os.path.basename(p) for p in removed] == ["epoch_0001.pt", "epoch_0002.pt"]
    assert sorted(os.listdir(tmp_path)) == ["epoch_0003.pt"]


def test_last_checkpoint_follows_latest_epoch(tmp_path):
    first, second = tmp_path / "epoch_0001.pt", tmp_path / "epoch_0002.pt"
    first.write_bytes(b"uno")
    second.write_bytes(b"due")
    last = str(tmp_path / "last.pt")
    link_last(str(first), last)
    link_last(str(second), last)
    with open(last, "rb") as f:
        assert f.read() == b"due"
    assert not os.path.exists(last + ".tmp")


def test_non_finite_outputs_abort_training(tiny_config):
    trainer = Trainer(tiny_config)
    with torch.no_grad():
        trainer.model.transformer.class_embed.bias.fill_(float("nan"))
    with pytest.raises(TrainingAborted) as info:
        trainer.fit()
    assert len(info.value.batch_ids) == 2
    dump = os.path.join(trainer.report_dir, "abort_epoch0001_iter000000.json")
    with open(dump) as f:
        data = json.load(f)
    assert data["batch_ids"] == info.value.batch_ids
    assert _events(trainer)[-1]["type"] == "training_aborted"


def test_untrained_model_scores_near_zero(tiny_config):
    trainer = Trainer(tiny_config)
    report = trainer.evaluate(0)
    assert report.ap < 0.05
    assert set(report.per_class) <= set(trainer.schema.classes)
    assert set(report.num_ground_truth) == set(trainer.schema.classes)


def test_param_groups_follow_recipe(tiny_config):
    trainer = Trainer(tiny_config)
    rates = trainer.learning_rates()
    optim = OptimConfig()
    assert rates == {"backbone": optim.lr_backbone, "fpn": optim.lr_fpn, "transformer": optim.lr_transformer}
    backbone_params = {id(p) for p in trainer.optimizer.param_groups[0]["params"]}
    # senza pesi pre-addestrati anche lo stem viene addestrato
    assert id(trainer.model.backbone.body.conv1.weight) in backbone_params
    assert trainer.optimizer.defaults["weight_decay"] == optim.weight_decay


def test_infer_writes_overlays_and_json(tiny_config, synthetic_dir, tmp_path):
    trainer = Trainer(tiny_config)
    paths = list_images(str(synthetic_dir / "images"))
    broken = tmp_path / "broken.png"
    broken.write_bytes(b"garbage")
    out_dir = tmp_path / "overlays"
    classes = trainer.schema.classes

    result = infer(trainer.model, paths + [str(broken)], classes, tiny_config, str(out_dir), threshold=1.1)
    assert list(result.errors) == ["broken.png"]
    assert all(len(d) == 0 for d in result.detections.values())
    original = np.asarray(Image.open(paths[0]).convert("RGB"))
    overlay = np.asarray(Image.open(out_dir / os.path.basename(paths[0])).convert("RGB"))
    assert np.array_equal(original, overlay)

    result = infer(trainer.model, paths, classes, tiny_config, str(out_dir), threshold=0.0)
    with open(out_dir / "detections.json") as f:
        data = json.load(f)
    # num_queries x classi coppie (query, classe)
    assert [len(image["detections"]) for image in data["images"]] == [30] * len(paths)
    assert data["legend"]["ground_truth"] == "#000000"
    first = data["images"][0]["detections"][0]
    assert 0 <= first["box"][0] <= first["box"][2] <= 256


def test_legend_colors():
    entries = legend(["BAS", "EOS", "LYM", "MON", "NEU"])
    assert entries["LYM"] == "#00aa00"
    assert entries["NEU"] == "#ff8c00"
    assert entries["EOS"] == "#800080"
    assert entries["BAS"] == "#005aff"
    assert entries["MON"] == "#ffd700"
    assert entries["ground_truth"] == "#000000"
    assert len(legend(["BLUE", "GREEN", "RED"])) == 4


def test_load_split_uses_configured_paths(tiny_config):
    trainer = Trainer(tiny_config)
    assert len(load_split(tiny_config, trainer.schema, "test").images) == 4


# --- riga di comando --------------------------------------------------------------------------------------------


def test_cli_make_synth_and_convert(tmp_path):
    out = tmp_path / "synth"
    assert main(["make-synth", "--seed", "1", "--n", "2", "--out", str(out)]) == 0
    assert len(os.listdir(out / "images")) == 2

    labelme_dir = tmp_path / "labelme"
    labelme_dir.mkdir()
    with open(labelme_dir / "a.json", "w") as f:
        json.dump({"imageWidth": 50, "imageHeight": 50, "shapes": [
            {"label": "NEU", "shape_type": "rectangle", "points": [[1, 1], [20, 20]]},
            {"label": "???", "shape_type": "rectangle", "points": [[1, 1], [20, 20]]},
        ]}, f)
    coco_path = tmp_path / "converted" / "annotations.json"
    assert main(["convert-labelme", "--in", str(labelme_dir), "--out", str(coco_path)]) == 0
    with open(coco_path) as f:
        assert len(json.load(f)["annotations"]) == 1
    with open(tmp_path / "converted" / "annotations.rejects.json") as f:
        assert len(json.load(f)) == 1


def test_cli_train_eval_and_errors(tiny_config, tmp_path):
    config_path = tmp_path / "run.yaml"
    save_config(tiny_config, str(config_path))
    assert main(["train", "--config", str(config_path)]) == 0
    checkpoint = os.path.join(tiny_config.train.output_dir, "checkpoints", "last.pt")
    assert os.path.exists(checkpoint)

    assert main(["eval", "--config", str(config_path), "--ckpt", checkpoint]) == 0
    with open(os.path.join(tiny_config.train.output_dir, "reports", "eval_test.json")) as f:
        assert {"ap", "ap50", "ap75", "per_class"} <= set(json.load(f))

    # checkpoint addestrato con un numero diverso di query
    assert main(["eval", "--config", str(config_path), "--ckpt", checkpoint, "--set", "model.num_queries=5"]) == 2
    # checkpoint con un decoder più profondo del modello configurato
    assert main(["eval", "--config", str(config_path), "--ckpt", checkpoint, "--set", "dec.layers=1"]) == 2
    assert main(["eval", "--config", str(config_path), "--ckpt", str(tmp_path / "missing.pt")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["train", "--config", str(config_path), "--set", "fpn.variant=bifpn"]) == 2
