import json
import logging
import os

import numpy as np
import pytest
import torch
from PIL import Image

from data_loader.batching import (
    DetectionDataset, Sample, batch, build_loader, hflip, read_image, resize_shape,
)
from data_loader.coco_io import export_coco, load_coco
from data_loader.labelme import convert_labelme, shape_to_box, write_rejects
from data_loader.schemas import WBCDD, class_counts, compare_counts, get_schema
from data_loader.synthetic import FAMILIES, MARGIN, disc_pixels, make_synthetic
from domain.errors import ConfigurationError, DataLoadError, ValidationError
from domain.models import AnnotatedImage, DatasetSchema, box_cxcywh_to_xyxy, save_schema_to_yaml


def _write_image(path, width, height, value=128):
    Image.fromarray(np.full((height, width, 3), value, dtype=np.uint8)).save(path)


@pytest.fixture
def coco_dir(tmp_path):
    images = tmp_path / "images"
    images.mkdir()
    _write_image(images / "a.png", 100, 80)
    _write_image(images / "b.png", 60, 60)
    data = {
        "images": [
            {"id": 2, "file_name": "b.png", "width": 60, "height": 60},
            {"id": 1, "file_name": "a.png", "width": 100, "height": 80},
        ],
        "categories": [{"id": 7, "name": "NEU"}, {"id": 3, "name": "LYM"}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 7, "bbox": [10, 10, 20, 30]},
            {"id": 2, "image_id": 1, "category_id": 3, "bbox": [90, 70, 20, 20]},
            {"id": 3, "image_id": 1, "category_id": 3, "bbox": [40, 40, 0, 10]},
            {"id": 4, "image_id": 2, "category_id": 3, "bbox": [5, 5, 10, 10]},
        ],
    }
    with open(tmp_path / "annotations.json", "w") as f:
        json.dump(data, f)
    return tmp_path


def _labelme(directory, name, shapes, width=300, height=300):
    with open(os.path.join(directory, name), "w") as f:
        json.dump({"imageWidth": width, "imageHeight": height, "imagePath": name.replace(".json", ".png"),
                   "shapes": shapes}, f)


# --- COCO -------------------------------------------------------------------------------------------------------


def test_load_coco_maps_classes_and_clips(coco_dir):
    loaded = load_coco(str(coco_dir / "annotations.json"), schema=WBCDD)
    assert [img.image_id for img in loaded.images] == [1, 2]
    first = loaded.images[0]
    assert first.labels.tolist() == [4, 2]
    assert first.boxes.tolist() == [[10, 10, 30, 40], [90, 70, 100, 80]]
    assert loaded.image_root == str(coco_dir / "images")
    assert loaded.class_counts() == {"BAS": 0, "EOS": 0, "LYM": 2, "MON": 0, "NEU": 1}


def test_degenerate_boxes_are_dropped(coco_dir):
    loaded = load_coco(str(coco_dir / "annotations.json"), schema=WBCDD)
    assert loaded.dropped_boxes == 1
    assert sum(len(img.boxes) for img in loaded.images) == 3


def test_annotations_of_undeclared_images_are_counted(coco_dir, caplog):
    with open(coco_dir / "annotations.json") as f:
        data = json.load(f)
    data["annotations"].append({"id": 5, "image_id": 9, "category_id": 7, "bbox": [1, 1, 10, 10]})
    with open(coco_dir / "annotations.json", "w") as f:
        json.dump(data, f)
    with caplog.at_level(logging.WARNING, logger="leukodet.data"):
        loaded = load_coco(str(coco_dir / "annotations.json"), schema=WBCDD)
    assert loaded.orphan_annotations == 1
    assert loaded.dropped_boxes == 1
    assert sum(len(img.boxes) for img in loaded.images) == 3
    assert any("image_id" in r.getMessage() and "[9]" in r.getMessage() for r in caplog.records)


def test_annotated_image_validation():
    image = AnnotatedImage(image_id=1, file_name="a.png", width=50, height=40,
                           boxes=np.array([[0.0, 0.0, 50.0, 40.0]]), labels=np.array([2]))
    image.validate(3)
    with pytest.raises(ValidationError):
        image.validate(2)
    image.boxes = np.array([[10.0, 0.0, 60.0, 40.0]])
    with pytest.raises(ValidationError):
        image.validate(3)


def test_class_order_without_schema(coco_dir):
    loaded = load_coco(str(coco_dir / "annotations.json"))
    assert loaded.classes == ["LYM", "NEU"]
    assert loaded.images[0].labels.tolist() == [1, 0]


def test_missing_image_file_is_reported(coco_dir):
    os.remove(coco_dir / "images" / "b.png")
    loaded = load_coco(str(coco_dir / "annotations.json"), schema=WBCDD)
    assert [img.image_id for img in loaded.images] == [1]
    assert len(loaded.errors) == 1
    assert loaded.errors[0].item_id == 2


def test_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{\"images\": [")
    with pytest.raises(DataLoadError):
        load_coco(str(path))
    path.write_text("[]")
    with pytest.raises(DataLoadError):
        load_coco(str(path))
    with pytest.raises(DataLoadError):
        load_coco(str(tmp_path / "missing.json"))


def test_unknown_category(coco_dir):
    with pytest.raises(DataLoadError):
        load_coco(str(coco_dir / "annotations.json"), schema=get_schema("bccd"))

    with open(coco_dir / "annotations.json") as f:
        data = json.load(f)
    data["annotations"][0]["category_id"] = 99
    with open(coco_dir / "annotations.json", "w") as f:
        json.dump(data, f)
    with pytest.raises(DataLoadError):
        load_coco(str(coco_dir / "annotations.json"), schema=WBCDD)


def test_export_and_reload(coco_dir, tmp_path):
    loaded = load_coco(str(coco_dir / "annotations.json"), schema=WBCDD)
    out = tmp_path / "export" / "annotations.json"
    export_coco(loaded.images, loaded.classes, str(out))
    reloaded = load_coco(str(out), image_root=loaded.image_root, schema=WBCDD)
    for a, b in zip(loaded.images, reloaded.images):
        assert a.image_id == b.image_id
        assert np.array_equal(a.boxes, b.boxes)
        assert np.array_equal(a.labels, b.labels)
    with open(out) as f:
        data = json.load(f)
    assert [c["name"] for c in data["categories"]] == WBCDD.classes


# --- LabelMe ----------------------------------------------------------------------------------------------------


def test_labelme_rectangle_and_polygon(tmp_path):
    _labelme(tmp_path, "img1.json", [
        {"label": "NEU", "shape_type": "rectangle", "points": [[110, 220], [10, 20]]},
        {"label": "lym", "shape_type": "polygon", "points": [[0, 0], [50, 10], [20, 40]]},
    ])
    coco, rejects = convert_labelme(str(tmp_path), WBCDD)
    assert rejects == []
    assert [a["bbox"] for a in coco["annotations"]] == [[10, 20, 100, 200], [0, 0, 50, 40]]
    names = {c["id"]: c["name"] for c in coco["categories"]}
    assert [names[a["category_id"]] for a in coco["annotations"]] == ["NEU", "LYM"]
    assert coco["images"][0]["file_name"] == "img1.png"


def test_labelme_rejects(tmp_path):
    _labelme(tmp_path, "img1.json", [
        {"label": "platelet", "shape_type": "rectangle", "points": [[0, 0], [5, 5]]},
        {"label": "MON", "shape_type": "circle", "points": [[50, 50], [60, 60]]},
        {"label": "EOS", "shape_type": "rectangle", "points": [[10, 10], [10, 30]]},
        {"label": "BAS", "shape_type": "rectangle", "points": [[10, 10], [30, 30]]},
    ])
    coco, rejects = convert_labelme(str(tmp_path), WBCDD)
    assert len(coco["annotations"]) == 1
    assert [r.label for r in rejects] == ["platelet", "MON", "EOS"]
    report = tmp_path / "rejects.json"
    write_rejects(rejects, str(report))
    with open(report) as f:
        assert [r["file"] for r in json.load(f)] == ["img1.json"] * 3


def test_labelme_empty_directory(tmp_path):
    with pytest.raises(DataLoadError):
        convert_labelme(str(tmp_path), WBCDD)


def test_shape_to_box():
    assert shape_to_box([[5, 9], [1, 2], [3, 7]]) == (1.0, 2.0, 5.0, 9.0)


# --- dataset sintetico ------------------------------------------------------------------------------------------


def test_synthetic_is_deterministic(tmp_path):
    make_synthetic(str(tmp_path / "a"), seed=5, n_images=3)
    make_synthetic(str(tmp_path / "b"), seed=5, n_images=3)
    for name in ["annotations.json"] + [f"images/synth_{i:04d}.png" for i in range(3)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synthetic_seeds_differ(tmp_path):
    make_synthetic(str(tmp_path / "a"), seed=1, n_images=1)
    make_synthetic(str(tmp_path / "b"), seed=2, n_images=1)
    name = "images/synth_0000.png"
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()


def test_synthetic_boxes_are_tight(tmp_path):
    images = make_synthetic(str(tmp_path), seed=3, n_images=20)
    assert len(images) == 20
    loaded = load_coco(str(tmp_path / "annotations.json"), schema=get_schema("synthetic"))
    assert len(loaded.images) == 20
    for record in loaded.images:
        assert 1 <= len(record.boxes) <= 3
        pixels = np.asarray(Image.open(loaded.image_path(record)).convert("RGB"))
        assert pixels.shape == (256, 256, 3)
        for box, label in zip(record.boxes.astype(int), record.labels):
            x1, y1, x2, y2 = box
            region = (max(x1 - 1, 0), max(y1 - 1, 0), min(x2 + 1, 256), min(y2 + 1, 256))
            mask = disc_pixels(pixels, FAMILIES[label].color, region=region)
            ys, xs = np.nonzero(mask)
            assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (x1, y1, x2, y2)
            radius = (x2 - x1 - 1) // 2
            assert FAMILIES[label].radius[0] <= radius <= FAMILIES[label].radius[1]


def test_synthetic_boxes_do_not_overlap(tmp_path):
    images = make_synthetic(str(tmp_path), seed=4, n_images=20)
    for record in images:
        boxes = record.boxes
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                separated = (a[2] + MARGIN <= b[0] or b[2] + MARGIN <= a[0]
                             or a[3] + MARGIN <= b[1] or b[3] + MARGIN <= a[1])
                assert separated


def test_synthetic_class_subset(tmp_path):
    make_synthetic(str(tmp_path), seed=0, n_images=5, classes=1)
    with open(tmp_path / "annotations.json") as f:
        data = json.load(f)
    assert [c["name"] for c in data["categories"]] == ["BLUE"]
    assert {a["category_id"] for a in data["annotations"]} == {1}


@pytest.mark.parametrize("classes", [0, 4])
def test_synthetic_rejects_class_count(tmp_path, classes):
    with pytest.raises(ConfigurationError):
        make_synthetic(str(tmp_path), classes=classes)


# --- batch e trasformazioni -------------------------------------------------------------------------------------


def _sample(h, w, boxes=(), labels=()):
    return Sample(pixels=torch.randn(3, h, w), boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                  labels=np.asarray(labels, dtype=np.int64), image_id=0, orig_size=(h, w))


def test_batch_pads_to_common_shape():
    images, targets = batch([_sample(300, 200, [[0, 0, 200, 300]], [1]), _sample(250, 300)])
    assert images.pixels.shape == (2, 3, 300, 300)
    assert not images.mask[0, :, :200].any() and images.mask[0, :, 200:].all()
    assert not images.mask[1, :250].any() and images.mask[1, 250:].all()
    assert torch.equal(images.pixels[0, :, :, 200:], torch.zeros(3, 300, 100))
    assert torch.allclose(targets[0].boxes, torch.tensor([[0.5, 0.5, 1.0, 1.0]]))
    assert targets[0].labels.tolist() == [1]
    assert targets[1].boxes.shape == (0, 4)


def test_single_image_batch_has_empty_mask():
    images, _ = batch([_sample(64, 80)])
    assert images.pixels.shape == (1, 3, 64, 80)
    assert not images.mask.any()


def test_empty_batch():
    with pytest.raises(ValidationError):
        batch([])


def test_normalized_boxes_map_back_to_pixels(synthetic_dir):
    loaded = load_coco(str(synthetic_dir / "annotations.json"), schema=get_schema("synthetic"))
    dataset = DetectionDataset(loaded, resize_images=True, short_side=200, max_size=300)
    for index, record in enumerate(dataset.images):
        sample = dataset[index]
        assert sample.size == (200, 200)
        _, targets = batch([sample])
        h, w = sample.orig_size
        restored = box_cxcywh_to_xyxy(targets[0].boxes.numpy(), w, h)
        assert np.abs(restored - record.boxes).max() <= 0.5


def test_hflip_twice_is_identity():
    pixels = np.random.default_rng(0).integers(0, 256, (40, 60, 3), dtype=np.uint8)
    image = Image.fromarray(pixels)
    boxes = np.array([[5.0, 6.0, 20.0, 30.0], [0.0, 0.0, 60.0, 40.0]])
    once_image, once_boxes = hflip(image, boxes)
    assert once_boxes.tolist() == [[40.0, 6.0, 55.0, 30.0], [0.0, 0.0, 60.0, 40.0]]
    twice_image, twice_boxes = hflip(once_image, once_boxes)
    assert np.array_equal(np.asarray(twice_image), pixels)
    assert np.array_equal(twice_boxes, boxes)


def test_resize_shape():
    assert resize_shape(600, 800) == (480, 640)
    assert resize_shape(400, 1600) == (200, 800)
    assert resize_shape(480, 640) == (480, 640)


def test_dataset_items(synthetic_dir):
    loaded = load_coco(str(synthetic_dir / "annotations.json"), schema=get_schema("synthetic"))
    dataset = DetectionDataset(loaded)
    assert len(dataset) == 4
    sample = dataset[0]
    assert sample.pixels.shape == (3, 256, 256)
    assert sample.orig_size == (256, 256)
    assert sample.image_id == 1
    assert np.array_equal(sample.boxes, loaded.images[0].boxes)


def test_loader_order_is_reproducible(synthetic_dir):
    loaded = load_coco(str(synthetic_dir / "annotations.json"), schema=get_schema("synthetic"))
    dataset = DetectionDataset(loaded)

    def order(seed):
        return [t.image_id for _, targets in build_loader(dataset, 2, shuffle=True, seed=seed) for t in targets]

    assert order(3) == order(3)
    assert sorted(order(3)) == [1, 2, 3, 4]


def test_unreadable_image(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"not an image")
    with pytest.raises(DataLoadError):
        read_image(str(path))


# --- schemi -----------------------------------------------------------------------------------------------------


def test_builtin_schemas():
    assert get_schema("wbcdd").classes == ["BAS", "EOS", "LYM", "MON", "NEU"]
    assert get_schema("BCCD").classes == ["Platelets", "RBC", "WBC"]
    assert get_schema("synthetic").num_classes == 3
    assert WBCDD.class_id(" neu ") == 4
    assert WBCDD.class_id("platelet") is None
    with pytest.raises(ConfigurationError):
        get_schema("kaggle")
    with pytest.raises(ConfigurationError):
        get_schema("custom")


def test_custom_schema_from_yaml(tmp_path):
    path = tmp_path / "schema.yaml"
    save_schema_to_yaml(DatasetSchema(name="mine", classes=["b", "a"]), str(path))
    schema = get_schema("custom", str(path))
    assert schema.name == "mine"
    assert schema.classes == ["a", "b"]


def test_count_comparison():
    counts = class_counts(WBCDD, [4, 4, 2])
    assert counts == {"BAS": 0, "EOS": 0, "LYM": 1, "MON": 0, "NEU": 2}
    assert compare_counts(WBCDD, {**WBCDD.expected_counts, "NEU": 1000}) == {"NEU": -8}


@pytest.mark.external_data
@pytest.mark.parametrize("name", ["wbcdd", "lisc", "bccd"])
def test_real_dataset_counts(name):
    schema = get_schema(name)
    root = os.path.join(os.environ["LEUKODET_DATA"], name)
    if not os.path.isdir(root):
        pytest.skip(f"{name} non presente")
    totals = {c: 0 for c in schema.classes}
    for split, expected in schema.expected_split_sizes.items():
        loaded = load_coco(os.path.join(root, split, "annotations.json"), schema=schema)
        assert len(loaded.images) == expected
        for c, n in loaded.class_counts().items():
            totals[c] += n
    assert compare_counts(schema, totals) == {}
