import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from domain.errors import DataLoadError
from domain.models import AnnotatedImage, DatasetSchema

logger = logging.getLogger("leukodet.data")

ANNOTATION_COLUMNS = ["id", "image_id", "category_id", "x", "y", "w", "h"]


@dataclass
class LoadedDataset:
    """Dataset caricato da un file COCO con il resoconto degli scarti"""
    images: List[AnnotatedImage]
    classes: List[str]
    image_root: str = ""
    dropped_boxes: int = 0
    orphan_annotations: int = 0
    errors: List[DataLoadError] = field(default_factory=list)

    def image_path(self, image: AnnotatedImage) -> str:
        return os.path.join(self.image_root, image.file_name)

    def annotation_frame(self) -> pd.DataFrame:
        """Tabella delle annotazioni (una riga per box)"""
        rows = [
            {"image_id": img.image_id, "class": self.classes[int(label)],
             "x1": box[0], "y1": box[1], "x2": box[2], "y2": box[3]}
            for img in self.images for box, label in zip(img.boxes, img.labels)
        ]
        return pd.DataFrame(rows, columns=["image_id", "class", "x1", "y1", "x2", "y2"])

    def class_counts(self) -> Dict[str, int]:
        frame = self.annotation_frame()
        counts = frame["class"].value_counts().to_dict() if not frame.empty else {}
        return {c: int(counts.get(c, 0)) for c in self.classes}


def _read_json(path: str) -> dict:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except OSError as e:
        raise DataLoadError(f"impossibile leggere {path}: {e}", item_id=path) from e
    except json.JSONDecodeError as e:
        raise DataLoadError(f"JSON non valido: {e}", item_id=path) from e


def _category_map(categories: List[dict], schema: Optional[DatasetSchema], path: str) -> Dict[int, int]:
    """Mappa category_id COCO -> indice di classe"""
    if schema is None:
        ordered = sorted(categories, key=lambda c: c["id"])
        return {int(c["id"]): i for i, c in enumerate(ordered)}
    mapping = {}
    for c in categories:
        class_id = schema.class_id(str(c["name"]))
        if class_id is None:
            raise DataLoadError(f"categoria '{c['name']}' assente dallo schema {schema.name}", item_id=path)
        mapping[int(c["id"])] = class_id
    return mapping


def load_coco(path: str, image_root: Optional[str] = None, schema: Optional[DatasetSchema] = None,
              check_files: bool = True) -> LoadedDataset:
    """Carica un file di annotazioni in formato COCO

    I box degeneri (area nulla dopo il ritaglio all'immagine) e le annotazioni che
    rimandano a immagini non dichiarate vengono scartati e contati; le immagini
    senza file vengono registrate come errori per elemento.

    Args:
        path: File JSON delle annotazioni
        image_root: Cartella delle immagini (default: cartella 'images' accanto al JSON)
        schema: Schema delle classi; se None l'ordine è quello degli id di categoria
        check_files: Verifica l'esistenza dei file immagine

    Returns:
        LoadedDataset con immagini ordinate per image_id
    """
    data = _read_json(path)
    if not isinstance(data, dict) or "images" not in data or "annotations" not in data:
        raise DataLoadError("struttura COCO non valida (mancano 'images' o 'annotations')", item_id=path)
    if image_root is None:
        image_root = os.path.join(os.path.dirname(os.path.abspath(path)), "images")

    categories = data.get("categories", [])
    cat_map = _category_map(categories, schema, path)
    if schema is not None:
        classes = list(schema.classes)
    else:
        classes = [str(c["name"]) for c in sorted(categories, key=lambda c: c["id"])]

    records = [
        {"id": a.get("id", i), "image_id": a["image_id"], "category_id": a["category_id"],
         "x": a["bbox"][0], "y": a["bbox"][1], "w": a["bbox"][2], "h": a["bbox"][3]}
        for i, a in enumerate(data["annotations"])
    ]
    df = pd.DataFrame(records, columns=ANNOTATION_COLUMNS)
    df[["x", "y", "w", "h"]] = df[["x", "y", "w", "h"]].astype(np.float64)

    images_info = {int(im["id"]): im for im in data["images"]}
    sizes = pd.DataFrame(
        [{"image_id": k, "width": v["width"], "height": v["height"]} for k, v in images_info.items()],
        columns=["image_id", "width", "height"],
    )
    orphan = ~df["image_id"].isin(list(images_info))
    orphans = int(orphan.sum())
    if orphans:
        logger.warning(f"{orphans} annotazioni con image_id non dichiarato scartate da {path}: "
                       f"{sorted(df.loc[orphan, 'image_id'].unique().tolist())[:10]}")
    df = df[~orphan].merge(sizes, on="image_id", how="inner")
    df["x1"] = df["x"].clip(lower=0)
    df["y1"] = df["y"].clip(lower=0)
    df["x2"] = np.minimum(df["x"] + df["w"], df["width"])
    df["y2"] = np.minimum(df["y"] + df["h"], df["height"])

    unknown = ~df["category_id"].isin(list(cat_map))
    if unknown.any():
        raise DataLoadError(
            f"category_id non dichiarati: {sorted(df.loc[unknown, 'category_id'].unique().tolist())}", item_id=path)

    degenerate = (df["x2"] <= df["x1"]) | (df["y2"] <= df["y1"])
    dropped = int(degenerate.sum())
    if dropped:
        logger.warning(f"{dropped} box degeneri scartati da {path}")
    df = df[~degenerate].sort_values(["image_id", "id"], kind="stable")
    df["label"] = df["category_id"].map(cat_map)
    grouped = {k: g for k, g in df.groupby("image_id", sort=True)}

    images: List[AnnotatedImage] = []
    errors: List[DataLoadError] = []
    for image_id in sorted(images_info):
        info = images_info[image_id]
        if check_files and not os.path.exists(os.path.join(image_root, info["file_name"])):
            error = DataLoadError(f"file immagine mancante: {info['file_name']}", item_id=image_id)
            logger.error(str(error))
            errors.append(error)
            continue
        group = grouped.get(image_id)
        boxes = (group[["x1", "y1", "x2", "y2"]].to_numpy(dtype=np.float64)
                 if group is not None else np.zeros((0, 4), dtype=np.float64))
        labels = (group["label"].to_numpy(dtype=np.int64)
                  if group is not None else np.zeros((0,), dtype=np.int64))
        image = AnnotatedImage(
            image_id=image_id, file_name=info["file_name"],
            width=int(info["width"]), height=int(info["height"]),
            boxes=boxes, labels=labels,
        )
        image.validate(len(classes))
        images.append(image)

    logger.info(f"Caricate {len(images)} immagini e {len(df)} box da {path}")
    return LoadedDataset(images=images, classes=classes, image_root=image_root,
                         dropped_boxes=dropped, orphan_annotations=orphans, errors=errors)


def build_coco(images: Sequence[AnnotatedImage], classes: Sequence[str],
               description: str = "leukodet", date_created: Optional[str] = None) -> dict:
    """Costruisce il dizionario COCO (categorie con id 1..C nell'ordine dello schema)"""
    categories = [{"supercategory": "cell", "id": i + 1, "name": name} for i, name in enumerate(classes)]
    coco_images, annotations = [], []
    ann_id = 1
    for img in sorted(images, key=lambda im: im.image_id):
        coco_images.append({"id": img.image_id, "file_name": img.file_name,
                            "width": img.width, "height": img.height})
        for box, label in zip(img.boxes, img.labels):
            x1, y1, x2, y2 = (float(v) for v in box)
            annotations.append({
                "id": ann_id,
                "image_id": img.image_id,
                "category_id": int(label) + 1,
                "bbox": [x1, y1, x2 - x1, y2 - y1],
                "area": (x2 - x1) * (y2 - y1),
                "iscrowd": 0,
            })
            ann_id += 1
    if date_created is None:
        date_created = datetime.now().strftime("%Y/%m/%d")
    return {
        "info": {"description": description, "version": "1.0", "date_created": date_created},
        "licenses": [],
        "categories": categories,
        "images": coco_images,
        "annotations": annotations,
    }


def export_coco(images: Sequence[AnnotatedImage], classes: Sequence[str], path: str,
                description: str = "leukodet", date_created: Optional[str] = None) -> None:
    """Scrive le annotazioni in formato COCO"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(build_coco(images, classes, description, date_created), f, indent=2)
    logger.info(f"Esportate {len(images)} immagini in {path}")
