import glob
import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from domain.errors import DataLoadError
from domain.models import AnnotatedImage, DatasetSchema
from data_loader.coco_io import build_coco

logger = logging.getLogger("leukodet.data")

SUPPORTED_SHAPES = ("rectangle", "polygon")


@dataclass
class Reject:
    """Forma non convertita, riportata nel resoconto degli scarti"""
    file: str
    label: str
    reason: str


def shape_to_box(points: Sequence[Sequence[float]]) -> Tuple[float, float, float, float]:
    """Box allineato agli assi che racchiude i punti (rettangolo o poligono)"""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    return float(x1), float(y1), float(x2), float(y2)


def _read_labelme(path: str) -> dict:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataLoadError(f"annotazione LabelMe illeggibile: {e}", item_id=path) from e


def convert_labelme(directory: str, schema: DatasetSchema) -> Tuple[dict, List[Reject]]:
    """Converte una cartella di annotazioni LabelMe nel formato COCO

    Args:
        directory: Cartella con un file JSON per immagine
        schema: Schema delle classi (etichette confrontate senza distinzione di maiuscole)

    Returns:
        Coppia (dizionario COCO, lista degli scarti)
    """
    files = sorted(glob.glob(os.path.join(directory, "*.json")))
    if not files:
        raise DataLoadError("nessun file JSON trovato", item_id=directory)

    images: List[AnnotatedImage] = []
    rejects: List[Reject] = []
    for image_id, path in enumerate(files, start=1):
        data = _read_labelme(path)
        name = os.path.basename(path)
        width, height = int(data["imageWidth"]), int(data["imageHeight"])
        boxes, labels = [], []
        for shape in data.get("shapes", []):
            label = str(shape.get("label", ""))
            shape_type = shape.get("shape_type") or "polygon"
            class_id = schema.class_id(label)
            if class_id is None:
                rejects.append(Reject(name, label, "etichetta sconosciuta"))
                continue
            if shape_type not in SUPPORTED_SHAPES:
                rejects.append(Reject(name, label, f"forma '{shape_type}' non supportata"))
                continue
            x1, y1, x2, y2 = shape_to_box(shape["points"])
            x1, y1 = max(x1, 0.0), max(y1, 0.0)
            x2, y2 = min(x2, float(width)), min(y2, float(height))
            if x2 <= x1 or y2 <= y1:
                rejects.append(Reject(name, label, "box degenere"))
                continue
            boxes.append([x1, y1, x2, y2])
            labels.append(class_id)
        images.append(AnnotatedImage(
            image_id=image_id,
            file_name=data.get("imagePath") or os.path.splitext(name)[0] + ".png",
            width=width,
            height=height,
            boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
            labels=np.asarray(labels, dtype=np.int64),
        ))

    if rejects:
        logger.warning(f"{len(rejects)} forme scartate durante la conversione di {directory}")
    logger.info(f"Convertite {len(images)} annotazioni LabelMe")
    return build_coco(images, schema.classes, description=f"{schema.name} (LabelMe)"), rejects


def write_rejects(rejects: Sequence[Reject], path: str) -> None:
    with open(path, "w") as f:
        json.dump([asdict(r) for r in rejects], f, indent=2)
