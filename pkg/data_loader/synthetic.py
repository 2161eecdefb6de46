import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from domain.errors import ConfigurationError
from domain.models import AnnotatedImage
from data_loader.coco_io import export_coco
from data_loader.schemas import SYNTHETIC

logger = logging.getLogger("leukodet.data")

IMAGE_SIZE = 256
BACKGROUND = (235, 225, 230)
NOISE = 8
MARGIN = 2
MAX_ATTEMPTS = 200


@dataclass(frozen=True)
class DiscFamily:
    """Famiglia di dischi: colore e intervallo di raggi (estremi inclusi)"""
    name: str
    color: Tuple[int, int, int]
    radius: Tuple[int, int]


# Stesso ordine (alfabetico) delle classi dello schema sintetico
FAMILIES: List[DiscFamily] = [
    DiscFamily("BLUE", (50, 60, 200), (26, 32)),
    DiscFamily("GREEN", (40, 170, 60), (18, 24)),
    DiscFamily("RED", (200, 40, 40), (10, 16)),
]


def disc_box(cx: int, cy: int, r: int) -> Tuple[int, int, int, int]:
    """Box in pixel (estremo destro escluso) dei pixel con (x-cx)^2 + (y-cy)^2 <= r^2"""
    return cx - r, cy - r, cx + r + 1, cy + r + 1


def _overlaps(box: Tuple[int, int, int, int], placed: List[Tuple[int, int, int, int]]) -> bool:
    x1, y1, x2, y2 = box
    return any(
        x1 < px2 + MARGIN and px1 < x2 + MARGIN and y1 < py2 + MARGIN and py1 < y2 + MARGIN
        for px1, py1, px2, py2 in placed
    )


def render_image(rng: np.random.Generator, families: List[DiscFamily],
                 size: int = IMAGE_SIZE) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disegna da 1 a 3 dischi non sovrapposti su sfondo rumoroso

    Returns:
        Tripla (pixel uint8 [H, W, 3], box xyxy [G, 4], etichette [G])
    """
    pixels = np.empty((size, size, 3), dtype=np.int16)
    pixels[:] = BACKGROUND
    pixels += rng.integers(-NOISE, NOISE + 1, size=pixels.shape, dtype=np.int16)
    yy, xx = np.mgrid[0:size, 0:size]

    boxes: List[Tuple[int, int, int, int]] = []
    labels: List[int] = []
    n_discs = int(rng.integers(1, 4))
    for _ in range(n_discs):
        label = int(rng.integers(0, len(families)))
        family = families[label]
        for _attempt in range(MAX_ATTEMPTS):
            r = int(rng.integers(family.radius[0], family.radius[1] + 1))
            cx = int(rng.integers(r, size - r - 1))
            cy = int(rng.integers(r, size - r - 1))
            box = disc_box(cx, cy, r)
            if not _overlaps(box, boxes):
                break
        else:
            # nessuna posizione libera: l'immagine resta con meno dischi
            continue
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        pixels[inside] = np.asarray(family.color, dtype=np.int16) + rng.integers(
            -NOISE, NOISE + 1, size=(int(inside.sum()), 3), dtype=np.int16)
        boxes.append(box)
        labels.append(label)

    return (
        np.clip(pixels, 0, 255).astype(np.uint8),
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(labels, dtype=np.int64),
    )


def make_synthetic(out_dir: str, seed: int = 0, n_images: int = 20, classes: int = 3,
                   annotations_name: str = "annotations.json") -> List[AnnotatedImage]:
    """Genera un dataset sintetico di dischi colorati in formato COCO

    Args:
        out_dir: Cartella di destinazione (immagini in out_dir/images)
        seed: Seme del generatore (stesso seme = stessi byte)
        n_images: Numero di immagini
        classes: Numero di classi (1-3)

    Returns:
        Le immagini annotate generate
    """
    if not 1 <= classes <= len(FAMILIES):
        raise ConfigurationError(f"classes deve essere tra 1 e {len(FAMILIES)}, ricevuto {classes}")
    if n_images < 1:
        raise ConfigurationError("n_images deve essere positivo")
    families = FAMILIES[:classes]
    rng = np.random.default_rng(seed)
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)

    images: List[AnnotatedImage] = []
    for i in range(n_images):
        pixels, boxes, labels = render_image(rng, families)
        file_name = f"synth_{i:04d}.png"
        Image.fromarray(pixels).save(os.path.join(image_dir, file_name))
        images.append(AnnotatedImage(image_id=i + 1, file_name=file_name, width=IMAGE_SIZE,
                                     height=IMAGE_SIZE, boxes=boxes, labels=labels))

    export_coco(images, SYNTHETIC.classes[:classes], os.path.join(out_dir, annotations_name),
                description=f"synthetic seed={seed}", date_created="")
    logger.info(f"Dataset sintetico creato in {out_dir}: {n_images} immagini, {classes} classi")
    return images


def disc_pixels(pixels: np.ndarray, color: Tuple[int, int, int], tolerance: int = 40,
                region: Optional[Tuple[int, int, int, int]] = None) -> np.ndarray:
    """Maschera dei pixel vicini al colore indicato (entro la regione, se data)"""
    close = (np.abs(pixels.astype(np.int16) - np.asarray(color, dtype=np.int16)) <= tolerance).all(-1)
    if region is not None:
        x1, y1, x2, y2 = region
        restricted = np.zeros_like(close)
        restricted[y1:y2, x1:x2] = close[y1:y2, x1:x2]
        close = restricted
    return close
