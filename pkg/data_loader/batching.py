import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch import Tensor
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms import functional as TF

from domain.errors import DataLoadError, ValidationError
from domain.models import AnnotatedImage, BoxSet, ImageBatch, box_xyxy_to_cxcywh
from data_loader.coco_io import LoadedDataset

logger = logging.getLogger("leukodet.data")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class Sample:
    """Immagine pronta per il batch: pixel normalizzati e box in pixel dell'immagine trasformata"""
    pixels: Tensor  # [3, H, W]
    boxes: np.ndarray  # [G, 4] xyxy
    labels: np.ndarray  # [G]
    image_id: int
    orig_size: Tuple[int, int]  # (H, W) prima del resize

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.pixels.shape[-2]), int(self.pixels.shape[-1])


def read_image(path: str, item_id: Optional[object] = None) -> Image.Image:
    """Apre un'immagine come RGB"""
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, ValueError) as e:
        raise DataLoadError(f"immagine illeggibile {path}: {e}", item_id=path if item_id is None else item_id) from e


def normalize(image: Image.Image) -> Tensor:
    """Pixel RGB -> tensore [3, H, W] normalizzato con media e deviazione ImageNet"""
    return TF.normalize(TF.to_tensor(image), IMAGENET_MEAN, IMAGENET_STD)


def flip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    """Ribaltamento orizzontale di box xyxy in un'immagine larga width"""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    flipped = b.copy()
    flipped[:, 0] = width - b[:, 2]
    flipped[:, 2] = width - b[:, 0]
    return flipped


def hflip(image: Image.Image, boxes: np.ndarray) -> Tuple[Image.Image, np.ndarray]:
    """Ribaltamento orizzontale dell'immagine e dei box xyxy"""
    return image.transpose(Image.Transpose.FLIP_LEFT_RIGHT), flip_boxes(boxes, image.width)


def resize_shape(height: int, width: int, short_side: int = 480, max_size: int = 800) -> Tuple[int, int]:
    """Lato corto a short_side, lato lungo limitato a max_size (rapporto d'aspetto preservato)"""
    scale = short_side / min(height, width)
    if max(height, width) * scale > max_size:
        scale = max_size / max(height, width)
    return int(round(height * scale)), int(round(width * scale))


def resize(image: Image.Image, boxes: np.ndarray, size: Tuple[int, int]) -> Tuple[Image.Image, np.ndarray]:
    """Ridimensiona immagine e box alla dimensione (H, W)"""
    h, w = size
    sx, sy = w / image.width, h / image.height
    scaled = np.asarray(boxes, dtype=np.float64) * np.array([sx, sy, sx, sy])
    return image.resize((w, h), Image.Resampling.BILINEAR), scaled


class DetectionDataset(Dataset):
    """Dataset torch sopra un LoadedDataset, con resize e ribaltamento opzionali"""

    def __init__(self, loaded: LoadedDataset, train: bool = False, flip: bool = True,
                 resize_images: bool = False, short_side: int = 480, max_size: int = 800):
        self.loaded = loaded
        self.images: List[AnnotatedImage] = sorted(loaded.images, key=lambda im: im.image_id)
        self.train = train
        self.flip = flip and train
        self.resize_images = resize_images
        self.short_side = short_side
        self.max_size = max_size

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> Sample:
        record = self.images[index]
        image = read_image(self.loaded.image_path(record), item_id=record.image_id)
        if (image.height, image.width) != (record.height, record.width):
            logger.warning(
                f"[{record.image_id}] dimensioni del file {image.width}x{image.height} diverse dalle "
                f"annotazioni {record.width}x{record.height}")
        boxes = record.boxes.astype(np.float64)
        orig_size = (image.height, image.width)
        if self.resize_images:
            image, boxes = resize(image, boxes, resize_shape(image.height, image.width,
                                                             self.short_side, self.max_size))
        if self.flip and bool(torch.rand(()) < 0.5):
            image, boxes = hflip(image, boxes)
        return Sample(pixels=normalize(image), boxes=boxes, labels=record.labels.copy(),
                      image_id=record.image_id, orig_size=orig_size)


def batch(samples: Sequence[Sample]) -> Tuple[ImageBatch, List[BoxSet]]:
    """Riunisce le immagini in un batch con padding in basso a destra

    La forma comune è il massimo elemento per elemento delle forme; la maschera
    vale True sul padding. I box sono normalizzati in (cx, cy, w, h) rispetto alla
    dimensione reale (senza padding) di ciascuna immagine.
    """
    if not samples:
        raise ValidationError("batch vuoto")
    max_h = max(s.size[0] for s in samples)
    max_w = max(s.size[1] for s in samples)
    pixels = torch.zeros((len(samples), 3, max_h, max_w), dtype=torch.float32)
    mask = torch.ones((len(samples), max_h, max_w), dtype=torch.bool)
    targets: List[BoxSet] = []
    for i, sample in enumerate(samples):
        h, w = sample.size
        pixels[i, :, :h, :w] = sample.pixels
        mask[i, :h, :w] = False
        boxes = box_xyxy_to_cxcywh(sample.boxes, w, h) if len(sample.boxes) else np.zeros((0, 4))
        targets.append(BoxSet(
            labels=torch.as_tensor(sample.labels, dtype=torch.int64),
            boxes=torch.as_tensor(boxes, dtype=torch.float32),
            image_id=sample.image_id,
            orig_size=sample.orig_size,
        ))
    return ImageBatch(pixels=pixels, mask=mask), targets


def build_loader(dataset: DetectionDataset, batch_size: int, shuffle: bool, seed: int = 0,
                 num_workers: int = 0) -> DataLoader:
    """DataLoader con ordine riproducibile (generatore dedicato)"""
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, num_workers=num_workers,
                      collate_fn=batch, generator=generator, drop_last=False)
