from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from domain.errors import DimensionError, ValidationError

# Dimensione minima dell'immagine: con stride 64 ogni livello resta non vuoto
MIN_IMAGE_SIZE = 64
LEVEL_STRIDES: Tuple[int, ...] = (8, 16, 32, 64)


@dataclass
class ImageBatch:
    """Batch di immagini normalizzate con maschera di padding (True = padding)"""
    pixels: Tensor  # [B, 3, H, W]
    mask: Tensor  # [B, H, W]

    def validate(self) -> None:
        """Verifica forma, finitezza e coerenza della maschera"""
        if self.pixels.dim() != 4 or self.pixels.shape[1] != 3:
            raise ValidationError(f"pixels deve avere forma [B, 3, H, W], ricevuto {tuple(self.pixels.shape)}")
        b, _, h, w = self.pixels.shape
        if tuple(self.mask.shape) != (b, h, w):
            raise ValidationError(
                f"maschera {tuple(self.mask.shape)} incoerente con i pixel {tuple(self.pixels.shape)}")
        if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
            raise DimensionError(f"immagine {h}x{w} più piccola del minimo {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")
        if not torch.isfinite(self.pixels).all():
            raise ValidationError("pixel non finiti nell'immagine di input")


@dataclass
class BackboneOutput:
    """Gerarchia di feature a 4 livelli (stride 8, 16, 32, 64)"""
    levels: List[Tensor]
    masks: List[Tensor]
    strides: Tuple[int, ...] = LEVEL_STRIDES


@dataclass
class FusedPyramid:
    """Piramide fusa: 4 livelli a 256 canali"""
    levels: List[Tensor]
    masks: List[Tensor]
    strides: Tuple[int, ...] = LEVEL_STRIDES

    @property
    def spatial_shapes(self) -> List[Tuple[int, int]]:
        return [(int(f.shape[-2]), int(f.shape[-1])) for f in self.levels]


@dataclass
class BoxSet:
    """Target di una immagine: etichette e box normalizzati (cx, cy, w, h)"""
    labels: Tensor  # [G] int64
    boxes: Tensor  # [G, 4] in [0, 1]
    image_id: int = -1
    orig_size: Tuple[int, int] = (0, 0)  # (H, W) prima del resize

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def to(self, device: torch.device) -> "BoxSet":
        return BoxSet(self.labels.to(device), self.boxes.to(device), self.image_id, self.orig_size)


@dataclass
class AnnotatedImage:
    """Immagine annotata: box assoluti in pixel (x1, y1, x2, y2)"""
    image_id: int
    file_name: str
    width: int
    height: int
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.float64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int64))

    def validate(self, num_classes: int) -> None:
        """Verifica che ogni box sia dentro l'immagine e con classe valida"""
        b = self.boxes
        if b.size and not (
            (b[:, 0] >= 0).all() and (b[:, 1] >= 0).all()
            and (b[:, 0] < b[:, 2]).all() and (b[:, 1] < b[:, 3]).all()
            and (b[:, 2] <= self.width).all() and (b[:, 3] <= self.height).all()
        ):
            raise ValidationError(f"box fuori immagine o degeneri nell'immagine {self.image_id}")
        if self.labels.size and not ((self.labels >= 0).all() and (self.labels < num_classes).all()):
            raise ValidationError(f"classe fuori schema nell'immagine {self.image_id}")


@dataclass
class DecoderOutput:
    """Uscite per strato del decoder: logit [N, B, Q, C] e box [N, B, Q, 4]"""
    class_logits: Tensor
    boxes: Tensor

    @property
    def num_layers(self) -> int:
        return int(self.class_logits.shape[0])

    def layer(self, index: int) -> Tuple[Tensor, Tensor]:
        return self.class_logits[index], self.boxes[index]

    def last(self) -> Tuple[Tensor, Tensor]:
        return self.layer(-1)


@dataclass
class MatchResult:
    """Assegnazione iniettiva ground truth -> query con costo totale"""
    query_indices: Tensor  # [G] int64
    gt_indices: Tensor  # [G] int64
    cost: float

    def __len__(self) -> int:
        return int(self.gt_indices.shape[0])


@dataclass
class LayerLoss:
    """Componenti di loss (non pesate) di un singolo strato del decoder"""
    class_loss: Tensor
    l1_loss: Tensor
    giou_loss: Tensor


@dataclass
class LossBreakdown:
    """Loss congiunta: somma sugli strati di classe + regressione"""
    layers: List[LayerLoss]
    weights: Dict[str, float]
    total: Tensor

    def as_dict(self) -> Dict[str, float]:
        """Valori scalari per il log (suffisso _i = strato i, l'ultimo senza suffisso)"""
        out: Dict[str, float] = {"total": float(self.total.detach())}
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            suffix = "" if i == last else f"_{i}"
            out[f"class_loss{suffix}"] = float(layer.class_loss.detach())
            out[f"l1_loss{suffix}"] = float(layer.l1_loss.detach())
            out[f"giou_loss{suffix}"] = float(layer.giou_loss.detach())
        return out


@dataclass
class Detection:
    """Rilevamento finale in coordinate pixel (x1, y1, x2, y2)"""
    image_id: int
    class_id: int
    box: Tuple[float, float, float, float]
    confidence: float

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "class_id": self.class_id,
            "box": [float(v) for v in self.box],
            "confidence": float(self.confidence),
        }


@dataclass
class DatasetSchema:
    """Schema di un dataset: nome, classi ordinate e split"""
    name: str
    classes: List[str]
    splits: Dict[str, List[int]] = field(default_factory=dict)
    # Conteggi attesi per classe (solo per i dataset reali)
    expected_counts: Dict[str, int] = field(default_factory=dict)
    expected_split_sizes: Dict[str, int] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_id(self, label: str) -> Optional[int]:
        """Restituisce l'indice della classe (confronto case-insensitive)"""
        lookup = {c.lower(): i for i, c in enumerate(self.classes)}
        return lookup.get(label.strip().lower())


def load_schema_from_yaml(path: str) -> DatasetSchema:
    """Carica uno schema personalizzato da un file YAML"""
    import yaml

    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}

    return DatasetSchema(
        name=data.get("name", "custom"),
        classes=sorted(data.get("classes", [])),
        splits={k: list(v) for k, v in (data.get("splits") or {}).items()},
        expected_counts=dict(data.get("expected_counts") or {}),
        expected_split_sizes=dict(data.get("expected_split_sizes") or {}),
    )


def save_schema_to_yaml(schema: DatasetSchema, path: str) -> None:
    """Salva uno schema in un file YAML"""
    import yaml

    data = {
        "name": schema.name,
        "classes": list(schema.classes),
        "splits": {k: list(v) for k, v in schema.splits.items()},
        "expected_counts": dict(schema.expected_counts),
        "expected_split_sizes": dict(schema.expected_split_sizes),
    }

    with open(path, "w") as f:
        yaml.safe_dump(data, f, allow_unicode=True)


def box_xyxy_to_cxcywh(boxes: Sequence[Sequence[float]], width: float, height: float) -> np.ndarray:
    """Converte box assoluti xyxy in box normalizzati (cx, cy, w, h)"""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (b[:, 0] + b[:, 2]) / 2.0 / width
    cy = (b[:, 1] + b[:, 3]) / 2.0 / height
    w = (b[:, 2] - b[:, 0]) / width
    h = (b[:, 3] - b[:, 1]) / height
    return np.stack([cx, cy, w, h], axis=1)


def box_cxcywh_to_xyxy(boxes: Sequence[Sequence[float]], width: float, height: float) -> np.ndarray:
    """Converte box normalizzati (cx, cy, w, h) in box assoluti xyxy"""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1 = (b[:, 0] - b[:, 2] / 2.0) * width
    y1 = (b[:, 1] - b[:, 3] / 2.0) * height
    x2 = (b[:, 0] + b[:, 2] / 2.0) * width
    y2 = (b[:, 1] + b[:, 3] / 2.0) * height
    return np.stack([x1, y1, x2, y2], axis=1)
