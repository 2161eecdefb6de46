import glob
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from data_loader.batching import (
    DetectionDataset, Sample, batch, build_loader, normalize, read_image, resize, resize_shape,
)
from data_loader.coco_io import LoadedDataset
from domain.config import RunConfig
from domain.errors import DataLoadError, ValidationError
from domain.models import AnnotatedImage, DatasetSchema, Detection, ImageBatch
from evaluation.metrics import EvaluationReport, average_precision, report_frame
from model.detector import postprocess

logger = logging.getLogger("leukodet.inference")

# Colori delle classi nelle sovrapposizioni; il ground truth è nero
CLASS_COLORS: Dict[str, Tuple[int, int, int]] = {
    "LYM": (0, 170, 0),
    "NEU": (255, 140, 0),
    "EOS": (128, 0, 128),
    "BAS": (0, 90, 255),
    "MON": (255, 215, 0),
}
GROUND_TRUTH_COLOR = (0, 0, 0)
FALLBACK_COLORS = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240)]
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def class_color(name: str, index: int) -> Tuple[int, int, int]:
    return CLASS_COLORS.get(name.upper(), FALLBACK_COLORS[index % len(FALLBACK_COLORS)])


def legend(class_names: Sequence[str]) -> Dict[str, str]:
    """Legenda nome classe -> colore esadecimale (più il ground truth)"""
    entries = {name: "#%02x%02x%02x" % class_color(name, i) for i, name in enumerate(class_names)}
    entries["ground_truth"] = "#%02x%02x%02x" % GROUND_TRUTH_COLOR
    return entries


@torch.no_grad()
def predict(model: torch.nn.Module, images: ImageBatch, image_ids: Sequence[int],
            sizes: Sequence[Tuple[int, int]], device: torch.device) -> List[List[Detection]]:
    model.eval()
    outputs = model(ImageBatch(images.pixels.to(device), images.mask.to(device)))
    return postprocess(outputs, image_ids, sizes)


def evaluate_model(model: torch.nn.Module, loaded: LoadedDataset, schema: DatasetSchema, config: RunConfig,
                   device: Optional[torch.device] = None) -> EvaluationReport:
    """Valuta il modello su un dataset annotato

    Args:
        model: Rilevatore
        loaded: Dataset di valutazione
        schema: Schema delle classi
        config: Configurazione (resize e batch size)
        device: Dispositivo di calcolo

    Returns:
        EvaluationReport con AP, AP50, AP75 e AP per classe
    """
    device = device or torch.device(config.train.device)
    data = config.data
    dataset = DetectionDataset(loaded, train=False, flip=False, resize_images=data.resize,
                               short_side=data.short_side, max_size=data.max_size)
    loader = build_loader(dataset, data.batch_size, shuffle=False, seed=config.train.seed,
                          num_workers=data.num_workers)
    detections: List[Detection] = []
    for images, targets in loader:
        results = predict(model, images, [t.image_id for t in targets], [t.orig_size for t in targets], device)
        for per_image in results:
            detections.extend(per_image)
    return average_precision(detections, dataset.images, schema.classes)


def write_report(report: EvaluationReport, report_dir: str, name: str = "eval") -> str:
    path = os.path.join(report_dir, f"{name}.json")
    report.save_json(path)
    frame = report_frame(report, name)
    frame.to_csv(os.path.join(report_dir, f"{name}.csv"))
    logger.info(f"Report di valutazione:\n{frame.to_string()}")
    return path


def draw_overlay(image: Image.Image, detections: Sequence[Detection], class_names: Sequence[str],
                 ground_truth: Optional[AnnotatedImage] = None) -> Image.Image:
    """Disegna i box predetti (colore per classe, con confidenza) e il ground truth in nero"""
    canvas = image.copy()
    draw = ImageDraw.Draw(canvas)
    if ground_truth is not None:
        for box in ground_truth.boxes:
            draw.rectangle([float(v) for v in box], outline=GROUND_TRUTH_COLOR, width=2)
    for det in detections:
        name = class_names[det.class_id]
        color = class_color(name, det.class_id)
        x1, y1, x2, y2 = det.box
        draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
        draw.text((x1 + 2, max(y1 - 12, 0)), f"{name} {det.confidence:.2f}", fill=color)
    return canvas


@dataclass
class InferenceResult:
    """Risultato di infer: rilevamenti per file ed errori per file"""
    detections: Dict[str, List[Detection]] = field(default_factory=dict)
    errors: Dict[str, str] = field(default_factory=dict)

    def to_dict(self, class_names: Sequence[str]) -> dict:
        return {
            "legend": legend(class_names),
            "classes": list(class_names),
            "images": [
                {"file": name, "detections": [d.to_dict() for d in dets]}
                for name, dets in self.detections.items()
            ],
            "errors": dict(self.errors),
        }


def list_images(directory: str) -> List[str]:
    files = [p for p in glob.glob(os.path.join(directory, "*")) if p.lower().endswith(IMAGE_EXTENSIONS)]
    return sorted(files)


def infer(model: torch.nn.Module, image_paths: Sequence[str], class_names: Sequence[str], config: RunConfig,
          out_dir: str, threshold: float, ground_truth: Optional[Dict[str, AnnotatedImage]] = None,
          device: Optional[torch.device] = None) -> InferenceResult:
    """Rileva le cellule su una lista di immagini e salva le sovrapposizioni

    Le immagini illeggibili vengono registrate come errore e saltate.

    Args:
        model: Rilevatore
        image_paths: File immagine
        class_names: Nomi delle classi
        config: Configurazione (resize)
        out_dir: Cartella delle sovrapposizioni e del JSON dei rilevamenti
        threshold: Soglia di confidenza
        ground_truth: Annotazioni opzionali per nome file (disegnate in nero)
        device: Dispositivo di calcolo

    Returns:
        InferenceResult con i rilevamenti sopra soglia
    """
    device = device or torch.device(config.train.device)
    os.makedirs(out_dir, exist_ok=True)
    result = InferenceResult()
    for image_id, path in enumerate(image_paths, start=1):
        name = os.path.basename(path)
        try:
            image = read_image(path, item_id=name)
            work = image
            if config.data.resize:
                size = resize_shape(image.height, image.width, config.data.short_side, config.data.max_size)
                work, _ = resize(image, np.zeros((0, 4)), size)
            sample = Sample(pixels=normalize(work), boxes=np.zeros((0, 4)), labels=np.zeros((0,), dtype=np.int64),
                            image_id=image_id, orig_size=(image.height, image.width))
            images, _ = batch([sample])
            dets = predict(model, images, [image_id], [sample.orig_size], device)[0]
        except (DataLoadError, ValidationError) as e:
            logger.error(f"[{name}] {e}")
            result.errors[name] = str(e)
            continue
        kept = [d for d in dets if d.confidence >= threshold]
        result.detections[name] = kept
        gt = ground_truth.get(name) if ground_truth else None
        overlay = draw_overlay(image, kept, class_names, gt)
        overlay.save(os.path.join(out_dir, os.path.splitext(name)[0] + ".png"))

    with open(os.path.join(out_dir, "detections.json"), "w") as f:
        json.dump(result.to_dict(class_names), f, indent=2)
    logger.info(f"Inferenza completata: {len(result.detections)} immagini, {len(result.errors)} errori")
    return result
