import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from domain.models import AnnotatedImage, Detection

logger = logging.getLogger("leukodet.evaluation")

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 100


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """IoU tra due box xyxy"""
    return float(box_iou(np.asarray([box_a], dtype=np.float64), np.asarray([box_b], dtype=np.float64))[0, 0])


def box_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU a coppie tra box xyxy: matrice [N, M]"""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _limit_per_image(dets: List[tuple], max_detections: int) -> List[tuple]:
    """Mantiene i migliori max_detections rilevamenti per immagine (tuple: indice, rilevamento)"""
    by_image: Dict[int, List[tuple]] = {}
    for item in dets:
        by_image.setdefault(item[1].image_id, []).append(item)
    kept = []
    for items in by_image.values():
        items.sort(key=lambda it: (-it[1].confidence, it[0]))
        kept.extend(items[:max_detections])
    return kept


def interpolated_precision(tp: np.ndarray, num_gt: int) -> np.ndarray:
    """Precisione interpolata sui 101 punti di recall"""
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    # inviluppo monotono da destra
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    index = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros_like(RECALL_POINTS)
    valid = index < len(precision)
    out[valid] = precision[index[valid]]
    return out


def class_ap(detections: Sequence[Detection], ground_truth: Mapping[int, np.ndarray], threshold: float,
             max_detections: int = MAX_DETECTIONS) -> float:
    """AP di una classe a una soglia IoU

    Args:
        detections: Rilevamenti della classe
        ground_truth: Box xyxy della classe per image_id
        threshold: Soglia IoU
        max_detections: Limite di rilevamenti per immagine

    Returns:
        AP interpolata a 101 punti (NaN se la classe non ha ground truth)
    """
    num_gt = int(sum(len(b) for b in ground_truth.values()))
    if num_gt == 0:
        return float("nan")
    items = _limit_per_image(list(enumerate(detections)), max_detections)
    # ordinamento stabile: confidenza decrescente, poi indice del rilevamento
    items.sort(key=lambda it: (-it[1].confidence, it[0]))
    if not items:
        return 0.0

    matched = {image_id: np.zeros(len(b), dtype=bool) for image_id, b in ground_truth.items()}
    tp = np.zeros(len(items), dtype=bool)
    for k, (_, det) in enumerate(items):
        gt_boxes = ground_truth.get(det.image_id)
        if gt_boxes is None or len(gt_boxes) == 0:
            continue
        ious = box_iou(np.asarray([det.box]), gt_boxes)[0]
        ious[matched[det.image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            tp[k] = True
            matched[det.image_id][best] = True
    return float(interpolated_precision(tp, num_gt).mean())


@dataclass
class EvaluationReport:
    """Metriche nelle colonne delle tabelle di confronto"""
    ap: float
    ap50: float
    ap75: float
    per_class: Dict[str, float] = field(default_factory=dict)
    per_class_ap50: Dict[str, float] = field(default_factory=dict)
    num_ground_truth: Dict[str, int] = field(default_factory=dict)
    num_detections: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def save_json(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def _ground_truth_by_class(images: Sequence[AnnotatedImage], num_classes: int) -> List[Dict[int, np.ndarray]]:
    per_class: List[Dict[int, np.ndarray]] = [{} for _ in range(num_classes)]
    for img in images:
        for c in range(num_classes):
            per_class[c][img.image_id] = np.asarray(img.boxes, dtype=np.float64).reshape(-1, 4)[img.labels == c]
    return per_class


def average_precision(detections: Sequence[Detection], ground_truth: Sequence[AnnotatedImage],
                      class_names: Sequence[str], iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
                      max_detections: int = MAX_DETECTIONS) -> EvaluationReport:
    """AP in stile COCO: media sulle soglie IoU e macro-media sulle classi con ground truth

    Args:
        detections: Rilevamenti in pixel su tutte le immagini
        ground_truth: Immagini annotate (box xyxy in pixel)
        class_names: Nomi delle classi in ordine di indice
        iou_thresholds: Soglie per AP (default 0.50:0.05:0.95)
        max_detections: Limite per immagine e per classe

    Returns:
        EvaluationReport con AP, AP50, AP75 e AP per classe
    """
    num_classes = len(class_names)
    gt_by_class = _ground_truth_by_class(ground_truth, num_classes)
    dets_by_class: List[List[Detection]] = [[] for _ in range(num_classes)]
    for det in detections:
        if 0 <= det.class_id < num_classes:
            dets_by_class[det.class_id].append(det)

    per_class: Dict[str, float] = {}
    per_class_50: Dict[str, float] = {}
    per_class_75: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for c, name in enumerate(class_names):
        counts[name] = int(sum(len(b) for b in gt_by_class[c].values()))
        if counts[name] == 0:
            logger.warning(f"Classe {name} senza ground truth: esclusa dalla media")
            continue
        aps = [class_ap(dets_by_class[c], gt_by_class[c], t, max_detections) for t in iou_thresholds]
        per_class[name] = float(np.mean(aps))
        per_class_50[name] = class_ap(dets_by_class[c], gt_by_class[c], 0.5, max_detections)
        per_class_75[name] = class_ap(dets_by_class[c], gt_by_class[c], 0.75, max_detections)

    def macro(values: Dict[str, float]) -> float:
        return float(np.mean(list(values.values()))) if values else 0.0

    return EvaluationReport(
        ap=macro(per_class),
        ap50=macro(per_class_50),
        ap75=macro(per_class_75),
        per_class=per_class,
        per_class_ap50=per_class_50,
        num_ground_truth=counts,
        num_detections=len(detections),
    )


def report_frame(report: EvaluationReport, name: Optional[str] = None) -> pd.DataFrame:
    """Tabella con una riga: AP per classe seguita da AP, AP50, AP75"""
    row = {k: round(100.0 * v, 1) for k, v in report.per_class.items()}
    row.update({"AP": round(100.0 * report.ap, 1), "AP50": round(100.0 * report.ap50, 1),
                "AP75": round(100.0 * report.ap75, 1)})
    return pd.DataFrame([row], index=[name or "modello"])
