import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor, nn

from domain.errors import ConfigurationError, ValidationError
from domain.models import BoxSet, DecoderOutput, LayerLoss, LossBreakdown, MatchResult

logger = logging.getLogger("leukodet.model")


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def _check_positive_size(boxes: Tensor) -> None:
    if boxes.numel() and not (boxes[..., 2:] > 0).all():
        raise ValidationError("box con larghezza o altezza non positiva")


def box_area(boxes: Tensor) -> Tensor:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def generalized_box_iou(boxes_a: Tensor, boxes_b: Tensor) -> Tensor:
    """GIoU a coppie tra box xyxy: matrice [N, M]"""
    area_a = box_area(boxes_a)
    area_b = box_area(boxes_b)
    lt = torch.max(boxes_a[:, None, :2], boxes_b[None, :, :2])
    rb = torch.min(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union

    lt = torch.min(boxes_a[:, None, :2], boxes_b[None, :, :2])
    rb = torch.max(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    enclosure = (rb - lt).clamp(min=0).prod(-1)
    return iou - (enclosure - union) / enclosure


def giou(box_a: Tensor, box_b: Tensor) -> Tensor:
    """GIoU elemento per elemento tra box (cx, cy, w, h)

    Args:
        box_a: Box [..., 4]
        box_b: Box [..., 4], stessa forma di box_a

    Returns:
        GIoU in [-1, 1] con la forma dei box senza l'ultima dimensione
    """
    box_a = torch.as_tensor(box_a, dtype=torch.float64) if not isinstance(box_a, Tensor) else box_a
    box_b = torch.as_tensor(box_b, dtype=box_a.dtype) if not isinstance(box_b, Tensor) else box_b
    _check_positive_size(box_a)
    _check_positive_size(box_b)
    a = box_cxcywh_to_xyxy(box_a).reshape(-1, 4)
    b = box_cxcywh_to_xyxy(box_b).reshape(-1, 4)
    lt = torch.max(a[:, :2], b[:, :2])
    rb = torch.min(a[:, 2:], b[:, 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = box_area(a) + box_area(b) - inter
    enclosure = (torch.max(a[:, 2:], b[:, 2:]) - torch.min(a[:, :2], b[:, :2])).prod(-1)
    value = inter / union - (enclosure - union) / enclosure
    return value.reshape(box_a.shape[:-1])


def focal_loss(logits: Tensor, targets: Tensor, alpha: Tensor, gamma: float = 2.0,
               background_weight: float = 1.0, num_boxes: float = 1.0) -> Tensor:
    """Focal loss sigmoide con peso alpha per classe sui positivi

    Il background è lo stato con tutti i target a zero; i negativi hanno peso
    background_weight.

    Args:
        logits: Logit [..., C]
        targets: Target one-hot [..., C] (stessa forma dei logit)
        alpha: Pesi per classe [C]
        gamma: Esponente di modulazione
        background_weight: Peso dei termini negativi
        num_boxes: Normalizzazione (numero di box abbinati)

    Returns:
        Scalare
    """
    num_classes = logits.shape[-1]
    if alpha.numel() != num_classes:
        raise ConfigurationError(f"alpha ha {alpha.numel()} valori, le classi sono {num_classes}")
    prob = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    weight = alpha.to(logits.dtype) * targets + background_weight * (1 - targets)
    loss = weight * ce * ((1 - p_t) ** gamma)
    return loss.sum() / num_boxes


def box_loss(pred: Tensor, gt: Tensor, giou_weight: float = 2.0, l1_weight: float = 5.0) -> Tensor:
    """Loss di regressione per coppie di box (cx, cy, w, h): λ_giou (1 - GIoU) + λ_l1 |pred - gt|_1"""
    l1 = (pred - gt).abs().sum(-1)
    return giou_weight * (1 - giou(pred, gt)) + l1_weight * l1


def hungarian_match(cost: Union[Tensor, np.ndarray]) -> MatchResult:
    """Assegnazione a costo minimo tra Q predizioni (righe) e G ground truth (colonne)

    Raises:
        ValidationError: Se G > Q o se la matrice contiene valori non finiti
    """
    c = cost.detach().cpu().numpy() if isinstance(cost, Tensor) else np.asarray(cost)
    if c.ndim != 2:
        raise ValidationError(f"matrice dei costi con forma {c.shape}, attesa [Q, G]")
    num_queries, num_gt = c.shape
    if num_gt > num_queries:
        raise ValidationError(f"{num_gt} ground truth ma solo {num_queries} query")
    if num_gt == 0:
        empty = torch.zeros(0, dtype=torch.int64)
        return MatchResult(query_indices=empty, gt_indices=empty.clone(), cost=0.0)
    if not np.isfinite(c).all():
        raise ValidationError("matrice dei costi con valori non finiti")
    row_ind, col_ind = linear_sum_assignment(c)
    order = np.argsort(col_ind)
    rows, cols = row_ind[order], col_ind[order]
    return MatchResult(
        query_indices=torch.as_tensor(rows, dtype=torch.int64),
        gt_indices=torch.as_tensor(cols, dtype=torch.int64),
        cost=float(c[rows, cols].sum()),
    )


def alpha_from_counts(counts: Sequence[float]) -> Tensor:
    """Pesi per classe inversi alla frequenza: 1 - n_i / Σn, rinormalizzati a media 1"""
    c = torch.as_tensor(list(counts), dtype=torch.float64)
    total = c.sum()
    if total <= 0:
        return torch.ones_like(c, dtype=torch.float32)
    alpha = 1.0 - c / total
    if alpha.sum() <= 0:
        # una sola classe presente
        return torch.ones_like(c, dtype=torch.float32)
    return (alpha / alpha.mean()).to(torch.float32)


class JointLoss(nn.Module):
    """Loss congiunta: focal di classe + L1 + GIoU, sommata sugli strati del decoder"""

    def __init__(self, num_classes: int, alpha: Optional[Sequence[float]] = None, gamma: float = 2.0,
                 class_weight: float = 2.0, l1_weight: float = 5.0, giou_weight: float = 2.0,
                 use_l1: bool = True, use_giou: bool = True, aux: bool = True, background_weight: float = 1.0):
        super().__init__()
        if alpha is None:
            alpha = [1.0] * num_classes
        if len(alpha) != num_classes:
            raise ConfigurationError(f"alpha ha {len(alpha)} valori, le classi sono {num_classes}")
        self.num_classes = num_classes
        self.register_buffer("alpha", torch.as_tensor(list(alpha), dtype=torch.float32))
        self.gamma = gamma
        self.background_weight = background_weight
        self.aux = aux
        # I termini disattivati hanno peso zero sia nel costo di abbinamento sia nella loss
        self.weights: Dict[str, float] = {
            "class": class_weight,
            "l1": l1_weight if use_l1 else 0.0,
            "giou": giou_weight if use_giou else 0.0,
        }

    def class_cost(self, logits: Tensor, labels: Tensor) -> Tensor:
        """Costo di classe in stile focal: [Q, G]"""
        prob = logits.sigmoid()
        alpha = self.alpha.to(logits.dtype)
        eps = 1e-8
        neg = self.background_weight * (prob ** self.gamma) * (-(1 - prob + eps).log())
        pos = alpha[None, :] * ((1 - prob) ** self.gamma) * (-(prob + eps).log())
        return pos[:, labels] - neg[:, labels]

    @torch.no_grad()
    def cost_matrix(self, logits: Tensor, boxes: Tensor, target: BoxSet) -> Tensor:
        """Costo di abbinamento di una immagine: [Q, G]"""
        if len(target) == 0:
            return logits.new_zeros((logits.shape[0], 0))
        labels = target.labels.to(logits.device)
        gt = target.boxes.to(boxes.dtype).to(boxes.device)
        cost = self.weights["class"] * self.class_cost(logits, labels)
        if self.weights["l1"]:
            cost = cost + self.weights["l1"] * torch.cdist(boxes, gt, p=1)
        if self.weights["giou"]:
            cost = cost - self.weights["giou"] * generalized_box_iou(
                box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt))
        return cost

    def match(self, logits: Tensor, boxes: Tensor, targets: Sequence[BoxSet]) -> List[MatchResult]:
        """Abbinamento ungherese per ciascuna immagine del batch (logit [B, Q, C], box [B, Q, 4])"""
        if len(targets) != logits.shape[0]:
            raise ValidationError(f"{len(targets)} target per un batch di {logits.shape[0]} immagini")
        return [hungarian_match(self.cost_matrix(logits[b], boxes[b], t)) for b, t in enumerate(targets)]

    def layer_loss(self, logits: Tensor, boxes: Tensor, targets: Sequence[BoxSet],
                   matches: Sequence[MatchResult], num_boxes: float) -> LayerLoss:
        target_classes = torch.zeros_like(logits)
        pred_list, gt_list = [], []
        for b, (target, match) in enumerate(zip(targets, matches)):
            if len(match) == 0:
                continue
            q = match.query_indices.to(logits.device)
            g = match.gt_indices.to(logits.device)
            target_classes[b, q, target.labels.to(logits.device)[g]] = 1.0
            pred_list.append(boxes[b, q])
            gt_list.append(target.boxes.to(boxes.device, boxes.dtype)[g])

        class_loss = focal_loss(logits, target_classes, self.alpha, self.gamma, self.background_weight, num_boxes)
        if pred_list:
            pred = torch.cat(pred_list)
            gt = torch.cat(gt_list)
            l1_loss = box_loss(pred, gt, giou_weight=0.0, l1_weight=1.0).sum() / num_boxes
            giou_loss = box_loss(pred, gt, giou_weight=1.0, l1_weight=0.0).sum() / num_boxes
        else:
            l1_loss = boxes.sum() * 0.0
            giou_loss = boxes.sum() * 0.0
        return LayerLoss(class_loss=class_loss, l1_loss=l1_loss, giou_loss=giou_loss)

    def forward(self, outputs: DecoderOutput, targets: Sequence[BoxSet],
                matches: Optional[Sequence[Sequence[MatchResult]]] = None) -> LossBreakdown:
        """Loss totale sugli strati del decoder (solo l'ultimo se aux è disattivato)

        Args:
            outputs: Uscite per strato del decoder
            targets: Un BoxSet per immagine
            matches: Abbinamenti già calcolati per strato (None = calcolati qui)

        Returns:
            LossBreakdown con le componenti per strato e il totale
        """
        indices = list(range(outputs.num_layers)) if self.aux else [outputs.num_layers - 1]
        num_boxes = float(max(sum(len(t) for t in targets), 1))
        layers: List[LayerLoss] = []
        total = outputs.class_logits.new_zeros(())
        for k, i in enumerate(indices):
            logits, boxes = outputs.layer(i)
            layer_matches = matches[k] if matches is not None else self.match(logits, boxes, targets)
            loss = self.layer_loss(logits, boxes, targets, layer_matches, num_boxes)
            layers.append(loss)
            total = (total + self.weights["class"] * loss.class_loss
                     + self.weights["l1"] * loss.l1_loss + self.weights["giou"] * loss.giou_loss)
        return LossBreakdown(layers=layers, weights=dict(self.weights), total=total)
