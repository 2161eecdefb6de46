import logging
from typing import Dict, List, Sequence, Tuple

import torch
from torch import nn

from domain.config import ModelConfig, OptimConfig
from domain.models import DecoderOutput, Detection, ImageBatch
from model.backbone import LEVEL_CHANNELS, Backbone
from model.hs_fpn import build_neck, build_pyramid
from model.losses_matching import box_cxcywh_to_xyxy
from model.transformer import DeformableTransformer

logger = logging.getLogger("leukodet.model")

MAX_DETECTIONS = 100


class Detector(nn.Module):
    """Rilevatore completo: backbone, piramide di fusione, transformer deformabile"""

    def __init__(self, num_classes: int, config: ModelConfig):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        # Stem fisso e BatchNorm congelata solo sopra pesi pre-addestrati
        pretrained = bool(config.pretrained_checkpoint)
        if config.frozen_bn and not pretrained:
            logger.info("Nessun checkpoint pre-addestrato: backbone con BatchNorm standard e stem addestrabile")
        self.backbone = Backbone(frozen_bn=config.frozen_bn and pretrained, freeze_stem=pretrained)
        self.neck = build_neck(config.fpn_variant, config.fpn_mode, config.ca_reduction, LEVEL_CHANNELS)
        self.transformer = DeformableTransformer(
            num_classes=num_classes,
            d_model=config.d_model,
            d_ffn=config.d_ffn,
            dropout=config.dropout,
            n_heads=config.heads,
            n_points=config.points,
            n_levels=config.levels,
            enc_layers=config.enc_layers,
            dec_layers=config.dec_layers,
            num_queries=config.num_queries,
            pe_spatial=config.pe_spatial,
            pe_scale=config.pe_scale,
        )
        logger.info(
            f"Modello creato: piramide {config.fpn_variant}/{config.fpn_mode}, "
            f"encoder {config.enc_layers} strati, decoder {config.dec_layers} strati, {num_classes} classi"
        )

    def forward(self, images: ImageBatch) -> DecoderOutput:
        pyramid = build_pyramid(self.backbone(images), self.neck)
        return self.transformer(pyramid)

    def param_groups(self, optim: OptimConfig) -> List[Dict]:
        """Gruppi di parametri con learning rate distinti: backbone, piramide, transformer e teste"""
        groups = [
            ("backbone", self.backbone, optim.lr_backbone),
            ("fpn", self.neck, optim.lr_fpn),
            ("transformer", self.transformer, optim.lr_transformer),
        ]
        return [
            {"name": name, "params": [p for p in module.parameters() if p.requires_grad], "lr": lr}
            for name, module, lr in groups
        ]


@torch.no_grad()
def postprocess(outputs: DecoderOutput, image_ids: Sequence[int], sizes: Sequence[Tuple[int, int]],
                max_detections: int = MAX_DETECTIONS) -> List[List[Detection]]:
    """Converte l'ultimo strato del decoder in rilevamenti in pixel

    Per ogni immagine si prendono i migliori punteggi sigmoidi sulle Q x C coppie
    (query, classe).

    Args:
        outputs: Uscite del decoder
        image_ids: Identificativi delle immagini del batch
        sizes: Dimensioni (H, W) originali su cui riscalare i box
        max_detections: Numero massimo di rilevamenti per immagine

    Returns:
        Una lista di Detection per immagine, in ordine di confidenza decrescente
    """
    logits, boxes = outputs.last()
    bs, num_queries, num_classes = logits.shape
    scores = logits.sigmoid().flatten(1)
    k = min(max_detections, num_queries * num_classes)
    top_scores, top_index = scores.topk(k, dim=1)
    query_index = top_index // num_classes
    labels = top_index % num_classes
    xyxy = box_cxcywh_to_xyxy(boxes)

    results: List[List[Detection]] = []
    for b in range(bs):
        h, w = sizes[b]
        scale = xyxy.new_tensor([w, h, w, h])
        selected = (xyxy[b, query_index[b]] * scale).clamp(min=0)
        selected = torch.min(selected, scale)
        results.append([
            Detection(
                image_id=int(image_ids[b]),
                class_id=int(labels[b, i]),
                box=tuple(float(v) for v in selected[i].tolist()),
                confidence=float(top_scores[b, i]),
            )
            for i in range(k)
        ])
    return results


def count_parameters(model: nn.Module) -> Tuple[int, int]:
    """Parametri totali e addestrabili"""
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return total, trainable


def finite_outputs(outputs: DecoderOutput) -> bool:
    return bool(torch.isfinite(outputs.class_logits).all() and torch.isfinite(outputs.boxes).all())
