import logging
import math
from typing import List, Tuple

import torch
import torch.nn.functional as F
import torchvision
from torch import Tensor, nn
from torchvision.models._utils import IntermediateLayerGetter
from torchvision.models.resnet import Bottleneck, conv1x1
from torchvision.ops import FrozenBatchNorm2d

from domain.models import LEVEL_STRIDES, BackboneOutput, ImageBatch

logger = logging.getLogger("leukodet.model")

LEVEL_CHANNELS: Tuple[int, ...] = (512, 1024, 2048, 2048)


def level_size(n: int, stride: int) -> int:
    """Dimensione spaziale di un livello: ogni dimezzamento arrotonda per eccesso"""
    return math.ceil(n / stride)


def expected_level_shapes(height: int, width: int) -> List[Tuple[int, int]]:
    return [(level_size(height, s), level_size(width, s)) for s in LEVEL_STRIDES]


def downsample_mask(mask: Tensor, size: Tuple[int, int]) -> Tensor:
    """Riduce la maschera [B, H, W] alla griglia del livello (nearest neighbor)"""
    return F.interpolate(mask[:, None].float(), size=size, mode="nearest").to(torch.bool)[:, 0]


class Backbone(nn.Module):
    """ResNet-50 (C3-C5) più un blocco bottleneck aggiuntivo con stride 2 (C6)

    Il blocco aggiuntivo riduce i canali 2048 -> 512 con una convoluzione 1x1,
    dimezza la mappa con una 3x3 a stride 2 e riporta a 2048 canali con una 1x1;
    il ramo di skip è una proiezione 1x1 a stride 2.

    Le statistiche congelate e lo stem fisso hanno senso solo partendo da pesi
    pre-addestrati: con inizializzazione casuale vanno lasciati a False.
    """

    def __init__(self, frozen_bn: bool = False, freeze_stem: bool = False):
        super().__init__()
        norm_layer = FrozenBatchNorm2d if frozen_bn else nn.BatchNorm2d
        resnet = torchvision.models.resnet50(weights=None, norm_layer=norm_layer)
        self.body = IntermediateLayerGetter(resnet, return_layers={"layer2": "0", "layer3": "1", "layer4": "2"})
        self.extra = Bottleneck(
            2048, 512, stride=2,
            downsample=nn.Sequential(conv1x1(2048, 2048, stride=2), norm_layer(2048)),
            norm_layer=norm_layer,
        )
        self.num_channels = LEVEL_CHANNELS
        self.strides = LEVEL_STRIDES
        self._reset_parameters()

        if freeze_stem:
            # conv1, bn1 e layer1 restano fissi come nel fine-tuning standard
            for name, parameter in self.body.named_parameters():
                if not name.startswith(("layer2", "layer3", "layer4")):
                    parameter.requires_grad_(False)

    def _reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, images: ImageBatch) -> BackboneOutput:
        """Estrae i 4 livelli e le rispettive maschere

        Args:
            images: Batch di immagini con maschera di padding

        Returns:
            Livelli a stride (8, 16, 32, 64) con canali (512, 1024, 2048, 2048)
        """
        images.validate()
        # I pixel di padding vengono azzerati prima dello stem
        pixels = images.pixels.masked_fill(images.mask[:, None], 0.0)
        features = self.body(pixels)
        levels = [features["0"], features["1"], features["2"]]
        levels.append(self.extra(levels[-1]))
        masks = [downsample_mask(images.mask, tuple(f.shape[-2:])) for f in levels]
        return BackboneOutput(levels=levels, masks=masks)

