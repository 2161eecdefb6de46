import logging
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from domain.errors import ConfigurationError, ValidationError
from domain.models import BackboneOutput, FusedPyramid

logger = logging.getLogger("leukodet.model")

PYRAMID_CHANNELS = 256
DM_INPUT_CHANNELS: Tuple[int, ...] = (512, 1024, 2048)


def masked_global_pool(x: Tensor, mask: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Pooling globale medio e massimo che ignora le posizioni mascherate

    Args:
        x: Mappa [B, C, H, W]
        mask: Maschera [B, H, W] (True = padding) oppure None

    Returns:
        Coppia (media, massimo), ciascuna di forma [B, C, 1, 1]
    """
    if mask is None:
        return x.mean(dim=(2, 3), keepdim=True), x.amax(dim=(2, 3), keepdim=True)
    valid = (~mask)[:, None].to(x.dtype)
    count = valid.sum(dim=(2, 3), keepdim=True)
    if (count == 0).any():
        raise ValidationError("mappa completamente mascherata: nessuna posizione valida per il pooling")
    avg = (x * valid).sum(dim=(2, 3), keepdim=True) / count
    mx = x.masked_fill(mask[:, None], float("-inf")).amax(dim=(2, 3), keepdim=True)
    return avg, mx


class ChannelAttention(nn.Module):
    """Modulo CA: pesi per canale sigmoid(T(avg) + T(max)) con T condivisa"""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.transform = nn.Sequential(
            nn.Conv2d(channels, hidden, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, kernel_size=1),
        )

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        avg, mx = masked_global_pool(x, mask)
        return torch.sigmoid(self.transform(avg) + self.transform(mx))


class DimensionMatch(nn.Module):
    """Modulo DM: convoluzione 1x1 verso 256 canali"""

    def __init__(self, in_channels: int, out_channels: int = PYRAMID_CHANNELS,
                 accepted: Sequence[int] = DM_INPUT_CHANNELS):
        super().__init__()
        if in_channels not in accepted:
            raise ConfigurationError(
                f"numero di canali {in_channels} non previsto (ammessi: {tuple(accepted)})")
        self.in_channels = in_channels
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(f"attesi {self.in_channels} canali, ricevuti {x.shape[1]}")
        return self.proj(x)


class SelectiveFeatureFusion(nn.Module):
    """Fusione SFF: f_out = f_low * CA(f_att) + f_att, con f_att = BL(T-Conv(f_high))"""

    def __init__(self, channels: int = PYRAMID_CHANNELS, mode: str = "tconv_bl", reduction: int = 4):
        super().__init__()
        if mode not in ("bl", "tconv_bl"):
            raise ConfigurationError(f"modalità di up-sampling sconosciuta: {mode}")
        self.mode = mode
        # stride 2, kernel 3, output_padding 1: uscita esattamente 2H x 2W
        self.tconv = (nn.ConvTranspose2d(channels, channels, kernel_size=3, stride=2, padding=1, output_padding=1)
                      if mode == "tconv_bl" else None)
        self.ca = ChannelAttention(channels, reduction)

    def upsample(self, f_high: Tensor, size: Tuple[int, int]) -> Tensor:
        """Porta la feature di alto livello sulla griglia (H1, W1) del livello basso"""
        if self.tconv is not None:
            f_high = self.tconv(f_high)
        return F.interpolate(f_high, size=size, mode="bilinear", align_corners=False)

    def forward(self, f_high: Tensor, f_low: Tensor, mask_low: Optional[Tensor] = None) -> Tensor:
        if f_high.shape[1] != f_low.shape[1]:
            raise ValidationError(f"canali diversi: alto {f_high.shape[1]}, basso {f_low.shape[1]}")
        f_att = self.upsample(f_high, tuple(f_low.shape[-2:]))
        return f_low * self.ca(f_att, mask_low) + f_att


class HSFPN(nn.Module):
    """Piramide HS-FPN: selezione per canale su ogni livello, poi fusione top-down"""

    def __init__(self, in_channels: Sequence[int] = (512, 1024, 2048, 2048), mode: str = "tconv_bl",
                 reduction: int = 4, out_channels: int = PYRAMID_CHANNELS):
        super().__init__()
        self.mode = mode
        self.select = nn.ModuleList(ChannelAttention(c, reduction) for c in in_channels)
        self.match = nn.ModuleList(DimensionMatch(c, out_channels) for c in in_channels)
        self.fuse = nn.ModuleList(
            SelectiveFeatureFusion(out_channels, mode, reduction) for _ in range(len(in_channels) - 1))

    def forward(self, features: BackboneOutput) -> FusedPyramid:
        _check_levels(features, len(self.match))
        selected = [
            dm(f * ca(f, m))
            for f, m, ca, dm in zip(features.levels, features.masks, self.select, self.match)
        ]
        fused: List[Tensor] = [None] * len(selected)  # type: ignore[list-item]
        # Il livello più grossolano viene emesso dopo la sola selezione
        fused[-1] = selected[-1]
        for i in range(len(selected) - 2, -1, -1):
            fused[i] = self.fuse[i](fused[i + 1], selected[i], features.masks[i])
        return FusedPyramid(levels=fused, masks=list(features.masks), strides=features.strides)


class FPN(nn.Module):
    """FPN classica: connessioni laterali 1x1, somma top-down, smoothing 3x3"""

    def __init__(self, in_channels: Sequence[int] = (512, 1024, 2048, 2048),
                 out_channels: int = PYRAMID_CHANNELS):
        super().__init__()
        self.lateral = nn.ModuleList(DimensionMatch(c, out_channels) for c in in_channels)
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1) for _ in in_channels)

    def top_down(self, features: BackboneOutput) -> List[Tensor]:
        _check_levels(features, len(self.lateral))
        lateral = [lat(f) for lat, f in zip(self.lateral, features.levels)]
        maps = [None] * len(lateral)
        maps[-1] = lateral[-1]
        for i in range(len(lateral) - 2, -1, -1):
            up = F.interpolate(maps[i + 1], size=lateral[i].shape[-2:], mode="bilinear", align_corners=False)
            maps[i] = lateral[i] + up
        return [s(m) for s, m in zip(self.smooth, maps)]

    def forward(self, features: BackboneOutput) -> FusedPyramid:
        return FusedPyramid(levels=self.top_down(features), masks=list(features.masks), strides=features.strides)


class PAFPN(FPN):
    """FPN con percorso aggiuntivo bottom-up (path aggregation)"""

    def __init__(self, in_channels: Sequence[int] = (512, 1024, 2048, 2048),
                 out_channels: int = PYRAMID_CHANNELS):
        super().__init__(in_channels, out_channels)
        self.down = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, kernel_size=3, stride=2, padding=1)
            for _ in range(len(in_channels) - 1))
        self.bottom_up = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
            for _ in range(len(in_channels) - 1))

    def forward(self, features: BackboneOutput) -> FusedPyramid:
        maps = self.top_down(features)
        outs = [maps[0]]
        for i in range(1, len(maps)):
            down = F.interpolate(self.down[i - 1](outs[-1]), size=maps[i].shape[-2:],
                                 mode="bilinear", align_corners=False)
            outs.append(self.bottom_up[i - 1](maps[i] + down))
        return FusedPyramid(levels=outs, masks=list(features.masks), strides=features.strides)


def _check_levels(features: BackboneOutput, expected: int) -> None:
    if len(features.levels) != expected or len(features.masks) != expected:
        raise ValidationError(f"attesi {expected} livelli dal backbone, ricevuti {len(features.levels)}")


def build_neck(variant: str = "hsfpn", mode: str = "tconv_bl", reduction: int = 4,
               in_channels: Sequence[int] = (512, 1024, 2048, 2048)) -> nn.Module:
    """Costruisce il modulo di fusione multi-scala selezionato in configurazione"""
    if variant == "hsfpn":
        return HSFPN(in_channels, mode=mode, reduction=reduction)
    if variant == "fpn":
        return FPN(in_channels)
    if variant == "pafpn":
        return PAFPN(in_channels)
    if variant in ("bifpn", "fapn"):
        raise ConfigurationError(f"variante di piramide '{variant}' non implementata")
    raise ConfigurationError(f"variante di piramide sconosciuta: {variant}")


def build_pyramid(features: BackboneOutput, neck: nn.Module) -> FusedPyramid:
    return neck(features)
