import copy
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.init import constant_, normal_, xavier_uniform_

from domain.errors import ConfigurationError, ValidationError
from domain.models import DecoderOutput, FusedPyramid
from model.deform_attn import MSDeformAttn

# I box restano strettamente in (0, 1) anche in float32
BOX_EPS = 1e-5


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def _get_clones(module: nn.Module, n: int) -> nn.ModuleList:
    return nn.ModuleList([copy.deepcopy(module) for _ in range(n)])


class PositionEmbeddingSine(nn.Module):
    """Codifica spaziale sinusoidale, normalizzata sull'estensione non mascherata"""

    def __init__(self, num_pos_feats: int = 128, temperature: float = 10000.0, scale: float = 2 * math.pi):
        super().__init__()
        self.num_pos_feats = num_pos_feats
        self.temperature = temperature
        self.scale = scale

    def forward(self, mask: Tensor) -> Tensor:
        """
        Args:
            mask: [B, H, W] (True = padding)

        Returns:
            Codifica [B, 2 * num_pos_feats, H, W]
        """
        not_mask = ~mask
        y_embed = not_mask.cumsum(1, dtype=torch.float32)
        x_embed = not_mask.cumsum(2, dtype=torch.float32)
        eps = 1e-6
        y_embed = y_embed / (y_embed[:, -1:, :] + eps) * self.scale
        x_embed = x_embed / (x_embed[:, :, -1:] + eps) * self.scale

        dim_t = torch.arange(self.num_pos_feats, dtype=torch.float32, device=mask.device)
        dim_t = self.temperature ** (2 * (dim_t // 2) / self.num_pos_feats)

        pos_x = x_embed[:, :, :, None] / dim_t
        pos_y = y_embed[:, :, :, None] / dim_t
        pos_x = torch.stack((pos_x[:, :, :, 0::2].sin(), pos_x[:, :, :, 1::2].cos()), dim=4).flatten(3)
        pos_y = torch.stack((pos_y[:, :, :, 0::2].sin(), pos_y[:, :, :, 1::2].cos()), dim=4).flatten(3)
        return torch.cat((pos_y, pos_x), dim=3).permute(0, 3, 1, 2)


class PositionEmbeddingLearned(nn.Module):
    """Codifica spaziale appresa: embedding separati per riga e colonna"""

    def __init__(self, num_pos_feats: int = 128, max_len: int = 256):
        super().__init__()
        self.max_len = max_len
        self.row_embed = nn.Embedding(max_len, num_pos_feats)
        self.col_embed = nn.Embedding(max_len, num_pos_feats)
        nn.init.uniform_(self.row_embed.weight)
        nn.init.uniform_(self.col_embed.weight)

    def forward(self, mask: Tensor) -> Tensor:
        bs, h, w = mask.shape
        if h > self.max_len or w > self.max_len:
            raise ValidationError(f"mappa {h}x{w} oltre la dimensione massima {self.max_len} della codifica appresa")
        x_emb = self.col_embed(torch.arange(w, device=mask.device))
        y_emb = self.row_embed(torch.arange(h, device=mask.device))
        pos = torch.cat([
            y_emb[:, None, :].expand(h, w, -1),
            x_emb[None, :, :].expand(h, w, -1),
        ], dim=-1)
        return pos.permute(2, 0, 1)[None].expand(bs, -1, -1, -1).to(torch.float32)


class FFN(nn.Module):
    """Percettrone a due strati: espande a d_ffn e riduce a d_model"""

    def __init__(self, d_model: int = 256, d_ffn: int = 1024, dropout: float = 0.1):
        super().__init__()
        self.linear1 = nn.Linear(d_model, d_ffn)
        self.activation = nn.ReLU()
        self.dropout = nn.Dropout(dropout)
        self.linear2 = nn.Linear(d_ffn, d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear2(self.dropout(self.activation(self.linear1(x))))


class MLP(nn.Module):
    """Percettrone multistrato (testa di regressione dei box)"""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1) + [output_dim]
        self.layers = nn.ModuleList(nn.Linear(d_in, d_out) for d_in, d_out in zip(dims[:-1], dims[1:]))
        self.num_layers = num_layers

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < self.num_layers - 1:
                x = F.relu(x)
        return x


class EncoderLayer(nn.Module):
    """Auto-attenzione deformabile, Add&Norm, FFN, Add&Norm"""

    def __init__(self, d_model: int = 256, d_ffn: int = 1024, dropout: float = 0.1,
                 n_levels: int = 4, n_heads: int = 8, n_points: int = 4):
        super().__init__()
        self.self_attn = MSDeformAttn(d_model, n_levels, n_heads, n_points)
        self.dropout1 = nn.Dropout(dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = FFN(d_model, d_ffn, dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, src: Tensor, pos: Optional[Tensor], reference_points: Tensor,
                spatial_shapes: List[Tuple[int, int]], padding_mask: Optional[Tensor] = None) -> Tensor:
        query = src if pos is None else src + pos
        src = self.norm1(src + self.dropout1(self.self_attn(query, reference_points, src, spatial_shapes, padding_mask)))
        return self.norm2(src + self.dropout2(self.ffn(src)))


class DecoderLayer(nn.Module):
    """Auto-attenzione standard tra le query, cross-attenzione deformabile, FFN"""

    def __init__(self, d_model: int = 256, d_ffn: int = 1024, dropout: float = 0.1,
                 n_levels: int = 4, n_heads: int = 8, n_points: int = 4):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.dropout1 = nn.Dropout(dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = MSDeformAttn(d_model, n_levels, n_heads, n_points)
        self.dropout2 = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FFN(d_model, d_ffn, dropout)
        self.dropout3 = nn.Dropout(dropout)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, tgt: Tensor, query_pos: Tensor, reference_points: Tensor, memory: Tensor,
                spatial_shapes: List[Tuple[int, int]], memory_mask: Optional[Tensor] = None) -> Tensor:
        q = k = tgt + query_pos
        tgt = self.norm1(tgt + self.dropout1(self.self_attn(q, k, tgt, need_weights=False)[0]))
        tgt2 = self.cross_attn(tgt + query_pos, reference_points, memory, spatial_shapes, memory_mask)
        tgt = self.norm2(tgt + self.dropout2(tgt2))
        return self.norm3(tgt + self.dropout3(self.ffn(tgt)))


@dataclass
class PositionalEncodings:
    """Codifiche usate dal modello: spaziale (per token), di scala (per livello), query"""
    spatial: Optional[Tensor]  # [B, S, d_model]
    scale: Optional[Tensor]  # [L, d_model]
    object_queries: Tensor  # [Q, 2 * d_model]: posizione | contenuto

    def token_encoding(self, level_index: Tensor) -> Optional[Tensor]:
        """Somma delle codifiche spaziale e di scala per ciascun token"""
        if self.spatial is None and self.scale is None:
            return None
        enc = 0
        if self.spatial is not None:
            enc = enc + self.spatial
        if self.scale is not None:
            enc = enc + self.scale[level_index][None]
        return enc


@dataclass
class EncoderMemory:
    """Feature globali dell'encoder con le informazioni di layout multi-scala"""
    memory: Tensor  # [B, S, d_model]
    mask: Tensor  # [B, S]
    spatial_shapes: List[Tuple[int, int]]
    valid_ratios: Tensor  # [B, L, 2] (x, y)
    encodings: PositionalEncodings


class DeformableTransformer(nn.Module):
    """Encoder e decoder deformabili con teste di predizione condivise tra gli strati"""

    def __init__(self, num_classes: int, d_model: int = 256, d_ffn: int = 1024, dropout: float = 0.1,
                 n_heads: int = 8, n_points: int = 4, n_levels: int = 4, enc_layers: int = 6,
                 dec_layers: int = 6, num_queries: int = 100, pe_spatial: str = "sin", pe_scale: str = "learned"):
        super().__init__()
        if dec_layers < 1:
            raise ConfigurationError("il decoder richiede almeno uno strato")
        self.d_model = d_model
        self.n_levels = n_levels
        self.num_queries = num_queries
        self.num_classes = num_classes

        self.encoder_layers = _get_clones(
            EncoderLayer(d_model, d_ffn, dropout, n_levels, n_heads, n_points), enc_layers)
        self.decoder_layers = _get_clones(
            DecoderLayer(d_model, d_ffn, dropout, n_levels, n_heads, n_points), dec_layers)

        if pe_spatial == "sin":
            self.spatial_pe: Optional[nn.Module] = PositionEmbeddingSine(d_model // 2)
        elif pe_spatial == "learned":
            self.spatial_pe = PositionEmbeddingLearned(d_model // 2)
        elif pe_spatial == "none":
            self.spatial_pe = None
        else:
            raise ConfigurationError(f"codifica spaziale sconosciuta: {pe_spatial}")
        if pe_scale == "learned":
            self.level_embed: Optional[nn.Parameter] = nn.Parameter(torch.empty(n_levels, d_model))
        elif pe_scale == "none":
            self.level_embed = None
        else:
            raise ConfigurationError(f"codifica di scala sconosciuta: {pe_scale}")

        self.query_embed = nn.Embedding(num_queries, 2 * d_model)
        self.reference_points = nn.Linear(d_model, 2)
        self.class_embed = nn.Linear(d_model, num_classes)
        self.bbox_embed = MLP(d_model, d_model, 4, 3)
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        for p in self.parameters():
            if p.dim() > 1:
                xavier_uniform_(p)
        # Le attenzioni deformabili hanno una inizializzazione propria
        for m in self.modules():
            if isinstance(m, MSDeformAttn):
                m._reset_parameters()
        if self.level_embed is not None:
            normal_(self.level_embed)
        normal_(self.query_embed.weight)
        xavier_uniform_(self.reference_points.weight)
        constant_(self.reference_points.bias, 0.0)
        prior_prob = 0.01
        constant_(self.class_embed.bias, -math.log((1 - prior_prob) / prior_prob))
        constant_(self.bbox_embed.layers[-1].weight, 0.0)
        constant_(self.bbox_embed.layers[-1].bias, 0.0)

    # --- preparazione dell'input -------------------------------------------------

    @staticmethod
    def valid_ratio(mask: Tensor) -> Tensor:
        """Frazione non mascherata di larghezza e altezza: [B, 2] (x, y)"""
        _, h, w = mask.shape
        valid_h = (~mask[:, :, 0]).sum(1).float()
        valid_w = (~mask[:, 0, :]).sum(1).float()
        return torch.stack([valid_w / w, valid_h / h], -1)

    def flatten(self, pyramid: FusedPyramid) -> Tuple[Tensor, Tensor, List[Tuple[int, int]], Tensor, Tensor]:
        """Appiattisce i livelli: token [B, S, d], maschera [B, S], forme, rapporti validi, indice di livello"""
        if len(pyramid.levels) != self.n_levels:
            raise ValidationError(f"attesi {self.n_levels} livelli, ricevuti {len(pyramid.levels)}")
        tokens, masks, shapes, level_index = [], [], [], []
        for lvl, (feat, mask) in enumerate(zip(pyramid.levels, pyramid.masks)):
            if feat.shape[1] != self.d_model:
                raise ValidationError(f"livello {lvl} con {feat.shape[1]} canali, attesi {self.d_model}")
            h, w = int(feat.shape[-2]), int(feat.shape[-1])
            shapes.append((h, w))
            tokens.append(feat.flatten(2).transpose(1, 2))
            masks.append(mask.flatten(1))
            level_index.append(torch.full((h * w,), lvl, dtype=torch.long, device=feat.device))
        valid_ratios = torch.stack([self.valid_ratio(m) for m in pyramid.masks], 1)
        return torch.cat(tokens, 1), torch.cat(masks, 1), shapes, valid_ratios, torch.cat(level_index)

    def encodings(self, pyramid: FusedPyramid) -> PositionalEncodings:
        spatial = None
        if self.spatial_pe is not None:
            spatial = torch.cat([
                self.spatial_pe(mask).to(feat.dtype).flatten(2).transpose(1, 2)
                for feat, mask in zip(pyramid.levels, pyramid.masks)
            ], 1)
        return PositionalEncodings(spatial=spatial, scale=self.level_embed, object_queries=self.query_embed.weight)

    @staticmethod
    def encoder_reference_points(spatial_shapes: List[Tuple[int, int]], valid_ratios: Tensor) -> Tensor:
        """Centro normalizzato di ogni cella, replicato su tutti i livelli: [B, S, L, 2]"""
        refs = []
        for lvl, (h, w) in enumerate(spatial_shapes):
            ref_y, ref_x = torch.meshgrid(
                torch.linspace(0.5, h - 0.5, h, dtype=valid_ratios.dtype, device=valid_ratios.device),
                torch.linspace(0.5, w - 0.5, w, dtype=valid_ratios.dtype, device=valid_ratios.device),
                indexing="ij",
            )
            ref_y = ref_y.reshape(-1)[None] / (valid_ratios[:, None, lvl, 1] * h)
            ref_x = ref_x.reshape(-1)[None] / (valid_ratios[:, None, lvl, 0] * w)
            refs.append(torch.stack((ref_x, ref_y), -1))
        reference_points = torch.cat(refs, 1)
        return reference_points[:, :, None] * valid_ratios[:, None]

    # --- encoder / decoder ---------------------------------------------------------

    def encode(self, pyramid: FusedPyramid) -> EncoderMemory:
        """Encoder: feature globali multi-scala [B, S, d_model]"""
        src, mask, shapes, valid_ratios, level_index = self.flatten(pyramid)
        encodings = self.encodings(pyramid)
        pos = encodings.token_encoding(level_index)
        reference_points = self.encoder_reference_points(shapes, valid_ratios)
        output = src
        for layer in self.encoder_layers:
            output = layer(output, pos, reference_points, shapes, mask)
        return EncoderMemory(memory=output, mask=mask, spatial_shapes=shapes, valid_ratios=valid_ratios,
                             encodings=encodings)

    def decoder_reference_points(self, query_pos: Tensor) -> Tensor:
        """Punti di riferimento delle query in (0, 1)^2, fissi per tutti gli strati"""
        return self.reference_points(query_pos).sigmoid()

    def predict(self, hidden: Tensor, reference: Tensor) -> Tuple[Tensor, Tensor]:
        """Teste condivise: logit di classe e box relativi al punto di riferimento"""
        logits = self.class_embed(hidden)
        delta = self.bbox_embed(hidden)
        offset = torch.cat([inverse_sigmoid(reference), torch.zeros_like(reference)], -1)
        boxes = (delta + offset).sigmoid().clamp(min=BOX_EPS, max=1 - BOX_EPS)
        return logits, boxes

    def decode(self, encoded: EncoderMemory) -> DecoderOutput:
        """Decoder: una predizione per ciascuno strato"""
        bs = encoded.memory.shape[0]
        query_pos, tgt = torch.split(encoded.encodings.object_queries, self.d_model, dim=1)
        query_pos = query_pos[None].expand(bs, -1, -1)
        tgt = tgt[None].expand(bs, -1, -1)
        reference = self.decoder_reference_points(query_pos)
        reference_input = reference[:, :, None] * encoded.valid_ratios[:, None]

        all_logits, all_boxes = [], []
        output = tgt
        for layer in self.decoder_layers:
            output = layer(output, query_pos, reference_input, encoded.memory, encoded.spatial_shapes, encoded.mask)
            logits, boxes = self.predict(output, reference)
            all_logits.append(logits)
            all_boxes.append(boxes)
        return DecoderOutput(class_logits=torch.stack(all_logits), boxes=torch.stack(all_boxes))

    def forward(self, pyramid: FusedPyramid) -> DecoderOutput:
        return self.decode(self.encode(pyramid))
