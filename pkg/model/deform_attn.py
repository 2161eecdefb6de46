import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.init import constant_, xavier_uniform_

from domain.errors import ValidationError


@dataclass
class SamplingState:
    """Offset e pesi di campionamento per query, testa, livello e punto"""
    offsets: Tensor  # [B, Q, H, L, K, 2] in celle del livello
    weights: Tensor  # [B, Q, H, L, K], softmax congiunta su L*K


def bilinear_sample(value_map: Tensor, point: Sequence[float]) -> Tensor:
    """Interpolazione bilineare di una mappa [C, H, W] nel punto normalizzato (x, y)

    Il centro della cella (i, j) corrisponde a ((j + 0.5) / W, (i + 0.5) / H);
    i vicini fuori dalla griglia contribuiscono con zero.
    """
    x, y = float(point[0]), float(point[1])
    grid = value_map.new_tensor([[[[2.0 * x - 1.0, 2.0 * y - 1.0]]]])
    out = F.grid_sample(value_map[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0, :, 0, 0]


def multi_scale_deformable_attn(value: Tensor, spatial_shapes: Sequence[Tuple[int, int]],
                                sampling_locations: Tensor, attention_weights: Tensor) -> Tensor:
    """Aggregazione multi-scala su CPU (riferimento in puro PyTorch)

    Args:
        value: [B, S, H, D_h] con S = somma H_l * W_l
        spatial_shapes: lista (H_l, W_l) per livello
        sampling_locations: [B, Q, H, L, K, 2] coordinate normalizzate (x, y)
        attention_weights: [B, Q, H, L, K]

    Returns:
        Tensor [B, Q, H * D_h] con le teste concatenate
    """
    bs, _, num_heads, head_dim = value.shape
    _, num_queries, _, num_levels, num_points, _ = sampling_locations.shape
    value_list = value.split([h * w for h, w in spatial_shapes], dim=1)
    sampling_grids = 2 * sampling_locations - 1
    sampled = []
    for level, (h, w) in enumerate(spatial_shapes):
        # B, H_l*W_l, heads, D_h -> B*heads, D_h, H_l, W_l
        value_l = value_list[level].flatten(2).transpose(1, 2).reshape(bs * num_heads, head_dim, h, w)
        # B, Q, heads, K, 2 -> B*heads, Q, K, 2
        grid_l = sampling_grids[:, :, :, level].transpose(1, 2).flatten(0, 1)
        sampled.append(F.grid_sample(value_l, grid_l, mode="bilinear", padding_mode="zeros", align_corners=False))
    weights = attention_weights.transpose(1, 2).reshape(bs * num_heads, 1, num_queries, num_levels * num_points)
    output = (torch.stack(sampled, dim=-2).flatten(-2) * weights).sum(-1)
    return output.view(bs, num_heads * head_dim, num_queries).transpose(1, 2).contiguous()


class MSDeformAttn(nn.Module):
    """Attenzione deformabile multi-scala

    Per ogni query e testa si campionano K punti per livello attorno al punto di
    riferimento; gli offset sono espressi in celle del livello e divisi per
    (W_l, H_l) prima di essere sommati al riferimento normalizzato.
    """

    def __init__(self, d_model: int = 256, n_levels: int = 4, n_heads: int = 8, n_points: int = 4):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValidationError(f"d_model={d_model} non divisibile per n_heads={n_heads}")
        self.d_model = d_model
        self.n_levels = n_levels
        self.n_heads = n_heads
        self.n_points = n_points

        self.sampling_offsets = nn.Linear(d_model, n_heads * n_levels * n_points * 2)
        self.attention_weights = nn.Linear(d_model, n_heads * n_levels * n_points)
        self.value_proj = nn.Linear(d_model, d_model)
        self.output_proj = nn.Linear(d_model, d_model)
        self._reset_parameters()

    def radial_offset_pattern(self) -> Tensor:
        """Bias iniziale degli offset: direzione 2*pi*h/H, ampiezza 1..K celle"""
        thetas = torch.arange(self.n_heads, dtype=torch.float32) * (2.0 * math.pi / self.n_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.n_heads, 1, 1, 2).repeat(1, self.n_levels, self.n_points, 1)
        for i in range(self.n_points):
            grid[:, :, i, :] *= i + 1
        return grid.view(-1)

    def _reset_parameters(self) -> None:
        constant_(self.sampling_offsets.weight, 0.0)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(self.radial_offset_pattern())
        constant_(self.attention_weights.weight, 0.0)
        constant_(self.attention_weights.bias, 0.0)
        xavier_uniform_(self.value_proj.weight)
        constant_(self.value_proj.bias, 0.0)
        xavier_uniform_(self.output_proj.weight)
        constant_(self.output_proj.bias, 0.0)

    def compute_offsets_and_weights(self, query: Tensor) -> SamplingState:
        """Offset e pesi (softmax su L*K per testa) da proiezioni lineari della query"""
        bs, num_queries, _ = query.shape
        offsets = self.sampling_offsets(query).view(
            bs, num_queries, self.n_heads, self.n_levels, self.n_points, 2)
        logits = self.attention_weights(query).view(bs, num_queries, self.n_heads, self.n_levels * self.n_points)
        weights = F.softmax(logits, -1).view(bs, num_queries, self.n_heads, self.n_levels, self.n_points)
        return SamplingState(offsets=offsets, weights=weights)

    def _check_inputs(self, query: Tensor, reference_points: Tensor, input_flatten: Tensor,
                      spatial_shapes: Sequence[Tuple[int, int]]) -> None:
        bs, num_queries, _ = query.shape
        expected = (bs, num_queries, self.n_levels, 2)
        if tuple(reference_points.shape) != expected:
            raise ValidationError(f"punti di riferimento {tuple(reference_points.shape)}, attesi {expected}")
        if len(spatial_shapes) != self.n_levels:
            raise ValidationError(f"attesi {self.n_levels} livelli di valori, ricevuti {len(spatial_shapes)}")
        total = sum(h * w for h, w in spatial_shapes)
        if input_flatten.shape[1] != total:
            raise ValidationError(f"valori con {input_flatten.shape[1]} token, attesi {total} dalle forme dei livelli")

    def sampling_locations(self, reference_points: Tensor, offsets: Tensor,
                           spatial_shapes: Sequence[Tuple[int, int]]) -> Tensor:
        normalizer = offsets.new_tensor([[w, h] for h, w in spatial_shapes])
        return reference_points[:, :, None, :, None, :] + offsets / normalizer[None, None, None, :, None, :]

    def aggregate(self, query: Tensor, reference_points: Tensor, input_flatten: Tensor,
                  spatial_shapes: Sequence[Tuple[int, int]], padding_mask: Optional[Tensor] = None) -> Tensor:
        """Campionamento e somma pesata, teste concatenate, prima della proiezione finale"""
        self._check_inputs(query, reference_points, input_flatten, spatial_shapes)
        bs, length, _ = input_flatten.shape
        value = self.value_proj(input_flatten)
        if padding_mask is not None:
            value = value.masked_fill(padding_mask[..., None], 0.0)
        value = value.view(bs, length, self.n_heads, self.d_model // self.n_heads)
        state = self.compute_offsets_and_weights(query)
        locations = self.sampling_locations(reference_points, state.offsets, spatial_shapes)
        return multi_scale_deformable_attn(value, spatial_shapes, locations, state.weights)

    def forward(self, query: Tensor, reference_points: Tensor, input_flatten: Tensor,
                spatial_shapes: Sequence[Tuple[int, int]], padding_mask: Optional[Tensor] = None) -> Tensor:
        """
        Args:
            query: [B, Q, d_model]
            reference_points: [B, Q, L, 2] in [0, 1]
            input_flatten: [B, S, d_model] valori multi-scala appiattiti
            spatial_shapes: (H_l, W_l) per livello
            padding_mask: [B, S], True per le posizioni di padding

        Returns:
            Tensor [B, Q, d_model]
        """
        return self.output_proj(self.aggregate(query, reference_points, input_flatten, spatial_shapes, padding_mask))

