"""Multi-scale graph relation network.

Structural attention over physically adjacent nodes (multi-head, averaged),
collaborative relation matrices between every scale pair ``a <= b``, and the
residual collaboration fusion. All functions accept arbitrary leading batch
dimensions; node axes are the last two before the feature axis.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2


def t_softmax(logits: torch.Tensor, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Softmax of ``logits / temperature`` along ``dim``.

    Entries equal to ``-inf`` get weight zero, which is how non-neighbors are
    excluded. ``torch.softmax`` subtracts the running max internally.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return torch.softmax(logits / temperature, dim=dim)


def structural_logits(positions: torch.Tensor, mask: torch.Tensor,
                      node_map: torch.Tensor, relation: torch.Tensor) -> torch.Tensor:
    """Pairwise relation logits for every head.

    positions: ``(..., n, D)``; mask: ``(n, n)`` bool, True on neighbor pairs
    (self included); node_map: ``(P, D_t, D)``; relation: ``(P, 2 D_t)``.
    Returns ``(..., P, n, n)`` with ``-inf`` outside the mask.
    """
    d_t = node_map.shape[1]
    if node_map.shape[-1] != positions.shape[-1] or relation.shape[-1] != 2 * d_t:
        raise ValueError(
            f"dimension mismatch: positions {tuple(positions.shape)}, node_map "
            f"{tuple(node_map.shape)}, relation {tuple(relation.shape)}")
    z = torch.einsum("ptd,...nd->...pnt", node_map, positions)
    # w_r^T [z_i || z_j] splits into a source term and a target term
    src = torch.einsum("...pnt,pt->...pn", z, relation[:, :d_t])
    dst = torch.einsum("...pnt,pt->...pn", z, relation[:, d_t:])
    e = F.leaky_relu(src.unsqueeze(-1) + dst.unsqueeze(-2), LEAKY_SLOPE)
    return e.masked_fill(~mask, float("-inf"))


def uniform_attention(mask: torch.Tensor, dtype=torch.float64) -> torch.Tensor:
    """Plain neighbor averaging, used when structural relations are ablated."""
    m = mask.to(dtype)
    return m / m.sum(-1, keepdim=True)


def aggregate_heads(positions: torch.Tensor, mask: torch.Tensor, node_map: torch.Tensor,
                    relation: torch.Tensor, temperature: float = 1.0,
                    structural: bool = True) -> torch.Tensor:
    """Average over heads of ``ReLU(sum_j A_ij W_v v_j)``; returns ``(..., n, D_t)``."""
    z = torch.einsum("ptd,...nd->...pnt", node_map, positions)
    if structural:
        attn = t_softmax(structural_logits(positions, mask, node_map, relation), temperature)
    else:
        attn = uniform_attention(mask, positions.dtype)
    return torch.relu(attn @ z).mean(dim=-3)


def collab_matrix(emb_a: torch.Tensor, emb_b: torch.Tensor, temperature: float = 1.0,
                  scales: tuple[int, int] | None = None) -> torch.Tensor:
    """Row-normalized affinity ``T-softmax_j(<v_i^a, v_j^b>)``, shape ``(..., n_a, n_b)``."""
    if scales is not None and scales[0] > scales[1]:
        raise ValueError(f"collaborative relations need a <= b, got {scales}")
    return t_softmax(emb_a @ emb_b.transpose(-1, -2), temperature)


def fuse(embeddings: dict[int, torch.Tensor], collabs: dict[tuple[int, int], torch.Tensor],
         fusion_maps: dict[tuple[int, int], torch.Tensor], coefficient: float = 1.0
         ) -> dict[int, torch.Tensor]:
    """Synchronous collaboration fusion.

    Every update reads the pre-fusion embeddings, so the result does not
    depend on the order in which scales are visited.
    """
    scales = sorted(embeddings)
    out = {}
    for a in scales:
        acc = embeddings[a]
        for b in scales:
            if b < a:
                continue
            if (a, b) not in collabs or (a, b) not in fusion_maps:
                raise KeyError(f"missing collaborative pair ({a}, {b})")
            mixed = collabs[(a, b)] @ embeddings[b]
            acc = acc + coefficient * mixed @ fusion_maps[(a, b)].T
        out[a] = acc
    return out


def _glorot(shape: Sequence[int], fan_in: int, fan_out: int, gen: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound


class MGRN(nn.Module):
    """Parameters and forward pass of the relation network for a set of scales."""

    def __init__(self, scales: Sequence[int], heads: int = 8, feature_dim: int = 8,
                 coord_dim: int = 3, temperature_struct: float = 1.0,
                 temperature_collab: float = 1.0, fusion_coefficient: float = 1.0,
                 structural: bool = True, collaborative: bool = True):
        super().__init__()
        self.scales = tuple(sorted(scales))
        self.heads = heads
        self.feature_dim = feature_dim
        self.coord_dim = coord_dim
        self.temperature_struct = temperature_struct
        self.temperature_collab = temperature_collab
        self.fusion_coefficient = fusion_coefficient
        self.structural = structural
        self.collaborative = collaborative
        self.node_map = nn.ParameterDict({
            str(m): nn.Parameter(torch.zeros(heads, feature_dim, coord_dim, dtype=torch.float64))
            for m in self.scales})
        if structural:
            self.relation = nn.ParameterDict({
                str(m): nn.Parameter(torch.zeros(heads, 2 * feature_dim, dtype=torch.float64))
                for m in self.scales})
        if collaborative:
            self.fusion_map = nn.ParameterDict({
                f"{a}_{b}": nn.Parameter(torch.zeros(feature_dim, feature_dim, dtype=torch.float64))
                for a in self.scales for b in self.scales if a <= b})

    def reset_parameters(self, gen: torch.Generator) -> None:
        d_t, d = self.feature_dim, self.coord_dim
        with torch.no_grad():
            for m in self.scales:
                key = str(m)
                self.node_map[key].copy_(_glorot(self.node_map[key].shape, d, d_t, gen))
                if self.structural:
                    self.relation[key].copy_(_glorot(self.relation[key].shape, 2 * d_t, 1, gen))
            if self.collaborative:
                for key, p in self.fusion_map.items():
                    p.copy_(_glorot(p.shape, d_t, d_t, gen))

    def relation_params(self, scale: int) -> tuple[torch.Tensor, torch.Tensor | None]:
        key = str(scale)
        return self.node_map[key], (self.relation[key] if self.structural else None)

    def forward(self, positions: dict[int, torch.Tensor], masks: dict[int, torch.Tensor]
                ) -> dict[int, torch.Tensor]:
        """positions[m]: ``(..., n_m, D)`` -> fused embeddings ``(..., n_m, D_t)`` per scale."""
        emb = {}
        for m in self.scales:
            wv, wr = self.relation_params(m)
            emb[m] = aggregate_heads(positions[m], masks[m], wv, wr,
                                     self.temperature_struct, self.structural)
        if not self.collaborative:
            return emb
        collabs = {(a, b): collab_matrix(emb[a], emb[b], self.temperature_collab, (a, b))
                   for a in self.scales for b in self.scales if a <= b}
        maps = {(a, b): self.fusion_map[f"{a}_{b}"] for (a, b) in collabs}
        return fuse(emb, collabs, maps, self.fusion_coefficient)
