"""Multi-scale skeleton reconstruction: subsequence sampling, per-scale LSTM
encoders, per-scale-pair reconstruction heads and the summed l1 objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class SubsequenceSample:
    indices: tuple[int, ...]
    sequence_id: int | str = 0
    round: int = 0

    @property
    def length(self) -> int:
        return len(self.indices)


def sample_subsequences(length: int, rounds: int, rng: np.random.Generator | int,
                        sequence_id: int | str = 0) -> list[SubsequenceSample]:
    """``rounds * (length - 1)`` order-preserving subsequences.

    Each round has one sample of every length ``1 .. length-1``; the kept frames
    are a uniformly random subset of that size.
    """
    if length < 2:
        raise ValueError(f"need at least 2 frames to sample subsequences, got {length}")
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    out = []
    for r in range(rounds):
        for k in range(1, length):
            kept = np.sort(rng.choice(length, size=k, replace=False))
            out.append(SubsequenceSample(tuple(int(i) for i in kept), sequence_id, r))
    return out


class EncoderStack(nn.Module):
    """Independent LSTM per scale, fed the flattened fused node embeddings."""

    def __init__(self, node_counts: Mapping[int, int], feature_dim: int, hidden_dim: int = 256,
                 layers: int = 2):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.lstm = nn.ModuleDict({
            str(m): nn.LSTM(n * feature_dim, hidden_dim, num_layers=layers, batch_first=True,
                            dtype=torch.float64)
            for m, n in sorted(node_counts.items())})

    def forward(self, features: Mapping[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        return {m: encode_sequence(x, self.lstm[str(m)]) for m, x in features.items()}


def encode_sequence(features: torch.Tensor, encoder: nn.LSTM) -> torch.Tensor:
    """``(B, k, n, D_t)`` or ``(B, k, n*D_t)`` -> hidden states ``(B, k, D_h)``.

    Hidden and cell states start at zero for every call.
    """
    if features.shape[1] == 0:
        raise ValueError("cannot encode an empty sequence")
    if features.dim() == 4:
        features = features.flatten(2)
    states, _ = encoder(features)
    return states


class ReconHeads(nn.Module):
    """One-hidden-layer MLP per (source scale a, target scale b) pair; no sharing."""

    def __init__(self, pairs: Sequence[tuple[int, int]], node_counts: Mapping[int, int],
                 hidden_dim: int = 256, head_hidden: int = 256, coord_dim: int = 3):
        super().__init__()
        self.pairs = tuple(pairs)
        self.node_counts = dict(node_counts)
        self.coord_dim = coord_dim
        for a, b in self.pairs:
            if a > b:
                raise ValueError(f"reconstruction pair ({a}, {b}) needs a <= b")
        self.mlp = nn.ModuleDict({
            f"{a}_{b}": nn.Sequential(
                nn.Linear(hidden_dim, head_hidden, dtype=torch.float64),
                nn.ReLU(),
                nn.Linear(head_hidden, node_counts[b] * coord_dim, dtype=torch.float64))
            for a, b in self.pairs})

    def head(self, a: int, b: int) -> nn.Module:
        if a > b:
            raise ValueError(f"reconstruction pair ({a}, {b}) needs a <= b")
        return self.mlp[f"{a}_{b}"]

    def forward(self, states: torch.Tensor, a: int, b: int) -> torch.Tensor:
        return reconstruct(states, self.head(a, b), self.node_counts[b], self.coord_dim)


def reconstruct(states: torch.Tensor, head: nn.Module, num_nodes: int,
                coord_dim: int = 3) -> torch.Tensor:
    """Map states ``(..., D_h)`` to node positions ``(..., n_b, 3)``."""
    out = head(states)
    return out.reshape(*out.shape[:-1], num_nodes, coord_dim)


def msr_loss(targets: Mapping[int, torch.Tensor], states: Mapping[int, torch.Tensor],
             heads: ReconHeads) -> torch.Tensor:
    """Sum over all head pairs (a, b) of ``sum |T^b - f_ab(h^a)|``.

    targets[b]: ``(..., k, n_b, 3)``; states[a]: ``(..., k, D_h)``.
    """
    total = None
    for a, b in heads.pairs:
        recon = heads(states[a], a, b)
        if recon.shape != targets[b].shape:
            raise ValueError(
                f"reconstruction {tuple(recon.shape)} vs target {tuple(targets[b].shape)} "
                f"for pair ({a}, {b})")
        term = (targets[b] - recon).abs().sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no reconstruction heads")
    return total


def glorot_(tensor: torch.Tensor, gen: torch.Generator) -> None:
    fan_out, fan_in = tensor.shape[0], tensor.shape[1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
