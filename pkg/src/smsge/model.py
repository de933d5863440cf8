"""The full self-supervised model: graphs -> MGRN -> per-scale LSTM -> heads."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import TrainConfig, apply_ablation
from .graph import ScaleLayout, SkeletonSpec, center_frames
from .mgrn import MGRN
from .msr import EncoderStack, ReconHeads, glorot_, msr_loss, sample_subsequences

DTYPES = {"float64": torch.float64, "float32": torch.float32}


class SMSGEModel(nn.Module):
    def __init__(self, spec: SkeletonSpec, config: TrainConfig):
        super().__init__()
        config.validate()
        self.spec = spec
        self.config = config
        self.plan = apply_ablation(config)
        self.layout = ScaleLayout.from_spec(spec)
        counts = self.layout.node_counts
        self.node_counts = {m: counts[m] for m in self.plan.scales}
        self.mgrn = MGRN(self.plan.scales, config.heads, config.feature_dim, 3,
                         config.temperature_struct, config.temperature_collab,
                         config.fusion_coefficient, self.plan.structural,
                         self.plan.collaborative)
        self.encoders = EncoderStack(self.node_counts, config.feature_dim, config.hidden_dim,
                                     config.lstm_layers)
        self.heads = ReconHeads(self.plan.head_pairs, dict(enumerate(counts)), config.hidden_dim,
                                config.head_hidden)
        for m in self.plan.scales:
            self.register_buffer(f"mask_{m}", torch.from_numpy(self.layout.neighbor_mask(m)),
                                 persistent=False)
        self.dtype = DTYPES[config.dtype]
        self.to(self.dtype)

    @property
    def scales(self) -> tuple[int, ...]:
        return self.plan.scales

    def masks(self) -> dict[int, torch.Tensor]:
        return {m: getattr(self, f"mask_{m}") for m in self.scales}

    def reset_parameters(self, seed: int) -> None:
        """Seeded Glorot-uniform weights, zero biases."""
        gen = torch.Generator().manual_seed(int(seed))
        self.mgrn.reset_parameters(gen)
        for name, p in list(self.encoders.named_parameters()) + list(self.heads.named_parameters()):
            if p.dim() >= 2:
                glorot_(p, gen)
            else:
                with torch.no_grad():
                    p.zero_()

    def lift(self, frames, normalize: bool = True) -> dict[int, torch.Tensor]:
        """Joint positions ``(..., J, 3)`` -> node positions per active scale."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-2:] != (self.spec.joint_count, 3):
            raise ValueError(
                f"frames with shape {frames.shape} do not match {self.spec.joint_count}-joint topology")
        if normalize:
            frames = center_frames(frames, self.spec.topology.root)
        lifted = self.layout.lift(frames)
        return {m: torch.from_numpy(lifted[m]).to(self.dtype) for m in self.scales}

    def fused_features(self, positions: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        return self.mgrn(positions, self.masks())

    def encode(self, fused: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        """Fused features ``(B, k, n_m, D_t)`` -> states ``(B, k, D_h)`` per scale."""
        return self.encoders(fused)

    def sample_groups(self, num_sequences: int, rng: np.random.Generator
                      ) -> list[np.ndarray]:
        """Frame-index arrays ``(B, k)``; one array per (round, length) for the batch."""
        f = self.config.frames
        if not self.plan.subsequences:
            return [np.tile(np.arange(f), (num_sequences, 1))]
        per_seq = [sample_subsequences(f, self.config.rounds, rng, i) for i in range(num_sequences)]
        return [np.array([s[g].indices for s in per_seq]) for g in range(len(per_seq[0]))]

    def batch_loss(self, positions: dict[int, torch.Tensor], groups: Sequence[np.ndarray]
                   ) -> torch.Tensor:
        """Total reconstruction loss over the sampled subsequences of a batch.

        positions[m]: ``(B, f, n_m, 3)``. Per-frame MGRN features are computed
        once and gathered for each subsequence.
        """
        fused = self.fused_features(positions)
        total = None
        for idx in groups:
            rows = torch.arange(idx.shape[0]).unsqueeze(1)
            cols = torch.from_numpy(idx)
            states = self.encode({m: fused[m][rows, cols] for m in self.scales})
            targets = {b: positions[b][rows, cols] for b in self.scales}
            term = msr_loss(targets, states, self.heads)
            total = term if total is None else total + term
        return total

    @torch.no_grad()
    def encoded_states(self, frames, normalize: bool = True) -> dict[int, torch.Tensor]:
        """Full-length states ``(B, f, D_h)`` per scale for frames ``(B, f, J, 3)``."""
        positions = self.lift(frames, normalize)
        return self.encode(self.fused_features(positions))

