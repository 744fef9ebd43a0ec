"""Continual mixture-of-experts adapter.

Each expert applies a per-modality specific layer and then a common layer
shared by every modality. A linear router with softmax mixes all experts
densely, per timestep.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .numerics import linear, softmax, torch_generator


class Expert(nn.Module):
    def __init__(self, dim: int, index: int, seed: int = 0, use_specific: bool = True):
        super().__init__()
        self.dim = dim
        self.index = index
        self.seed = seed
        self.use_specific = use_specific
        self.common = linear(dim, dim, torch_generator(seed, "adapter", index, "common"))
        self.specific = nn.ModuleDict()

    def add_modality(self, modality: str) -> None:
        if self.use_specific and modality not in self.specific:
            gen = torch_generator(self.seed, "adapter", self.index, "specific", modality)
            self.specific[modality] = linear(self.dim, self.dim, gen)

    def forward(self, h: torch.Tensor, modality: str) -> torch.Tensor:
        if not self.use_specific:
            return self.common(h)
        if modality not in self.specific:
            raise KeyError(f"expert {self.index} has no specific layer for modality {modality!r}")
        return self.common(self.specific[modality](h))


class CMoEAdapter(nn.Module):
    def __init__(self, dim: int, n_experts: int = 6, seed: int = 0, use_specific: bool = True):
        super().__init__()
        if n_experts < 1:
            raise ValueError("need at least one expert")
        self.dim = dim
        self.n_experts = n_experts
        self.use_specific = use_specific
        self.router = linear(dim, n_experts, torch_generator(seed, "adapter", "router"))
        self.experts = nn.ModuleDict(
            {f"expert{i}": Expert(dim, i, seed, use_specific) for i in range(n_experts)}
        )

    @property
    def modalities(self) -> list[str]:
        first = next(iter(self.experts.values()))
        return list(first.specific.keys())

    def add_modality(self, modality: str) -> None:
        for expert in self.experts.values():
            expert.add_modality(modality)


@dataclass
class AdapterOutput:
    z: torch.Tensor  # (..., T, D)
    gates: torch.Tensor  # (..., T, O)


def expert_forward(h_t: torch.Tensor, modality: str, expert: Expert, create: bool = False) -> torch.Tensor:
    if create:
        expert.add_modality(modality)
    return expert(h_t, modality)


def adapter_forward(h: torch.Tensor, modality: str, adapter: CMoEAdapter, create: bool = False) -> AdapterOutput:
    """z_t = sum_i G_i(h_t) E_i(h_t), all experts evaluated."""
    if create:
        adapter.add_modality(modality)
    gates = softmax(adapter.router(h), dim=-1)
    experts = list(adapter.experts.values())
    x = h.unsqueeze(-2)  # (..., 1, D) broadcast over experts
    if adapter.use_specific:
        for e in experts:
            if modality not in e.specific:
                raise KeyError(f"expert {e.index} has no specific layer for modality {modality!r}")
        Ws = torch.stack([e.specific[modality].weight for e in experts])
        bs = torch.stack([e.specific[modality].bias for e in experts])
        x = torch.einsum("...od,ofd->...of", x.expand(*h.shape[:-1], len(experts), h.shape[-1]), Ws) + bs
    Wc = torch.stack([e.common.weight for e in experts])
    bc = torch.stack([e.common.bias for e in experts])
    if x.shape[-2] == 1:
        x = x.expand(*h.shape[:-1], len(experts), h.shape[-1])
    outs = torch.einsum("...od,ofd->...of", x, Wc) + bc
    z = (gates.unsqueeze(-1) * outs).sum(dim=-2)
    return AdapterOutput(z, gates)


def gate_load_loss(G: torch.Tensor) -> torch.Tensor:
    """(1/U) sum_j (L_j / I - 1)^2 with loads L_j = sum_i G_ij and ideal I = B/U."""
    G = G.reshape(-1, G.shape[-1])
    B, U = G.shape
    if B < 1:
        raise ValueError("gate matrix has no rows")
    loads = G.sum(dim=0)
    ideal = B / U
    return ((loads / ideal - 1.0) ** 2).mean()
