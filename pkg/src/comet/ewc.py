"""Elastic weight consolidation over the adapter's common and activated specific layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import torch

from .cmoe_adapter import CMoEAdapter
from .numerics import DTYPE


@dataclass
class FisherSnapshot:
    fisher: dict[str, torch.Tensor]
    anchor: dict[str, torch.Tensor]
    lam: float
    stage: int = 0

    def __post_init__(self):
        if set(self.fisher) != set(self.anchor):
            raise KeyError("Fisher and anchor must cover the same parameter paths")
        for path, f in self.fisher.items():
            if (f < 0).any():
                raise ValueError(f"negative Fisher entry at {path}")

    @property
    def scope(self) -> set[str]:
        return set(self.fisher)


def select_scope(adapter: CMoEAdapter, modalities_seen: Iterable[str], prefix: str = "adapter.") -> set[str]:
    """Common layers of every expert plus specific layers of the seen modalities; router excluded."""
    seen = set(modalities_seen)
    paths = set()
    for name, _ in adapter.named_parameters():
        parts = name.split(".")
        if parts[0] != "experts":
            continue
        if parts[2] == "common" or (parts[2] == "specific" and parts[3] in seen):
            paths.add(prefix + name)
    return paths


def estimate_fisher(
    params: Mapping[str, torch.Tensor],
    per_example_losses: Iterable[torch.Tensor],
    lam: float,
    stage: int = 0,
) -> FisherSnapshot:
    """Empirical diagonal Fisher: mean over examples of the squared per-example gradient.

    ``per_example_losses`` yields losses whose graphs reach ``params``: either
    scalars, one per example, or 1-D vectors holding one loss per example of a
    shared graph (differentiated row by row in a single batched backward).
    """
    names = list(params)
    tensors = [params[n] for n in names]
    acc = [torch.zeros_like(t, dtype=DTYPE) for t in tensors]
    n = 0
    for loss in per_example_losses:
        if loss.ndim == 0:
            grads = torch.autograd.grad(loss, tensors, retain_graph=True, allow_unused=True)
            rows = 1
        else:
            rows = loss.shape[0]
            basis = torch.eye(rows, dtype=loss.dtype)
            grads = torch.autograd.grad(loss, tensors, basis, retain_graph=True, allow_unused=True, is_grads_batched=True)
        for a, g in zip(acc, grads):
            if g is not None:
                g = g.detach() ** 2
                a += g if loss.ndim == 0 else g.sum(0)
        n += rows
    if n == 0:
        raise ValueError("Fisher estimate needs at least one example")
    fisher = {name: a / n for name, a in zip(names, acc)}
    anchor = {name: t.detach().clone() for name, t in zip(names, tensors)}
    return FisherSnapshot(fisher, anchor, lam, stage)


def ewc_loss(params: Mapping[str, torch.Tensor], snap: FisherSnapshot) -> torch.Tensor:
    """sum_i (lam/2) F_i (theta_i - theta*_i)^2 over the snapshot's scope."""
    total = torch.zeros((), dtype=DTYPE)
    # fixed summation order so a reloaded snapshot gives the same bits
    for path in sorted(snap.fisher):
        F = snap.fisher[path]
        if path not in params:
            raise KeyError(f"parameter {path} missing for EWC penalty")
        total = total + (F * (params[path] - snap.anchor[path]) ** 2).sum()
    return 0.5 * snap.lam * total
