"""Pseudo-modality replay against the frozen previous-stage codebook."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .numerics import DTYPE, DimensionError, GatedRecurrentCell
from .objectives import CpcHead, cross_cpc_batch
from .quantizer import TeacherSnapshot, UnifiedCodebook, nearest

NEW_CODE_WEIGHT = math.exp(-6.0)
PSEUDO = "pseudo"


@dataclass
class PseudoSequence:
    indices: torch.Tensor  # (..., T) ids into the live codebook
    weights: torch.Tensor  # (..., T) 1.0 or exp(-6)
    from_teacher: torch.Tensor  # (..., T) bool
    embeddings: torch.Tensor  # (..., T, D) constant rows

    @property
    def teacher_fraction(self) -> float:
        return float(self.from_teacher.to(DTYPE).mean())


def build_pseudo_sequence(z_mediator: torch.Tensor, teacher: TeacherSnapshot, live: UnifiedCodebook) -> PseudoSequence:
    """Global nearest code over the live codebook; prefix winners read from the teacher."""
    K1 = teacher.size
    if live.size < K1:
        raise ValueError(f"live codebook ({live.size}) smaller than teacher ({K1})")
    idx, _ = nearest(z_mediator, live.codes)
    from_teacher = idx < K1
    weights = torch.where(from_teacher, torch.tensor(1.0, dtype=DTYPE), torch.tensor(NEW_CODE_WEIGHT, dtype=DTYPE))
    teacher_rows = teacher.codes[idx.clamp(max=max(K1 - 1, 0))] if K1 else live.codes[idx]
    emb = torch.where(from_teacher.unsqueeze(-1), teacher_rows, live.codes[idx]).detach()
    return PseudoSequence(idx, weights, from_teacher, emb)


def pmr_cpc_loss(
    pseudo: PseudoSequence,
    z_mediator: torch.Tensor,
    z_new: torch.Tensor,
    head: CpcHead,
    summarizers: dict[str, GatedRecurrentCell] | torch.nn.ModuleDict,
    mediator: str,
    new: str,
    per_example: bool = False,
) -> torch.Tensor:
    """Cross-CPC between the pseudo sequence and each current modality, both directions.

    Step k of every direction is scaled by the pseudo weight at position t+k.
    """
    P = pseudo.embeddings
    if not (P.shape == z_mediator.shape == z_new.shape):
        raise DimensionError("pseudo, mediator and new sequences must share shape")
    w = pseudo.weights
    c_p = summarizers[PSEUDO](P)
    c_m = summarizers[mediator](z_mediator)
    c_n = summarizers[new](z_new)
    return (
        cross_cpc_batch(c_p, z_mediator, head[PSEUDO], w, per_example)
        + cross_cpc_batch(c_m, P, head[mediator], w, per_example)
        + cross_cpc_batch(c_p, z_new, head[PSEUDO], w, per_example)
        + cross_cpc_batch(c_n, P, head[new], w, per_example)
    )
