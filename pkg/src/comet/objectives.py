"""Training objectives: CLUB mutual-information bound, cross-modal CPC, reconstruction.

Losses that average over examples accept ``per_example=True`` and then return
one value per batch row; the batch loss is always the mean of those values.
The per-example form feeds the Fisher estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
from torch import nn

from .numerics import DTYPE, DimensionError, linear, log_softmax, torch_generator

LOG_2PI = math.log(2 * math.pi)


class VariationalNet(nn.Module):
    """Diagonal Gaussian q(z_bar | z) used by the CLUB bound."""

    def __init__(self, d_sem: int, d_spec: int, hidden: int = 64, seed: int = 0, key: str = ""):
        super().__init__()
        self.d_spec = d_spec
        self.inp = linear(d_sem, hidden, torch_generator(seed, "club", key, "inp"))
        self.out = linear(hidden, 2 * d_spec, torch_generator(seed, "club", key, "out"))

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        stats = self.out(nn.functional.silu(self.inp(z)))
        mu, logvar = stats[..., : self.d_spec], stats[..., self.d_spec :]
        return mu, logvar.clamp(-8.0, 8.0)

    def log_prob(self, z_bar: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        mu, logvar = self(z)
        return -0.5 * (LOG_2PI + logvar + (z_bar - mu) ** 2 / logvar.exp()).sum(-1)


def club_log_prob_matrix(z: torch.Tensor, z_bar: torch.Tensor, q: VariationalNet) -> torch.Tensor:
    """M[i, j] = log q(z_bar_j | z_i) for flattened rows."""
    mu, logvar = q(z.reshape(-1, z.shape[-1]))
    zb = z_bar.reshape(-1, z_bar.shape[-1])
    diff = zb.unsqueeze(0) - mu.unsqueeze(1)
    return -0.5 * (LOG_2PI + logvar.unsqueeze(1) + diff**2 / logvar.exp().unsqueeze(1)).sum(-1)


def club_from_matrix(logq: torch.Tensor) -> torch.Tensor:
    N = logq.shape[0]
    if N < 2:
        raise ValueError("CLUB needs at least two rows")
    return torch.diagonal(logq).mean() - logq.mean()


def club_upper_bound(z: torch.Tensor, z_bar: torch.Tensor, q: VariationalNet, per_example: bool = False) -> torch.Tensor:
    """Sampled CLUB estimate over all rows (timesteps across the batch).

    The negative term averages log q(z_bar_j | z_i) over every row j, computed
    in O(N) through the first two moments of z_bar.
    """
    if z.shape[:-1] != z_bar.shape[:-1]:
        raise DimensionError("z and z_bar rows are not aligned")
    rows = z.reshape(-1, z.shape[-1]).shape[0]
    if rows < 2:
        raise ValueError("CLUB needs at least two rows")
    mu, logvar = q(z)
    inv_var = torch.exp(-logvar)
    positive = -0.5 * (LOG_2PI + logvar + (z_bar - mu) ** 2 * inv_var).sum(-1)
    flat = z_bar.reshape(-1, z_bar.shape[-1])
    m1, m2 = flat.mean(0), (flat**2).mean(0)
    negative = -0.5 * (LOG_2PI + logvar + (m2 - 2 * mu * m1 + mu**2) * inv_var).sum(-1)
    gap = positive - negative
    if per_example and gap.ndim >= 2:
        return gap.reshape(gap.shape[0], -1).mean(-1)
    return gap.mean()


def club_aux_nll(z: torch.Tensor, z_bar: torch.Tensor, q: VariationalNet) -> torch.Tensor:
    """-(1/N) sum_i log q(z_bar_i | z_i); trained on q's parameters only."""
    return -q.log_prob(z_bar, z).mean()


class CpcHead(nn.Module):
    """Per-source projections W_k: context -> semantic space, one per future step k."""

    def __init__(self, k_steps: int, ctx_dim: int, d_sem: int, seed: int = 0):
        super().__init__()
        self.k_steps, self.ctx_dim, self.d_sem, self.seed = k_steps, ctx_dim, d_sem, seed
        self.proj = nn.ParameterDict()

    def add(self, key: str) -> None:
        if key in self.proj:
            return
        gen = torch_generator(self.seed, "cpc", key)
        bound = 1.0 / math.sqrt(self.ctx_dim)
        w = (torch.rand(self.k_steps, self.d_sem, self.ctx_dim, generator=gen, dtype=DTYPE) * 2 - 1) * bound
        self.proj[key] = nn.Parameter(w)

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.proj[key]


def info_nce(logits: torch.Tensor, positive: int = 0) -> torch.Tensor:
    if logits.shape[-1] < 2:
        raise ValueError("contrastive candidate set needs at least two entries")
    return -log_softmax(logits, dim=-1)[..., positive]


def cross_cpc_loss(context_t: torch.Tensor, candidates: torch.Tensor, W: torch.Tensor, positive: int = 0) -> torch.Tensor:
    """Loss for one anchor time t.

    context_t: (ctx,) context of the source modality at t.
    candidates: (K, M, D) candidate target rows for steps t+1..t+K; row
        ``positive`` of each step is the true future z.
    W: (K, D, ctx) per-step projections.
    """
    K = W.shape[0]
    if candidates.shape[0] != K:
        raise DimensionError("need one candidate set per prediction step")
    if candidates.shape[1] < 2:
        raise ValueError("contrastive candidate set needs at least two entries")
    pred = torch.einsum("kdc,c->kd", W, context_t)
    logits = torch.einsum("kmd,kd->km", candidates, pred)
    return info_nce(logits, positive).mean()


def cross_cpc_batch(
    ctx_src: torch.Tensor,
    z_tgt: torch.Tensor,
    W: torch.Tensor,
    step_weights: torch.Tensor | None = None,
    per_example: bool = False,
) -> torch.Tensor:
    """Batched Cross-CPC with in-batch negatives.

    For anchor (b, t) and step k the candidates are z_tgt[j, t+k] over every
    sequence j in the batch; j = b is the positive. Losses are averaged over
    k (1/K), then over valid t, then over b. ``step_weights`` (B, T) scales
    the step-k term by the weight at target position t+k.
    """
    B, T, _ = z_tgt.shape
    K = W.shape[0]
    if B < 2:
        raise ValueError("contrastive candidate set needs at least two entries")
    if T <= K:
        raise DimensionError(f"sequence length {T} too short for {K} prediction steps")
    Tv = T - K
    eye = torch.arange(B)
    total = z_tgt.new_zeros(B)
    for k in range(1, K + 1):
        pred = torch.einsum("btc,dc->btd", ctx_src[:, :Tv], W[k - 1])
        cands = z_tgt[:, k : k + Tv]
        logits = torch.einsum("btd,jtd->tbj", pred, cands)
        nll = -log_softmax(logits, dim=-1)[:, eye, eye].transpose(0, 1)  # (B, Tv)
        if step_weights is not None:
            nll = nll * step_weights[:, k : k + Tv]
        total = total + nll.mean(-1)
    per = total / K
    return per if per_example else per.mean()


def recon_loss(x_hat: torch.Tensor, x: torch.Tensor, per_example: bool = False) -> torch.Tensor:
    if x_hat.shape != x.shape:
        raise DimensionError(f"reconstruction shape {tuple(x_hat.shape)} != {tuple(x.shape)}")
    sq = (x_hat - x) ** 2
    if per_example:
        return sq.reshape(sq.shape[0], -1).mean(-1)
    return sq.mean()


COMPONENTS = ("recon", "commit", "cpc", "cmcm", "mi", "gate")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    parts: dict[str, float] = field(default_factory=dict)


def total_loss(
    components: Mapping[str, torch.Tensor | float],
    weights: Mapping[str, float] | None = None,
    cmcm_hook: Callable[[], torch.Tensor | float] | None = None,
) -> LossBreakdown:
    """Weighted sum of the pretraining terms; the cmcm term comes from the hook if one is set."""
    weights = dict(weights or {})
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    terms = dict(components)
    terms["cmcm"] = cmcm_hook() if cmcm_hook is not None else terms.get("cmcm", 0.0)
    total = torch.zeros((), dtype=DTYPE)
    parts = {}
    for name in COMPONENTS:
        value = terms.get(name, 0.0)
        value = value if isinstance(value, torch.Tensor) else torch.tensor(float(value), dtype=DTYPE)
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"loss component {name!r} is not finite")
        total = total + weights.get(name, 1.0) * value
        parts[name] = float(value.detach())
    return LossBreakdown(total, parts)
