"""Shared discrete codebook with multi-modal EMA updates and stage-wise expansion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numerics import DTYPE, DimensionError, torch_generator


@dataclass
class UnifiedCodebook:
    codes: torch.Tensor  # K x D
    counts: torch.Tensor  # K, EMA cluster sizes
    volumes: torch.Tensor  # K x D, EMA sums
    gamma: float = 0.99
    frozen_prefix: int = 0  # K1 carried over from the previous stage
    eps: float = 1e-3

    @classmethod
    def initialize(
        cls, K: int, dim: int, seed: int = 0, scale=1.0, center=0.0, gamma: float = 0.99, eps: float = 1e-3
    ) -> "UnifiedCodebook":
        """Seeded Gaussian codes: center + scale * N(0, I); scale/center may be per-dimension."""
        raw = center + torch.randn(K, dim, generator=torch_generator(seed, "codebook"), dtype=DTYPE) * scale
        counts = torch.full((K,), eps, dtype=DTYPE)
        volumes = raw * eps
        # codes are always stored as volumes/counts so the ratio invariant is exact
        return cls(volumes / counts[:, None], counts, volumes, gamma, 0, eps)

    @classmethod
    def from_codes(cls, codes: torch.Tensor, gamma: float = 0.99, eps: float = 1e-3) -> "UnifiedCodebook":
        counts = torch.full((codes.shape[0],), eps, dtype=DTYPE)
        volumes = codes.to(DTYPE) * eps
        return cls(volumes / counts[:, None], counts, volumes, gamma, 0, eps)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def clone(self) -> "UnifiedCodebook":
        return UnifiedCodebook(self.codes.clone(), self.counts.clone(), self.volumes.clone(), self.gamma, self.frozen_prefix, self.eps)

    def active(self) -> torch.Tensor:
        return self.counts > self.eps


class TeacherSnapshot:
    """Read-only copy of the previous stage's final codebook."""

    def __init__(self, codes):
        arr = np.array(codes.detach().numpy() if isinstance(codes, torch.Tensor) else codes, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        self._codes = arr

    @property
    def size(self) -> int:
        return self._codes.shape[0]

    @property
    def array(self) -> np.ndarray:
        return self._codes

    @property
    def codes(self) -> torch.Tensor:
        return torch.tensor(self._codes, dtype=DTYPE)


@dataclass
class Quantized:
    indices: torch.Tensor  # (..., T) int64
    codes: torch.Tensor  # (..., T, D) straight-through: value e, gradient into z
    distances: torch.Tensor  # (..., T) squared distance to the chosen code


def nearest(z: torch.Tensor, codes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if codes.shape[0] == 0:
        raise ValueError("empty codebook")
    if z.shape[-1] != codes.shape[-1]:
        raise DimensionError(f"feature dim {z.shape[-1]} != code dim {codes.shape[-1]}")
    flat = z.detach().reshape(-1, z.shape[-1])
    # cdist without the matmul shortcut compares true differences; sqrt is monotone
    # and correctly rounded, so equal squared distances stay tied. argmin returns
    # the first minimum -> ties go to the lowest index
    d = torch.cdist(flat, codes, compute_mode="donot_use_mm_for_euclid_dist")
    idx = torch.argmin(d, dim=-1).reshape(z.shape[:-1])
    return idx, ((z.detach() - codes[idx]) ** 2).sum(-1)


def quantize(z: torch.Tensor, cb: UnifiedCodebook) -> Quantized:
    idx, dist = nearest(z, cb.codes)
    e = cb.codes[idx]
    return Quantized(idx, z + (e - z).detach(), dist)


def commitment_loss(z: torch.Tensor, e_seq: torch.Tensor, beta: float, per_example: bool = False) -> torch.Tensor:
    """beta * mean_t ||z_t - sg(e_t)||^2."""
    if z.shape != e_seq.shape:
        raise DimensionError("commitment shapes differ")
    sq = ((z - e_seq.detach()) ** 2).sum(-1)
    if per_example:
        return beta * sq.reshape(sq.shape[0], -1).mean(-1)
    return beta * sq.mean()


def mm_ema_update(
    cb: UnifiedCodebook,
    z_a: torch.Tensor,
    idx_a: torch.Tensor,
    z_b: torch.Tensor,
    idx_b: torch.Tensor,
    r_b: torch.Tensor,
    r_a: torch.Tensor,
) -> UnifiedCodebook:
    """In-place multi-modal EMA step.

    r_b holds the cross-attention output queried by modality a (aligned with
    z_a rows); r_a is the symmetric counterpart aligned with z_b.
    """
    if r_b.shape != z_a.shape or r_a.shape != z_b.shape:
        raise DimensionError("cross-attention intermediaries are not aligned with the feature rows")
    K, D = cb.codes.shape
    za, zb = z_a.detach().reshape(-1, D), z_b.detach().reshape(-1, D)
    rb, ra = r_b.detach().reshape(-1, D), r_a.detach().reshape(-1, D)
    ia, ib = idx_a.reshape(-1), idx_b.reshape(-1)
    if ia.shape[0] != za.shape[0] or ib.shape[0] != zb.shape[0]:
        raise DimensionError("index count does not match feature rows")
    n = torch.bincount(ia, minlength=K).to(DTYPE) + torch.bincount(ib, minlength=K).to(DTYPE)
    sums = torch.zeros(K, D, dtype=DTYPE)
    sums.index_add_(0, ia, (za + rb) / 2)
    sums.index_add_(0, ib, (zb + ra) / 2)
    g = cb.gamma
    cb.counts = g * cb.counts + (1 - g) * n
    cb.volumes = g * cb.volumes + (1 - g) * sums
    touched = (n > 0) & (cb.counts > cb.eps)
    if touched.any():
        codes = cb.codes.clone()
        codes[touched] = cb.volumes[touched] / cb.counts[touched, None]
        cb.codes = codes
    return cb


def expand(prev: UnifiedCodebook, K2: int, init_seed: int) -> tuple[UnifiedCodebook, TeacherSnapshot]:
    """Copy prev verbatim into rows [0, K1) and append K2 seeded rows."""
    if K2 < 0:
        raise ValueError("K2 must be non-negative")
    teacher = TeacherSnapshot(prev.codes)
    K1 = prev.size
    mask = prev.active()
    ref = prev.codes[mask] if mask.any() else prev.codes
    center = ref.mean(0)
    spread = ref.std() if ref.shape[0] > 1 else torch.tensor(1.0, dtype=DTYPE)
    raw = center + spread * torch.randn(K2, prev.dim, generator=torch_generator(init_seed, "expand"), dtype=DTYPE)
    new_counts = torch.full((K2,), prev.eps, dtype=DTYPE)
    new_vol = raw * prev.eps
    cb = UnifiedCodebook(
        torch.cat([prev.codes.clone(), new_vol / new_counts[:, None]]),
        torch.cat([prev.counts.clone(), new_counts]),
        torch.cat([prev.volumes.clone(), new_vol]),
        prev.gamma,
        K1,
        prev.eps,
    )
    return cb, teacher


@dataclass
class CodeActivation:
    code: int
    counts: dict[str, int]
    effective: dict[str, bool]

    @property
    def n_modalities(self) -> int:
        return sum(self.effective.values())

    @property
    def klass(self) -> int:
        """0, 1, 2 or 3 (three or more modalities)."""
        return min(self.n_modalities, 3)


def activation_stats(K: int, indices: dict[str, np.ndarray], threshold: float = 1e-3) -> list[CodeActivation]:
    """A code is effective for a modality if selected more than threshold * (its timesteps)."""
    counts = {m: np.bincount(np.asarray(ix).reshape(-1), minlength=K)[:K] for m, ix in indices.items()}
    limits = {m: threshold * np.asarray(ix).size for m, ix in indices.items()}
    return [
        CodeActivation(
            k,
            {m: int(c[k]) for m, c in counts.items()},
            {m: bool(c[k] > limits[m]) for m, c in counts.items()},
        )
        for k in range(K)
    ]
