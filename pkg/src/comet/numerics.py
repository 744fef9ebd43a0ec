"""Differentiable building blocks plus a finite-difference gradient oracle.

Everything runs in float64 on CPU. Autograd is delegated to torch; the
oracle below only ever evaluates forward passes on numpy arrays so it stays
independent of the machinery it checks.
"""

from __future__ import annotations

import math
import zlib
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64

ParamSet = dict[str, np.ndarray]


class DimensionError(ValueError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings."""
    words = [zlib.crc32(str(p).encode()) if not isinstance(p, int) else p & 0xFFFFFFFF for p in parts]
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(*parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen


def as_sequence(x, dim: int | None = None) -> torch.Tensor:
    """Validate a T x D feature sequence (or a batch of them)."""
    t = torch.as_tensor(x, dtype=DTYPE)
    if t.ndim < 2 or t.shape[-2] < 1 or t.shape[-1] < 1:
        raise DimensionError(f"expected (..., T>=1, D>=1), got {tuple(t.shape)}")
    if dim is not None and t.shape[-1] != dim:
        raise DimensionError(f"expected feature dim {dim}, got {t.shape[-1]}")
    if not torch.isfinite(t).all():
        raise ValueError("feature sequence has non-finite entries")
    return t


def affine(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"affine shapes incompatible: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}"
        )
    return x @ W.T + b


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    ex = torch.exp(shifted)
    return ex / ex.sum(dim=dim, keepdim=True)


def log_softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("log_softmax of an empty vector")
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def init_linear_(layer: nn.Linear, gen: torch.Generator, gain: float = 1.0) -> nn.Linear:
    bound = gain / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        if layer.bias is not None:
            layer.bias.zero_()
    return layer


def linear(d_in: int, d_out: int, gen: torch.Generator | None = None, bias: bool = True, gain: float = 1.0) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, bias=bias, dtype=DTYPE)
    if gen is not None:
        init_linear_(layer, gen, gain)
    return layer


class GatedRecurrentCell(nn.Module):
    """Single-gate recurrence.

    u_t = sigmoid(W_u [z_t, c_{t-1}] + b_u)
    c_t = (1 - u_t) c_{t-1} + u_t tanh(W_c [z_t, c_{t-1}] + b_c)
    """

    def __init__(self, in_dim: int, ctx_dim: int, gen: torch.Generator | None = None):
        super().__init__()
        self.in_dim = in_dim
        self.ctx_dim = ctx_dim
        self.update = linear(in_dim + ctx_dim, ctx_dim, gen)
        self.candidate = linear(in_dim + ctx_dim, ctx_dim, gen)

    def step(self, z_t: torch.Tensor, c_prev: torch.Tensor) -> torch.Tensor:
        joined = torch.cat([z_t, c_prev], dim=-1)
        u = torch.sigmoid(self.update(joined))
        cand = torch.tanh(self.candidate(joined))
        return (1 - u) * c_prev + u * cand

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim:
            raise DimensionError(f"recurrence expects input dim {self.in_dim}, got {z.shape[-1]}")
        d = self.in_dim
        W = torch.cat([self.update.weight, self.candidate.weight], dim=0)
        b = torch.cat([self.update.bias, self.candidate.bias], dim=0)
        # input projections for all steps at once; only the recurrent part loops
        pre = z @ W[:, :d].T + b
        R = W[:, d:].T
        c = z.new_zeros(*z.shape[:-2], self.ctx_dim)
        out = []
        for t in range(z.shape[-2]):
            g = pre[..., t, :] + c @ R
            u = torch.sigmoid(g[..., : self.ctx_dim])
            c = c + u * (torch.tanh(g[..., self.ctx_dim :]) - c)
            out.append(c)
        return torch.stack(out, dim=-2)


def recurrent_summarize(z: torch.Tensor, cell: GatedRecurrentCell) -> torch.Tensor:
    """Causal contexts c_1..c_T; c_t depends on z_1..z_t only."""
    if z.shape[-2] < 1:
        raise DimensionError("empty sequence")
    return cell(z)


def cross_attention(query: torch.Tensor, key_value: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention with key_value serving as both keys and values."""
    if key_value.shape[-2] == 0:
        raise ValueError("cross_attention needs at least one key/value row")
    if query.shape[-1] != key_value.shape[-1]:
        raise DimensionError(f"query dim {query.shape[-1]} != key dim {key_value.shape[-1]}")
    scores = query @ key_value.transpose(-1, -2) / math.sqrt(query.shape[-1])
    return softmax(scores, dim=-1) @ key_value


def finite_difference_gradient(f: Callable[[ParamSet], float], theta: Mapping[str, np.ndarray], h: float = 1e-4) -> ParamSet:
    """Central differences (f(θ+h e_i) - f(θ-h e_i)) / 2h, coordinate by coordinate."""
    if h <= 0:
        raise ValueError("step size must be positive")
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in theta.items()}
    grad: ParamSet = {}
    for key, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(base))
            flat[i] = orig - h
            down = float(f(base))
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"non-finite objective while differencing {key}[{i}]")
            gflat[i] = (up - down) / (2 * h)
        grad[key] = g
    return grad


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray], floor: float = 1e-8) -> float:
    if set(analytic) != set(numeric):
        raise KeyError(f"gradient keys differ: {sorted(set(analytic) ^ set(numeric))}")
    worst = 0.0
    for key in analytic:
        a = np.asarray(analytic[key], dtype=np.float64)
        n = np.asarray(numeric[key], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def param_set(module: nn.Module, prefix: str = "") -> ParamSet:
    return {prefix + name: p.detach().numpy().copy() for name, p in module.named_parameters()}


def load_param_set(module: nn.Module, params: Mapping[str, np.ndarray], prefix: str = "") -> None:
    own = dict(module.named_parameters())
    with torch.no_grad():
        for key, value in params.items():
            name = key[len(prefix):] if prefix and key.startswith(prefix) else key
            if name not in own:
                raise KeyError(f"unknown parameter path {key}")
            target = own[name]
            if tuple(target.shape) != tuple(np.shape(value)):
                raise DimensionError(f"{key}: shape {np.shape(value)} != {tuple(target.shape)}")
            target.copy_(torch.as_tensor(value, dtype=DTYPE))
