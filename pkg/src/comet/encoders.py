"""Per-modality semantic front, specific encoder and decoder."""

from __future__ import annotations

import torch
from torch import nn

from .numerics import DimensionError, linear, torch_generator


class MLP(nn.Module):
    """Two affine layers around a zero-preserving SiLU."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, gen: torch.Generator | None = None):
        super().__init__()
        self.inp = linear(d_in, d_hidden, gen)
        self.out = linear(d_hidden, d_out, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(nn.functional.silu(self.inp(x)))


class ModalityEncoder(nn.Module):
    def __init__(self, modality: str, d_raw: int, d_sem: int, d_spec: int, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.modality = modality
        self.d_raw, self.d_sem, self.d_spec = d_raw, d_sem, d_spec
        self.front = MLP(d_raw, hidden, d_sem, torch_generator(seed, "enc", modality, "front"))
        self.specific = MLP(d_raw, hidden, d_spec, torch_generator(seed, "enc", modality, "specific"))
        self.decoder = MLP(d_sem + d_spec, hidden, d_raw, torch_generator(seed, "enc", modality, "decoder"))


def encode(x: torch.Tensor, enc: ModalityEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (h, z_bar): pre-adapter semantic features and modality-specific features."""
    if x.shape[-1] != enc.d_raw:
        raise DimensionError(f"{enc.modality} encoder expects {enc.d_raw} raw dims, got {x.shape[-1]}")
    return enc.front(x), enc.specific(x)


def decode(e_seq: torch.Tensor, z_bar: torch.Tensor, enc: ModalityEncoder) -> torch.Tensor:
    if e_seq.shape[:-1] != z_bar.shape[:-1]:
        raise DimensionError(f"code/specific length mismatch {tuple(e_seq.shape)} vs {tuple(z_bar.shape)}")
    if e_seq.shape[-1] != enc.d_sem or z_bar.shape[-1] != enc.d_spec:
        raise DimensionError("decoder input widths do not match the encoder")
    return enc.decoder(torch.cat([e_seq, z_bar], dim=-1))
