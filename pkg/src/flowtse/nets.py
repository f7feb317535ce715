"""Small shared neural-net utilities."""

from __future__ import annotations

import math

import torch


def sinusoid_table(n_positions: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Interleaved sin/cos positional table, shape (n_positions, dim)."""
    table = torch.zeros(n_positions, dim, dtype=dtype)
    pos = torch.arange(n_positions, dtype=dtype).unsqueeze(1)
    n_freq = (dim + 1) // 2
    inv_freq = torch.exp(
        -math.log(10000.0) * torch.arange(n_freq, dtype=dtype) / max(n_freq, 1)
    )
    angles = pos * inv_freq.unsqueeze(0)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return table


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of scalar times t in [0, 1], shape (len(t), dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / max(half, 1)
    )
    args = t.reshape(-1, 1) * freqs.unsqueeze(0) * 1000.0  # spread t over the table's range
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb
