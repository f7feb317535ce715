"""Flow-matching mel-spectrogram synthesizer.

Training regresses a time-conditioned vector field onto the constant
displacement field of a straight-line (optimal-transport) path between a
standard-normal draw and a data spectrogram. Sampling integrates the learned
field from t=0 to t=1 with a fixed-step solver, conditioned on the encoder's
target speech tokens (upsampled to the mel frame rate) and the speaker
embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError, NumericError
from .nets import timestep_embedding

DEFAULT_SIGMA = 1e-4


@dataclass(frozen=True)
class FlowConfig:
    mel_dim: int = 80
    token_dim: int = 768  # must match the encoder's d_model
    spk_embed_dim: int = 64
    width: int = 128
    depth: int = 4
    time_embed_dim: int = 64
    sigma: float = DEFAULT_SIGMA
    sample_steps: int = 10
    solver: str = "euler"  # "euler" or "midpoint"
    upsample_mode: str = "repeat"  # "repeat" or "linear"


@dataclass
class FlowConditioning:
    """Per-frame conditioning: upsampled tokens plus a broadcast speaker vector.

    tokens: (batch, token_dim, n_frames); speaker: (batch, spk_embed_dim).
    """

    tokens: torch.Tensor
    speaker: torch.Tensor

    def __post_init__(self):
        if self.tokens.dim() == 2:
            self.tokens = self.tokens.unsqueeze(0)
        if self.speaker.dim() == 1:
            self.speaker = self.speaker.unsqueeze(0)

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[-1]

    def features(self) -> torch.Tensor:
        spk = self.speaker.unsqueeze(-1).expand(-1, -1, self.n_frames)
        return torch.cat([self.tokens, spk.to(self.tokens.dtype)], dim=1)


def ot_path(x0: torch.Tensor, x1: torch.Tensor, t, sigma: float = DEFAULT_SIGMA) -> torch.Tensor:
    """Point on the straight-line path: (1 - (1 - sigma) t) x0 + t x1."""
    if x0.shape != x1.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = torch.as_tensor(t, dtype=x0.dtype, device=x0.device)
    while t.dim() < x0.dim():
        t = t.unsqueeze(-1)
    return (1.0 - (1.0 - sigma) * t) * x0 + t * x1


def ot_target_field(x0: torch.Tensor, x1: torch.Tensor, sigma: float = DEFAULT_SIGMA) -> torch.Tensor:
    """Target vector field along the path: x1 - (1 - sigma) x0 (constant in t)."""
    if x0.shape != x1.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return x1 - (1.0 - sigma) * x0


def upsample_tokens(tokens: torch.Tensor, target_len: int, mode: str = "repeat") -> torch.Tensor:
    """Stretch a (..., dim, n) token sequence along time to target_len frames.

    "repeat" duplicates each token floor-evenly (an exact k-fold repeat when
    target_len is a multiple of n); "linear" interpolates with both endpoints
    kept exactly.
    """
    n = tokens.shape[-1]
    if target_len < n:
        raise InvalidInputError(f"cannot upsample {n} tokens down to {target_len} frames")
    if target_len == n:
        return tokens
    if mode == "repeat":
        idx = torch.div(
            torch.arange(target_len, device=tokens.device) * n, target_len, rounding_mode="floor"
        )
        return tokens.index_select(-1, idx)
    if mode == "linear":
        pos = torch.linspace(0, n - 1, target_len, dtype=tokens.dtype, device=tokens.device)
        lo = pos.floor().long().clamp(max=n - 1)
        hi = (lo + 1).clamp(max=n - 1)
        frac = (pos - lo.to(tokens.dtype)).to(tokens.dtype)
        return tokens.index_select(-1, lo) * (1 - frac) + tokens.index_select(-1, hi) * frac
    raise InvalidInputError(f"unknown upsample mode {mode!r}")


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, width)
        self.conv1 = nn.Conv1d(width, width, kernel_size=5, padding=2)
        self.conv2 = nn.Conv1d(width, width, kernel_size=5, padding=2)
        self.time_proj = nn.Linear(width, width)

    def forward(self, h, temb):
        r = self.conv1(F.gelu(self.norm(h)))
        r = r + self.time_proj(temb).unsqueeze(-1)
        return h + self.conv2(F.gelu(r))


class VectorFieldNet(nn.Module):
    """Time-conditioned convolutional stack predicting the transport field.

    Input and output share the mel shape (batch, mel_dim, n_frames).
    """

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        in_ch = cfg.mel_dim + cfg.token_dim + cfg.spk_embed_dim
        self.inp = nn.Conv1d(in_ch, cfg.width, kernel_size=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.width), nn.GELU(), nn.Linear(cfg.width, cfg.width)
        )
        self.blocks = nn.ModuleList(ResidualBlock(cfg.width) for _ in range(cfg.depth))
        self.out = nn.Conv1d(cfg.width, cfg.mel_dim, kernel_size=1)

    @property
    def mel_dim(self) -> int:
        return self.cfg.mel_dim

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: FlowConditioning) -> torch.Tensor:
        if x.shape[-1] != cond.n_frames:
            raise InvalidInputError(
                f"state has {x.shape[-1]} frames but conditioning has {cond.n_frames}"
            )
        temb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.cfg.time_embed_dim))
        h = self.inp(torch.cat([x, cond.features().to(x.dtype)], dim=1))
        for block in self.blocks:
            h = block(h, temb)
        return self.out(h)


def _batched(x1: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x1.dim() == 2:
        return x1.unsqueeze(0), True
    return x1, False


def _repeat_cond(cond: FlowConditioning, times: int) -> FlowConditioning:
    if times == 1:
        return cond
    return FlowConditioning(
        tokens=cond.tokens.repeat_interleave(times, dim=0),
        speaker=cond.speaker.repeat_interleave(times, dim=0),
    )


def cfm_loss(
    net,
    x1: torch.Tensor,
    cond: FlowConditioning,
    rng: torch.Generator,
    sigma: float = DEFAULT_SIGMA,
    n_mc: int = 1,
) -> torch.Tensor:
    """Monte-Carlo flow-matching loss, averaged per element.

    Draws t ~ Uniform[0,1] and x0 ~ N(0,I) for each of n_mc replicas of each
    item, moves to the corresponding path point, and penalizes the squared
    error between the network output and the constant target field.
    """
    if n_mc < 1:
        raise InvalidInputError("n_mc must be >= 1")
    x1, _ = _batched(x1)
    x1r = x1.repeat_interleave(n_mc, dim=0)
    condr = _repeat_cond(cond, n_mc)
    t = torch.rand(x1r.shape[0], generator=rng, dtype=x1.dtype, device=x1.device)
    x0 = torch.empty_like(x1r).normal_(generator=rng)
    xt = ot_path(x0, x1r, t, sigma)
    u = ot_target_field(x0, x1r, sigma)
    v = net(xt, t, condr)
    if not torch.isfinite(v).all():
        raise NumericError("vector field produced non-finite values")
    return ((v - u) ** 2).mean()


def sample_flow(
    net,
    cond: FlowConditioning,
    n_steps: int,
    rng: torch.Generator,
    sigma: float = DEFAULT_SIGMA,
    x0: torch.Tensor | None = None,
    solver: str = "euler",
) -> torch.Tensor:
    """Integrate the learned field from a prior draw to a mel spectrogram.

    Fixed-step integration from t=0 to t=1; deterministic given rng state and
    step count. x0 may be supplied to pin the starting point. sigma is part of
    the trained field and does not enter the integrator. Returns
    (batch, mel_dim, n_frames), squeezed if the conditioning was unbatched.
    """
    del sigma
    if n_steps < 1:
        raise InvalidInputError("n_steps must be >= 1")
    if solver not in ("euler", "midpoint"):
        raise InvalidInputError(f"unknown solver {solver!r}")
    squeeze = cond.tokens.shape[0] == 1
    batch = cond.tokens.shape[0]
    shape = (batch, net.mel_dim, cond.n_frames)
    if x0 is None:
        dtype = next(net.parameters()).dtype if isinstance(net, nn.Module) else torch.float32
        x = torch.empty(shape, dtype=dtype).normal_(generator=rng)
    else:
        x, _ = _batched(x0)
        if tuple(x.shape) != shape:
            raise InvalidInputError(f"x0 shape {tuple(x0.shape)} does not match {shape}")
        x = x.clone()
    dt = 1.0 / n_steps
    for step in range(n_steps):
        t0 = step * dt
        tv = torch.full((batch,), t0, dtype=x.dtype, device=x.device)
        if solver == "euler":
            dx = net(x, tv, cond)
        else:
            half = x + 0.5 * dt * net(x, tv, cond)
            dx = net(half, tv + 0.5 * dt, cond)
        x = x + dt * dx
        if not torch.isfinite(x).all():
            raise NumericError(f"flow state became non-finite at step {step + 1}/{n_steps}")
    return x.squeeze(0) if squeeze else x
