"""Shared target speech encoder.

A transformer encoder over log-mel frames with a two-layer convolutional
frontend (second conv strided by 2, so the token rate is half the frame
rate). For target extraction the encoder is prompted: a learnable positional
table marks the enrollment segment, the enrollment and mixture spectrograms
are concatenated along time before the conv frontend, and a projected speaker
embedding is prepended as one extra token. Adaptation of the pre-trained
weights happens through low-rank (LoRA) updates on the attention projections;
only those updates, the enrollment positional table, and the speaker
projection are trainable in the extraction stage.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .arrays import archive_fingerprint, load_archive, save_archive
from .errors import CapacityError, CheckpointError, InvalidInputError
from .nets import sinusoid_table

LORA_TARGET_NAMES = ("query", "key", "value", "output")


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 80
    d_model: int = 768
    n_layers: int = 4
    n_heads: int = 8
    max_positions: int = 3000
    max_enroll_positions: int = 600
    spk_embed_dim: int = 64
    lora_rank: int = 16
    lora_targets: tuple[str, ...] = LORA_TARGET_NAMES

    def validate(self):
        if self.d_model % self.n_heads != 0:
            raise InvalidInputError("d_model must be divisible by n_heads")
        if not 0 <= self.lora_rank <= self.d_model:
            raise InvalidInputError("lora_rank must be in [0, d_model]")
        bad = set(self.lora_targets) - set(LORA_TARGET_NAMES)
        if bad:
            raise InvalidInputError(f"unknown lora targets: {sorted(bad)}")


@dataclass
class PromptSwitches:
    """Ablation switches for the two prompting cues."""

    use_speaker: bool = True
    use_enrollment: bool = True


class LoRALinear(nn.Module):
    """Linear layer with an additive low-rank update (rank 0 = plain linear).

    The base weight stays untouched; the effective weight is
    W0 + scaling * B @ A. A starts small-random, B starts at zero, so a fresh
    adapter reproduces the base layer exactly.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, scaling: float = 1.0):
        super().__init__()
        self.base = nn.Linear(d_in, d_out)
        self.rank = rank
        self.scaling = scaling
        self.enabled = True
        self.merged = False
        if rank > 0:
            self.lora_A = nn.Parameter(torch.empty(rank, d_in).uniform_(-0.01, 0.01))
            self.lora_B = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x):
        y = self.base(x)
        if self.rank > 0 and self.enabled and not self.merged:
            y = y + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)
        return y

    def merge(self):
        if self.rank == 0:
            return
        if self.merged:
            raise InvalidInputError("LoRA update already merged into the base weight")
        with torch.no_grad():
            self.base.weight += self.scaling * self.lora_B @ self.lora_A
        self.merged = True


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        d = cfg.d_model

        def proj(name):
            rank = cfg.lora_rank if name in cfg.lora_targets else 0
            return LoRALinear(d, d, rank)

        self.query = proj("query")
        self.key = proj("key")
        self.value = proj("value")
        self.output = proj("output")

    def forward(self, x):
        b, n, d = x.shape
        hd = d // self.n_heads
        q = self.query(x).view(b, n, self.n_heads, hd).transpose(1, 2)
        k = self.key(x).view(b, n, self.n_heads, hd).transpose(1, 2)
        v = self.value(x).view(b, n, self.n_heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / hd**0.5, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.output(out)


class EncoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.ln_attn = nn.LayerNorm(d)
        self.attn = SelfAttention(cfg)
        self.ln_mlp = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x):
        x = x + self.attn(self.ln_attn(x))
        return x + self.mlp(self.ln_mlp(x))


class TargetEncoder(nn.Module):
    """Base audio encoder plus the prompting additions."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.conv1 = nn.Conv1d(cfg.n_mels, cfg.d_model, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(cfg.d_model, cfg.d_model, kernel_size=3, stride=2, padding=1)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_post = nn.LayerNorm(cfg.d_model)
        # fixed positional table for the mixture; learnable one for the enrollment
        self.register_buffer(
            "pos_mixture", sinusoid_table(cfg.max_positions, cfg.n_mels), persistent=False
        )
        self.pos_enroll = nn.Parameter(
            sinusoid_table(cfg.max_enroll_positions, cfg.n_mels)
            + 0.01 * torch.randn(cfg.max_enroll_positions, cfg.n_mels)
        )
        self.spk_proj = nn.Linear(cfg.spk_embed_dim, cfg.d_model)

    # -- forward paths -------------------------------------------------

    def _check_mel(self, mel: torch.Tensor, limit: int, what: str) -> torch.Tensor:
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        if mel.shape[1] != self.cfg.n_mels:
            raise InvalidInputError(
                f"{what} has {mel.shape[1]} mel bands, encoder expects {self.cfg.n_mels}"
            )
        if mel.shape[2] > limit:
            raise CapacityError(
                f"{what} length {mel.shape[2]} exceeds positional capacity {limit}"
            )
        return mel

    def _conv_frontend(self, x: torch.Tensor) -> torch.Tensor:
        n_in = x.shape[-1]
        h = F.gelu(self.conv1(x))
        h = F.gelu(self.conv2(h))
        return h[..., : n_in // 2].transpose(1, 2)  # (b, n_in//2, d_model)

    def _transform(self, h: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            h = block(h)
        return self.ln_post(h)

    def _add_pos(self, mel: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
        return mel + table[: mel.shape[-1]].T.to(mel.dtype).unsqueeze(0)

    def encode_base(self, mel: torch.Tensor) -> torch.Tensor:
        """Unprompted encoding with the base weights only (adapters off).

        mel: (n_mels, T) or (batch, n_mels, T). Returns (batch, T//2, d_model).
        """
        squeeze = mel.dim() == 2
        mel = self._check_mel(mel, self.cfg.max_positions, "mixture")
        with self._adapters_disabled():
            h = self._transform(self._conv_frontend(self._add_pos(mel, self.pos_mixture)))
        return h.squeeze(0) if squeeze else h

    def encode_target(
        self,
        mix_mel: torch.Tensor,
        enroll_mel: torch.Tensor | None,
        spk_emb: torch.Tensor | None,
        switches: PromptSwitches | None = None,
    ) -> torch.Tensor:
        """Prompted encoding; returns only the mixture-aligned trailing tokens.

        mix_mel: (batch, n_mels, T); enroll_mel: (batch, n_mels, T');
        spk_emb: (batch, spk_embed_dim). Output: (batch, T//2, d_model),
        independent of which prompts are active.
        """
        switches = switches or PromptSwitches()
        squeeze = mix_mel.dim() == 2
        mix_mel = self._check_mel(mix_mel, self.cfg.max_positions, "mixture")
        n_mix = mix_mel.shape[-1]
        segments = []
        if switches.use_enrollment:
            if enroll_mel is None:
                raise InvalidInputError("enrollment prompt enabled but no enrollment given")
            enroll_mel = self._check_mel(
                enroll_mel, self.cfg.max_enroll_positions, "enrollment"
            )
            segments.append(self._add_pos(enroll_mel, self.pos_enroll))
        segments.append(self._add_pos(mix_mel, self.pos_mixture))
        h = self._conv_frontend(torch.cat(segments, dim=-1))
        if switches.use_speaker:
            if spk_emb is None:
                raise InvalidInputError("speaker prompt enabled but no embedding given")
            if spk_emb.dim() == 1:
                spk_emb = spk_emb.unsqueeze(0)
            token = self.spk_proj(spk_emb.to(h.dtype)).unsqueeze(1)
            h = torch.cat([token.expand(h.shape[0], -1, -1), h], dim=1)
        h = self._transform(h)
        out = h[:, h.shape[1] - n_mix // 2 :, :]
        return out.squeeze(0) if squeeze else out

    # -- adapter management ---------------------------------------------

    def _lora_layers(self):
        for m in self.modules():
            if isinstance(m, LoRALinear) and m.rank > 0:
                yield m

    @contextmanager
    def _adapters_disabled(self):
        layers = list(self._lora_layers())
        for l in layers:
            l.enabled = False
        try:
            yield
        finally:
            for l in layers:
                l.enabled = True

    def merge_lora(self) -> dict[str, torch.Tensor]:
        """Fold every low-rank update into its base weight (once)."""
        for layer in self._lora_layers():
            layer.merge()
        return {k: v for k, v in self.state_dict().items() if ".base." in k}

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        """Exactly the extraction-stage trainable set: LoRA A/B, the enrollment
        positional table, and the speaker projection."""
        out = {}
        for name, p in self.named_parameters():
            if name.endswith(("lora_A", "lora_B")) or name.startswith(("pos_enroll", "spk_proj")):
                out[name] = p
        return out

    def freeze_base(self):
        trainable = set(self.trainable_parameters())
        for name, p in self.named_parameters():
            p.requires_grad = name in trainable

    # -- persistence ------------------------------------------------------

    def _base_param_names(self):
        trainable = set(self.trainable_parameters())
        return [n for n, _ in self.named_parameters() if n not in trainable]

    def base_arrays(self) -> dict:
        sd = self.state_dict()
        return {n: sd[n].detach().cpu().numpy() for n in self._base_param_names()}

    def adapter_arrays(self) -> dict:
        return {n: p.detach().cpu().numpy() for n, p in self.trainable_parameters().items()}

    def base_fingerprint(self) -> str:
        return archive_fingerprint(self.base_arrays())

    def save_base(self, path):
        save_archive(path, self.base_arrays())

    def save_adapters(self, path):
        save_archive(path, self.adapter_arrays())

    def load_adapters(self, path):
        arrays = load_archive(path)
        self._load_named(arrays, self.trainable_parameters())

    def _load_named(self, arrays: dict, params: dict):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise CheckpointError(
                f"weight archive mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
            )
        with torch.no_grad():
            for name, p in params.items():
                arr = torch.from_numpy(arrays[name])
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(
                        f"{name!r}: archive shape {tuple(arr.shape)} != model shape {tuple(p.shape)}"
                    )
                p.copy_(arr.to(p.dtype))


def load_pretrained(weights_path, cfg: EncoderConfig) -> TargetEncoder:
    """Build an encoder from a base-weight archive.

    Base weights are loaded and frozen; LoRA adapters, the enrollment
    positional table, and the speaker projection come up fresh.
    """
    enc = TargetEncoder(cfg)
    arrays = load_archive(weights_path)
    params = {n: p for n, p in enc.named_parameters() if n in set(enc._base_param_names())}
    enc._load_named(arrays, params)
    enc.freeze_base()
    return enc
