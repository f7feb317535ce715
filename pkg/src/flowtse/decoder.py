"""Autoregressive text decoder over transcript tokens.

Causal self-attention over the token prefix, cross-attention to the target
speech tokens, tied input/output embeddings. Supplies the transcription
cross-entropy used as auxiliary supervision during joint training, and greedy
decoding for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, InvalidInputError
from .text import CONDITION_IDS, EOT_ID, TranscriptTokens


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    d_model: int = 768
    n_layers: int = 4
    n_heads: int = 8
    max_text_positions: int = 256

    def validate(self):
        if self.vocab_size < 5:
            raise InvalidInputError("vocab must cover 4 condition ids plus EOT")
        if self.d_model % self.n_heads != 0:
            raise InvalidInputError("d_model must be divisible by n_heads")


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.output = nn.Linear(d, d)

    def forward(self, x):
        b, n, d = x.shape
        hd = d // self.n_heads
        q = self.query(x).view(b, n, self.n_heads, hd).transpose(1, 2)
        k = self.key(x).view(b, n, self.n_heads, hd).transpose(1, 2)
        v = self.value(x).view(b, n, self.n_heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / hd**0.5
        mask = torch.full((n, n), float("-inf"), dtype=x.dtype, device=x.device).triu(1)
        att = torch.softmax(scores + mask, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.output(out)


class CrossAttention(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.output = nn.Linear(d, d)

    def forward(self, x, memory):
        b, n, d = x.shape
        m = memory.shape[1]
        hd = d // self.n_heads
        q = self.query(x).view(b, n, self.n_heads, hd).transpose(1, 2)
        k = self.key(memory).view(b, m, self.n_heads, hd).transpose(1, 2)
        v = self.value(memory).view(b, m, self.n_heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / hd**0.5, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.output(out)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.d_model
        self.ln_self = nn.LayerNorm(d)
        self.self_attn = CausalSelfAttention(cfg)
        self.ln_cross = nn.LayerNorm(d)
        self.cross_attn = CrossAttention(cfg)
        self.ln_mlp = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x, memory):
        x = x + self.self_attn(self.ln_self(x))
        x = x + self.cross_attn(self.ln_cross(x), memory)
        return x + self.mlp(self.ln_mlp(x))


class TextDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_embed = nn.Parameter(0.01 * torch.randn(cfg.max_text_positions, cfg.d_model))
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_post = nn.LayerNorm(cfg.d_model)

    def forward(self, memory: torch.Tensor, prefix_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits. memory: (b, L, d); prefix_ids: (b, P) int64.

        Row j of the output parameterizes the distribution of token j+1 given
        the prefix up to j and the speech tokens. Output: (b, P, V).
        """
        if prefix_ids.dim() == 1:
            prefix_ids = prefix_ids.unsqueeze(0)
        if memory.dim() == 2:
            memory = memory.unsqueeze(0)
        n = prefix_ids.shape[1]
        if n > self.cfg.max_text_positions:
            raise CapacityError(
                f"prefix length {n} exceeds text positional capacity {self.cfg.max_text_positions}"
            )
        if int(prefix_ids.max()) >= self.cfg.vocab_size or int(prefix_ids.min()) < 0:
            raise InvalidInputError("prefix contains out-of-vocabulary token ids")
        x = self.tok_embed(prefix_ids) + self.pos_embed[:n].to(self.tok_embed.weight.dtype)
        for block in self.blocks:
            x = block(x, memory)
        x = self.ln_post(x)
        return x @ self.tok_embed.weight.T

    def decode_logits(self, speech_tokens: torch.Tensor, prefix: TranscriptTokens) -> torch.Tensor:
        """Logits for one prefix, shape (len(condition) + len(body), V)."""
        if tuple(prefix.condition) != CONDITION_IDS:
            raise InvalidInputError("prefix must start with the standard condition tokens")
        ids = torch.tensor(prefix.prefix_ids(), dtype=torch.long)
        return self.forward(speech_tokens, ids).squeeze(0)

    @torch.no_grad()
    def greedy_decode(self, speech_tokens: torch.Tensor, max_len: int = 200) -> TranscriptTokens:
        """Argmax decoding from the condition prefix until EOT or max_len."""
        body: list[int] = []
        capacity = self.cfg.max_text_positions - len(CONDITION_IDS)
        if max_len > capacity:
            raise CapacityError(f"max_len {max_len} exceeds capacity {capacity}")
        for _ in range(max_len):
            logits = self.decode_logits(speech_tokens, TranscriptTokens(body=body))
            nxt = int(logits[-1].argmax())
            if nxt == EOT_ID:
                return TranscriptTokens(body=body, truncated=False)
            body.append(nxt)
        return TranscriptTokens(body=body, truncated=True)


def ce_loss(logits: torch.Tensor, targets: TranscriptTokens, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of the transcript body plus the end token.

    Condition-token positions carry no loss; row len(condition)-1 predicts the
    first body token and the final row predicts EOT. Mean reduction divides by
    the number of predicted tokens (body + EOT); "sum" skips the division.
    """
    if reduction not in ("mean", "sum"):
        raise InvalidInputError(f"unknown reduction {reduction!r}")
    n_cond = len(targets.condition)
    predicted = list(targets.body) + [targets.eot]
    if logits.dim() != 2 or logits.shape[0] != n_cond + len(targets.body):
        raise InvalidInputError(
            f"expected {n_cond + len(targets.body)} logit rows, got {tuple(logits.shape)}"
        )
    vocab = logits.shape[1]
    if any(not 0 <= t < vocab for t in predicted):
        raise InvalidInputError("target id outside vocabulary")
    rows = logits[n_cond - 1 :]
    logp = F.log_softmax(rows, dim=-1)
    nll = -logp[torch.arange(len(predicted)), torch.tensor(predicted)]
    return nll.mean() if reduction == "mean" else nll.sum()


def batch_ce_loss(
    decoder: TextDecoder,
    memory: torch.Tensor,
    transcripts: list[TranscriptTokens],
    reduction: str = "mean",
) -> torch.Tensor:
    """Teacher-forced loss over a padded batch; padded positions carry no loss.

    memory: (b, L, d) speech tokens aligned with transcripts.
    """
    n_cond = len(CONDITION_IDS)
    lengths = [len(t.body) for t in transcripts]
    width = n_cond + max(lengths)
    prefix = torch.full((len(transcripts), width), EOT_ID, dtype=torch.long)
    labels = torch.full((len(transcripts), width), -100, dtype=torch.long)
    for i, t in enumerate(transcripts):
        ids = t.prefix_ids()
        prefix[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        predicted = list(t.body) + [t.eot]
        labels[i, n_cond - 1 : n_cond - 1 + len(predicted)] = torch.tensor(predicted)
    logits = decoder(memory, prefix)
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
        ignore_index=-100, reduction=reduction,
    )
