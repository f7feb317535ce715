"""Composite extraction model: encoder + flow synthesizer + text decoder.

Bundles the three networks with the shared feature/tokenizer/embedder
configuration, checks cross-module dimension agreement, and provides the
end-to-end inference paths (extraction and transcription).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .audio import (
    FeatureConfig,
    LogMelSpectrogram,
    VocoderConfig,
    Waveform,
    compute_log_mel,
    vocode,
)
from .decoder import DecoderConfig, TextDecoder
from .encoder import EncoderConfig, PromptSwitches, TargetEncoder
from .errors import ConfigError
from .flow import FlowConditioning, FlowConfig, VectorFieldNet, sample_flow, upsample_tokens
from .speaker import SpeakerEmbedder, create_embedder
from .text import CharTokenizer


def mel_tensor(w: Waveform, cfg: FeatureConfig) -> torch.Tensor:
    """Log-mel feature tensor (n_mels, T), float32."""
    return torch.from_numpy(compute_log_mel(w, cfg).values)


@dataclass
class ModelBundle:
    features: FeatureConfig
    vocoder: VocoderConfig
    tokenizer: CharTokenizer
    embedder: SpeakerEmbedder
    encoder: TargetEncoder
    flow: VectorFieldNet
    decoder: TextDecoder

    def validate(self):
        enc, dec, flw = self.encoder.cfg, self.decoder.cfg, self.flow.cfg
        if enc.n_mels != self.features.n_mels:
            raise ConfigError("encoder n_mels must match the feature config")
        if flw.mel_dim != self.features.n_mels:
            raise ConfigError("flow mel_dim must match the feature config")
        if flw.token_dim != enc.d_model:
            raise ConfigError("flow token_dim must match encoder d_model")
        if dec.d_model != enc.d_model:
            raise ConfigError("decoder d_model must match encoder d_model")
        if flw.spk_embed_dim != enc.spk_embed_dim or self.embedder.dim != enc.spk_embed_dim:
            raise ConfigError("speaker embedding dims disagree across modules")
        if dec.vocab_size != self.tokenizer.vocab_size:
            raise ConfigError("decoder vocab must match the tokenizer")

    def eval_mode(self) -> "ModelBundle":
        for m in (self.encoder, self.flow, self.decoder):
            m.eval()
        return self

    # -- end-to-end paths ---------------------------------------------------

    def speech_tokens(
        self,
        mixture: Waveform,
        enrollment: Waveform,
        switches: PromptSwitches | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Prompted encoding of one mixture; returns (tokens (L, d), spk_emb)."""
        mix_mel = mel_tensor(mixture, self.features)
        enroll_mel = mel_tensor(enrollment, self.features)
        spk = torch.from_numpy(np.asarray(self.embedder.embed(enrollment), dtype=np.float32))
        tokens = self.encoder.encode_target(mix_mel, enroll_mel, spk, switches)
        return tokens, spk

    def extract(
        self,
        mixture: Waveform,
        enrollment: Waveform,
        n_steps: int | None = None,
        rng: torch.Generator | None = None,
        switches: PromptSwitches | None = None,
    ) -> tuple[Waveform, LogMelSpectrogram]:
        """Mixture + enrollment -> extracted target waveform (and its mel)."""
        if rng is None:
            rng = torch.Generator().manual_seed(0)
        n_steps = n_steps or self.flow.cfg.sample_steps
        with torch.no_grad():
            tokens, spk = self.speech_tokens(mixture, enrollment, switches)
            n_frames = mel_tensor(mixture, self.features).shape[-1]
            cond = FlowConditioning(
                tokens=upsample_tokens(tokens.T, n_frames, self.flow.cfg.upsample_mode),
                speaker=spk,
            )
            mel_values = sample_flow(
                self.flow, cond, n_steps, rng, solver=self.flow.cfg.solver
            )
        mel = LogMelSpectrogram(
            values=mel_values.numpy().astype(np.float32),
            frame_hop=self.features.frame_hop,
            frame_len=self.features.frame_len,
            sample_rate=self.features.sample_rate,
        )
        return vocode(mel, self.vocoder), mel

    def transcribe(self, w: Waveform, max_len: int = 200) -> str:
        """Unprompted ASR pass over a single waveform (base encoder + decoder)."""
        with torch.no_grad():
            tokens = self.encoder.encode_base(mel_tensor(w, self.features))
            result = self.decoder.greedy_decode(tokens, max_len=max_len)
        return self.tokenizer.decode(result.body)


def build_bundle(
    features: FeatureConfig,
    encoder_cfg: EncoderConfig,
    decoder_cfg: DecoderConfig,
    flow_cfg: FlowConfig,
    tokenizer: CharTokenizer | None = None,
    embedder_name: str = "mel-stats",
    vocoder: VocoderConfig | None = None,
    init_seed: int | None = None,
) -> ModelBundle:
    """Construct all networks (optionally under a fixed init seed) and validate."""
    if init_seed is not None:
        torch.manual_seed(init_seed)
    tokenizer = tokenizer or CharTokenizer()
    bundle = ModelBundle(
        features=features,
        vocoder=vocoder or VocoderConfig(features=features),
        tokenizer=tokenizer,
        embedder=create_embedder(embedder_name, features, dim=encoder_cfg.spk_embed_dim),
        encoder=TargetEncoder(encoder_cfg),
        flow=VectorFieldNet(flow_cfg),
        decoder=TextDecoder(decoder_cfg),
    )
    bundle.validate()
    return bundle
