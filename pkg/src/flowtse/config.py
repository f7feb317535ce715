"""Merged run configuration: one document covering every module.

Every field has a default; files are JSON with nested sections. Unknown keys
are rejected at every level. The canonical serialization is hashed into a
fingerprint that is written next to all produced artifacts, so any output can
be traced back to the exact configuration (plus seed) that made it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .audio import FeatureConfig, VocoderConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .flow import FlowConfig
from .model import ModelBundle, build_bundle
from .text import DEFAULT_ALPHABET, CharTokenizer
from .training import AblationSwitches, TrainConfig

ENV_OUT_ROOT = "FLOWTSE_OUT_ROOT"
ENV_CACHE_ROOT = "FLOWTSE_CACHE_ROOT"


@dataclass
class EncoderSettings:
    d_model: int = 768
    n_layers: int = 4
    n_heads: int = 8
    max_positions: int = 3000
    max_enroll_positions: int = 600
    spk_embed_dim: int = 64
    lora_rank: int = 16
    lora_targets: tuple[str, ...] = ("query", "key", "value", "output")


@dataclass
class DecoderSettings:
    n_layers: int = 4
    n_heads: int = 8
    max_text_positions: int = 256


@dataclass
class FlowSettings:
    width: int = 128
    depth: int = 4
    time_embed_dim: int = 64
    sigma: float = 1e-4
    sample_steps: int = 10
    solver: str = "euler"
    upsample_mode: str = "repeat"


@dataclass
class VocoderSettings:
    n_iters: int = 32


@dataclass
class TokenizerSettings:
    alphabet: str = DEFAULT_ALPHABET


@dataclass
class EmbedderSettings:
    name: str = "mel-stats"
    seed: int = 7


@dataclass
class PathsSettings:
    out_root: str = "."
    cache_root: str = ".flowtse-cache"


@dataclass
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    decoder: DecoderSettings = field(default_factory=DecoderSettings)
    flow: FlowSettings = field(default_factory=FlowSettings)
    vocoder: VocoderSettings = field(default_factory=VocoderSettings)
    tokenizer: TokenizerSettings = field(default_factory=TokenizerSettings)
    embedder: EmbedderSettings = field(default_factory=EmbedderSettings)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsSettings = field(default_factory=PathsSettings)

    # -- (de)serialization ------------------------------------------------

    def to_dict(self) -> dict:
        return _normalize(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, path="config")

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        """Config file -> env -> defaults (CLI overrides applied by callers)."""
        if path is None:
            cfg = cls()
        else:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                data = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            cfg = cls.from_dict(data)
        if os.environ.get(ENV_OUT_ROOT):
            cfg.paths.out_root = os.environ[ENV_OUT_ROOT]
        if os.environ.get(ENV_CACHE_ROOT):
            cfg.paths.cache_root = os.environ[ENV_CACHE_ROOT]
        return cfg

    # -- module-config assembly --------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(
            n_mels=self.features.n_mels,
            d_model=e.d_model,
            n_layers=e.n_layers,
            n_heads=e.n_heads,
            max_positions=e.max_positions,
            max_enroll_positions=e.max_enroll_positions,
            spk_embed_dim=e.spk_embed_dim,
            lora_rank=e.lora_rank,
            lora_targets=tuple(e.lora_targets),
        )

    def decoder_config(self, vocab_size: int) -> DecoderConfig:
        d = self.decoder
        return DecoderConfig(
            vocab_size=vocab_size,
            d_model=self.encoder.d_model,
            n_layers=d.n_layers,
            n_heads=d.n_heads,
            max_text_positions=d.max_text_positions,
        )

    def flow_config(self) -> FlowConfig:
        f = self.flow
        return FlowConfig(
            mel_dim=self.features.n_mels,
            token_dim=self.encoder.d_model,
            spk_embed_dim=self.encoder.spk_embed_dim,
            width=f.width,
            depth=f.depth,
            time_embed_dim=f.time_embed_dim,
            sigma=f.sigma,
            sample_steps=f.sample_steps,
            solver=f.solver,
            upsample_mode=f.upsample_mode,
        )

    def build(self, init_seed: int | None = None) -> ModelBundle:
        tokenizer = CharTokenizer(alphabet=self.tokenizer.alphabet)
        return build_bundle(
            features=self.features,
            encoder_cfg=self.encoder_config(),
            decoder_cfg=self.decoder_config(tokenizer.vocab_size),
            flow_cfg=self.flow_config(),
            tokenizer=tokenizer,
            embedder_name=self.embedder.name,
            vocoder=VocoderConfig(features=self.features, n_iters=self.vocoder.n_iters),
            init_seed=init_seed,
        )


def _normalize(value):
    """JSON-stable normal form: tuples -> lists, floats kept as-is."""
    if isinstance(value, dict):
        return {k: _normalize(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    return value


def _from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        value = data[name]
        if dataclasses.is_dataclass(f.type) or f.type in _SECTION_TYPES:
            kwargs[name] = _from_dict(_SECTION_TYPES.get(f.type, f.type), value, f"{path}.{name}")
        elif name == "ablations":
            kwargs[name] = _from_dict(AblationSwitches, value, f"{path}.{name}")
        elif isinstance(value, list) and name in ("lora_targets", "betas"):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


# dataclass field types arrive as strings under `from __future__ import
# annotations`; map the section names back to their classes
_SECTION_TYPES = {
    "FeatureConfig": FeatureConfig,
    "EncoderSettings": EncoderSettings,
    "DecoderSettings": DecoderSettings,
    "FlowSettings": FlowSettings,
    "VocoderSettings": VocoderSettings,
    "TokenizerSettings": TokenizerSettings,
    "EmbedderSettings": EmbedderSettings,
    "TrainConfig": TrainConfig,
    "PathsSettings": PathsSettings,
    "AblationSwitches": AblationSwitches,
}
