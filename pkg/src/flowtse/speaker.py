"""Speaker embedding extraction.

The built-in embedder is deliberately lightweight: per-band mean and standard
deviation of the log-mel spectrogram pushed through a fixed random projection,
L2-normalized. It carries no trainable parameters, so the joint-training
freezing contract is unaffected; the learnable alignment to the encoder width
lives in the encoder's speaker projection. External pre-trained embedders can
be registered behind the same interface.
"""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np

from .audio import FeatureConfig, Waveform, compute_log_mel
from .errors import ConfigError


class SpeakerEmbedder(Protocol):
    dim: int

    def embed(self, w: Waveform) -> np.ndarray: ...


class MelStatsEmbedder:
    """Fixed random projection of log-mel mean/std statistics."""

    def __init__(self, features: FeatureConfig, dim: int = 64, seed: int = 7):
        self.features = features
        self.dim = dim
        rng = np.random.default_rng(seed)
        n_stats = 2 * features.n_mels
        self._proj = rng.standard_normal((dim, n_stats)) / np.sqrt(n_stats)

    def embed(self, w: Waveform) -> np.ndarray:
        mel = compute_log_mel(w, self.features).values.astype(np.float64)
        stats = np.concatenate([mel.mean(axis=1), mel.std(axis=1)])
        v = self._proj @ stats
        norm = np.linalg.norm(v)
        return (v / norm if norm > 0 else v).astype(np.float32)


_REGISTRY: dict[str, Callable[..., SpeakerEmbedder]] = {
    "mel-stats": MelStatsEmbedder,
}


def register_embedder(name: str, factory: Callable[..., SpeakerEmbedder]):
    _REGISTRY[name] = factory


def create_embedder(name: str, features: FeatureConfig, **kwargs) -> SpeakerEmbedder:
    if name not in _REGISTRY:
        raise ConfigError(
            f"unknown speaker embedder {name!r}; registered: {sorted(_REGISTRY)}"
        )
    return _REGISTRY[name](features, **kwargs)
