"""Deterministic synthetic speech corpus for desk-scale experiments.

Each "speaker" is a harmonic voice (distinct fundamental and spectral tilt);
each character is rendered as a short tone burst at a character-specific
frequency on top of the voice, so transcripts are recoverable from the
spectrogram and speakers are separable by their harmonic structure. Useful
solely for exercising the pipeline end to end; not speech.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, Waveform, write_wav
from .errors import InvalidInputError

CHAR_SECONDS = 0.09
SPACE_SECONDS = 0.06
CHAR_FREQ_LO = 700.0
CHAR_FREQ_HI = 5500.0
N_HARMONICS = 8

WORDS = [
    "ab", "beda", "cog", "dax", "eni", "fum", "gal", "hix",
    "ira", "jov", "kel", "lum", "mer", "nop", "oza", "pit",
    "quab", "rud", "sef", "tam", "ulo", "vey", "wib", "xon",
]


@dataclass(frozen=True)
class VoiceParams:
    f0: float
    tilt: float
    vibrato_hz: float


def speaker_voices(n_speakers: int) -> list[VoiceParams]:
    if n_speakers < 2:
        raise InvalidInputError("need at least 2 speakers")
    f0s = np.geomspace(90.0, 300.0, n_speakers)
    tilts = np.linspace(0.6, 1.8, n_speakers)
    vib = np.linspace(4.0, 7.0, n_speakers)
    return [VoiceParams(float(f), float(t), float(v)) for f, t, v in zip(f0s, tilts, vib)]


def _char_freq(c: str) -> float:
    idx = ord(c) - ord("a")
    return float(np.geomspace(CHAR_FREQ_LO, CHAR_FREQ_HI, 26)[idx])


def synth_utterance(
    text: str, voice: VoiceParams, rng: np.random.Generator, sr: int = DEFAULT_SAMPLE_RATE
) -> Waveform:
    """Render a lowercase [a-z ] string as a tone-burst 'utterance'."""
    pieces = []
    phase = float(rng.uniform(0, 2 * np.pi))
    for c in text:
        if c == " ":
            pieces.append(np.zeros(int(SPACE_SECONDS * sr)))
            continue
        if not ("a" <= c <= "z"):
            raise InvalidInputError(f"unsupported character {c!r} in toy text")
        n = int(CHAR_SECONDS * sr)
        t = np.arange(n) / sr
        f0 = voice.f0 * (1.0 + 0.01 * np.sin(2 * np.pi * voice.vibrato_hz * t))
        voiced = np.zeros(n)
        for k in range(1, N_HARMONICS + 1):
            voiced += (1.0 / k**voice.tilt) * np.sin(2 * np.pi * k * f0 * t + phase * k)
        voiced /= np.max(np.abs(voiced))
        tone = np.sin(2 * np.pi * _char_freq(c) * t + phase)
        env = np.hanning(n)
        pieces.append(env * (0.45 * voiced + 0.5 * tone))
    samples = np.concatenate(pieces) if pieces else np.zeros(int(SPACE_SECONDS * sr))
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = 0.7 * samples / peak
    return Waveform(samples, sr)


def generate_toy_corpus(
    out_dir,
    n_speakers: int = 6,
    utts_per_speaker: int = 36,
    seed: int = 0,
    words_per_utt: tuple[int, int] = (2, 3),
    holdout_per_speaker: int = 3,
    sr: int = DEFAULT_SAMPLE_RATE,
) -> dict:
    """Write WAVs plus full/train/holdout manifests; returns their paths."""
    if holdout_per_speaker >= utts_per_speaker:
        raise InvalidInputError("holdout_per_speaker must be < utts_per_speaker")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    voices = speaker_voices(n_speakers)
    rng = np.random.default_rng(seed)

    records = []
    for s in range(n_speakers):
        for u in range(utts_per_speaker):
            utt_rng = np.random.default_rng(seed * 1_000_003 + s * 1009 + u)
            n_words = int(utt_rng.integers(words_per_utt[0], words_per_utt[1] + 1))
            text = " ".join(
                WORDS[int(utt_rng.integers(0, len(WORDS)))] for _ in range(n_words)
            )
            w = synth_utterance(text, voices[s], utt_rng, sr=sr)
            utt_id = f"spk{s:02d}_utt{u:03d}"
            write_wav(wav_dir / f"{utt_id}.wav", w)
            records.append(
                {
                    "id": utt_id,
                    "path": f"wavs/{utt_id}.wav",
                    "speaker": f"spk{s:02d}",
                    "text": text,
                    "duration": round(len(w) / sr, 6),
                    "holdout": u >= utts_per_speaker - holdout_per_speaker,
                }
            )
    del rng  # all draws flow through per-utterance generators

    paths = {
        "manifest": out_dir / "manifest.jsonl",
        "train_manifest": out_dir / "train_manifest.jsonl",
        "holdout_manifest": out_dir / "holdout_manifest.jsonl",
    }
    with paths["manifest"].open("w") as full, paths["train_manifest"].open("w") as train, paths[
        "holdout_manifest"
    ].open("w") as hold:
        for rec in records:
            line = json.dumps({k: v for k, v in rec.items() if k != "holdout"}, sort_keys=True)
            full.write(line + "\n")
            (hold if rec["holdout"] else train).write(line + "\n")
    return {k: str(v) for k, v in paths.items()}
