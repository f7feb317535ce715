"""Dynamic two-speaker mixture construction and manifest-driven corpus access.

Training examples are generated on the fly: two utterances from different
speakers, zero-padded (trailing) to a common length and mixed at an SNR drawn
from Uniform(-5, 5) dB, plus a 5-second enrollment utterance from the target
speaker. Evaluation sets are frozen through pairing files so runs are exactly
reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, read_wav
from .errors import CorpusError, InvalidInputError, ManifestError
from .text import CharTokenizer

SNR_RANGE_DB = (-5.0, 5.0)
ENROLLMENT_SECONDS = 5.0


@dataclass
class UtteranceRecord:
    id: str
    path: str
    speaker_id: str
    text: str
    duration_s: float


@dataclass
class MixtureExample:
    """One training or evaluation item."""

    example_id: str
    mixture: Waveform
    target: Waveform
    enrollment: Waveform
    target_speaker_id: str
    transcript: list[int]
    snr_db: float
    text: str = ""
    target_id: str = ""
    interferer_id: str = ""
    enroll_id: str = ""
    scaled_interferer: Waveform | None = None


class Corpus:
    """Utterance records indexed by id and by speaker, in manifest order."""

    def __init__(self, records: list[UtteranceRecord], root: Path | None = None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        self.by_id: dict[str, UtteranceRecord] = {}
        self.by_speaker: dict[str, list[UtteranceRecord]] = {}
        for rec in self.records:
            if rec.id in self.by_id:
                raise ManifestError(f"duplicate utterance id {rec.id!r}")
            self.by_id[rec.id] = rec
            self.by_speaker.setdefault(rec.speaker_id, []).append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def speakers(self) -> list[str]:
        return list(self.by_speaker.keys())

    def resolve_path(self, rec: UtteranceRecord) -> Path:
        p = Path(rec.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load_audio(self, utt_id: str) -> Waveform:
        if utt_id not in self.by_id:
            raise ManifestError(f"unknown utterance id {utt_id!r}")
        return read_wav(self.resolve_path(self.by_id[utt_id]))


def load_manifest(path) -> Corpus:
    """Load a JSON-Lines manifest ({"id","path","speaker","text","duration"})."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                rec = UtteranceRecord(
                    id=str(obj["id"]),
                    path=str(obj["path"]),
                    speaker_id=str(obj["speaker"]),
                    text=str(obj.get("text", "")),
                    duration_s=float(obj["duration"]),
                )
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc}") from exc
            if rec.duration_s <= 0:
                raise ManifestError(f"{path}:{lineno}: non-positive duration for {rec.id!r}")
            if not rec.speaker_id:
                raise ManifestError(f"{path}:{lineno}: empty speaker id for {rec.id!r}")
            records.append(rec)
    return Corpus(records, root=path.parent)


def mix_at_snr(
    target: Waveform, interferer: Waveform, snr_db: float
) -> tuple[Waveform, Waveform, Waveform]:
    """Mix two signals so the target/interferer power ratio equals snr_db.

    Powers are measured over each signal's pre-padding support; the shorter
    signal is zero-padded at the end. Returns (mixture, scaled_target,
    scaled_interferer); the mixture is exactly the sum of the two returned
    components. If the sum would exceed a 0.99 peak, one common gain is
    applied to both components (SNR is unaffected).
    """
    if target.sample_rate != interferer.sample_rate:
        raise InvalidInputError("target and interferer sample rates differ")
    p_target = float(np.mean(target.samples**2)) if len(target) else 0.0
    p_interf = float(np.mean(interferer.samples**2)) if len(interferer) else 0.0
    if p_target <= 0.0:
        raise InvalidInputError("silent target: cannot set an SNR")
    if p_interf <= 0.0:
        raise InvalidInputError("silent interferer: cannot set an SNR")

    n = max(len(target), len(interferer))
    t = np.zeros(n)
    t[: len(target)] = target.samples
    i = np.zeros(n)
    i[: len(interferer)] = interferer.samples

    scale = np.sqrt(p_target / (p_interf * 10.0 ** (snr_db / 10.0)))
    scaled_t = t
    scaled_i = scale * i
    mixture = scaled_t + scaled_i
    peak = float(np.max(np.abs(mixture)))
    if peak > 0.99:
        gain = 0.99 / peak
        scaled_t = gain * scaled_t
        scaled_i = gain * scaled_i
        mixture = scaled_t + scaled_i  # re-sum so mixture == t + i holds exactly
    sr = target.sample_rate
    return Waveform(mixture, sr), Waveform(scaled_t, sr), Waveform(scaled_i, sr)


def fix_length(w: Waveform, seconds: float) -> Waveform:
    """Force an exact duration: keep the first samples, zero-pad at the end."""
    if seconds <= 0:
        raise InvalidInputError("seconds must be positive")
    n = int(round(seconds * w.sample_rate))
    if len(w) >= n:
        return Waveform(w.samples[:n].copy(), w.sample_rate)
    out = np.zeros(n)
    out[: len(w)] = w.samples
    return Waveform(out, w.sample_rate)


def derive_seed(base: int, worker_index: int, step: int) -> int:
    """Independent per-worker, per-step seed (base XOR worker XOR step)."""
    return (int(base) ^ int(worker_index) ^ int(step)) & 0x7FFFFFFFFFFFFFFF


def _eligible_target_speakers(corpus: Corpus) -> list[str]:
    if len(corpus.speakers) < 2:
        raise CorpusError(
            f"need at least 2 speakers to mix, got {len(corpus.speakers)}"
        )
    eligible = [s for s, recs in corpus.by_speaker.items() if len(recs) >= 2]
    if not eligible:
        offender = corpus.speakers[0]
        raise CorpusError(
            f"no speaker has >=2 utterances (e.g. speaker {offender!r}); "
            "enrollment requires a second utterance"
        )
    return eligible


def _build_example(
    corpus: Corpus,
    target_rec: UtteranceRecord,
    interferer_rec: UtteranceRecord,
    enroll_rec: UtteranceRecord,
    snr_db: float,
    tokenizer: CharTokenizer,
    rng: np.random.Generator | None = None,
    random_enroll_crop: bool = False,
    example_id: str | None = None,
) -> MixtureExample:
    target = corpus.load_audio(target_rec.id)
    interferer = corpus.load_audio(interferer_rec.id)
    enroll = corpus.load_audio(enroll_rec.id)
    mixture, scaled_t, scaled_i = mix_at_snr(target, interferer, snr_db)

    n_enroll = int(round(ENROLLMENT_SECONDS * enroll.sample_rate))
    if random_enroll_crop and rng is not None and len(enroll) > n_enroll:
        start = int(rng.integers(0, len(enroll) - n_enroll + 1))
        enroll = Waveform(enroll.samples[start : start + n_enroll].copy(), enroll.sample_rate)
    enroll = fix_length(enroll, ENROLLMENT_SECONDS)

    return MixtureExample(
        example_id=example_id or f"{target_rec.id}+{interferer_rec.id}",
        mixture=mixture,
        target=scaled_t,
        enrollment=enroll,
        target_speaker_id=target_rec.speaker_id,
        transcript=tokenizer.encode(target_rec.text),
        snr_db=snr_db,
        text=target_rec.text,
        target_id=target_rec.id,
        interferer_id=interferer_rec.id,
        enroll_id=enroll_rec.id,
        scaled_interferer=scaled_i,
    )


def sample_training_example(
    corpus: Corpus,
    rng: np.random.Generator,
    tokenizer: CharTokenizer | None = None,
    random_enroll_crop: bool = False,
    target_utt_id: str | None = None,
) -> MixtureExample:
    """Draw one training example; fully determined by the rng state.

    When target_utt_id is given the target is fixed (epoch iteration) and only
    the interferer, enrollment, and SNR are drawn.
    """
    tokenizer = tokenizer or CharTokenizer()
    eligible = _eligible_target_speakers(corpus)

    if target_utt_id is not None:
        target_rec = corpus.by_id.get(target_utt_id)
        if target_rec is None:
            raise CorpusError(f"unknown target utterance {target_utt_id!r}")
        if len(corpus.by_speaker[target_rec.speaker_id]) < 2:
            raise CorpusError(
                f"speaker {target_rec.speaker_id!r} has no second utterance for enrollment"
            )
    else:
        spk = eligible[int(rng.integers(0, len(eligible)))]
        utts = corpus.by_speaker[spk]
        target_rec = utts[int(rng.integers(0, len(utts)))]

    other_speakers = [s for s in corpus.speakers if s != target_rec.speaker_id]
    interferer_spk = other_speakers[int(rng.integers(0, len(other_speakers)))]
    interferer_utts = corpus.by_speaker[interferer_spk]
    interferer_rec = interferer_utts[int(rng.integers(0, len(interferer_utts)))]

    enroll_pool = [r for r in corpus.by_speaker[target_rec.speaker_id] if r.id != target_rec.id]
    enroll_rec = enroll_pool[int(rng.integers(0, len(enroll_pool)))]

    snr_db = float(rng.uniform(*SNR_RANGE_DB))
    return _build_example(
        corpus, target_rec, interferer_rec, enroll_rec, snr_db, tokenizer,
        rng=rng, random_enroll_crop=random_enroll_crop,
    )


def epoch_target_records(corpus: Corpus) -> list[UtteranceRecord]:
    """Target utterances of one epoch: eligible speakers, manifest order."""
    eligible = set(_eligible_target_speakers(corpus))
    return [rec for rec in corpus.records if rec.speaker_id in eligible]


def epoch_example(
    corpus: Corpus,
    base_seed: int,
    epoch: int,
    index: int,
    tokenizer: CharTokenizer | None = None,
    worker_index: int = 0,
) -> MixtureExample:
    """The index-th example of an epoch, reproducible in isolation.

    Each item's draws come from an independently derived seed
    (base XOR worker XOR step, with the epoch folded into the base), so any
    position in any epoch can be regenerated directly — the property that
    makes checkpoint resume exact and worker sharding trivial.
    """
    records = epoch_target_records(corpus)
    rng = np.random.default_rng(derive_seed(base_seed + 1_000_003 * epoch, worker_index, index))
    return sample_training_example(
        corpus, rng, tokenizer=tokenizer, target_utt_id=records[index].id
    )


def iter_epoch(
    corpus: Corpus,
    base_seed: int,
    epoch: int,
    tokenizer: CharTokenizer | None = None,
    worker_index: int = 0,
):
    """One epoch = one pass over eligible target utterances in manifest order."""
    for index in range(len(epoch_target_records(corpus))):
        yield epoch_example(
            corpus, base_seed, epoch, index, tokenizer=tokenizer, worker_index=worker_index
        )


def write_pairing_file(path, pairings: list[dict]):
    with Path(path).open("w") as fh:
        for p in pairings:
            fh.write(json.dumps(p, sort_keys=True) + "\n")


def make_eval_pairings(
    corpus: Corpus, n_mixtures: int, rng: np.random.Generator
) -> list[dict]:
    """Sample reproducible (target, interferer, enrollment, snr) quadruples."""
    _eligible_target_speakers(corpus)
    pairings = []
    for _ in range(n_mixtures):
        ex = None
        while ex is None:
            candidate = sample_training_example(corpus, rng)
            # the alternated target needs its own enrollment utterance
            if len(corpus.by_speaker[corpus.by_id[candidate.interferer_id].speaker_id]) >= 2:
                ex = candidate
        pairings.append(
            {
                "target_id": ex.target_id,
                "interferer_id": ex.interferer_id,
                "enroll_id": ex.enroll_id,
                "snr_db": round(ex.snr_db, 6),
            }
        )
    return pairings


def load_pairing_file(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"pairing file not found: {path}")
    pairings = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            for key in ("target_id", "interferer_id", "enroll_id", "snr_db"):
                if key not in obj:
                    raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
            pairings.append(obj)
    return pairings


def _first_other_utterance(corpus: Corpus, speaker_id: str, exclude_id: str) -> UtteranceRecord:
    for rec in corpus.by_speaker.get(speaker_id, []):
        if rec.id != exclude_id:
            return rec
    raise CorpusError(
        f"speaker {speaker_id!r} has no enrollment utterance besides {exclude_id!r}"
    )


def build_eval_set(
    corpus: Corpus, pairing_path, tokenizer: CharTokenizer | None = None
) -> list[MixtureExample]:
    """Materialize the evaluation set from a pairing file.

    Every pairing line describes one two-speaker mixture and yields two
    examples sharing the identical mixture signal: one per speaker, with the
    enrollment alternated. The alternated item's enrollment is the first other
    utterance of that speaker in manifest order.
    """
    if len(corpus) == 0:
        raise CorpusError("cannot build an eval set from an empty corpus")
    tokenizer = tokenizer or CharTokenizer()
    pairings = load_pairing_file(pairing_path)
    examples = []
    for idx, p in enumerate(pairings):
        for key in ("target_id", "interferer_id", "enroll_id"):
            if p[key] not in corpus.by_id:
                raise ManifestError(f"pairing {idx}: unknown utterance id {p[key]!r}")
        t_rec = corpus.by_id[p["target_id"]]
        i_rec = corpus.by_id[p["interferer_id"]]
        e_rec = corpus.by_id[p["enroll_id"]]
        if t_rec.speaker_id == i_rec.speaker_id:
            raise ManifestError(f"pairing {idx}: target and interferer share a speaker")
        if e_rec.speaker_id != t_rec.speaker_id or e_rec.id == t_rec.id:
            raise ManifestError(f"pairing {idx}: bad enrollment {e_rec.id!r}")
        snr = float(p["snr_db"])

        primary = _build_example(
            corpus, t_rec, i_rec, e_rec, snr, tokenizer,
            example_id=f"m{idx:04d}a_{t_rec.id}",
        )
        # alternated extraction of the identical mixture: the target becomes
        # the other speaker's scaled component and the enrollment is swapped
        alt_enroll = _first_other_utterance(corpus, i_rec.speaker_id, i_rec.id)
        alternated = MixtureExample(
            example_id=f"m{idx:04d}b_{i_rec.id}",
            mixture=primary.mixture,
            target=primary.scaled_interferer,
            enrollment=fix_length(corpus.load_audio(alt_enroll.id), ENROLLMENT_SECONDS),
            target_speaker_id=i_rec.speaker_id,
            transcript=tokenizer.encode(i_rec.text),
            snr_db=-snr,
            text=i_rec.text,
            target_id=i_rec.id,
            interferer_id=t_rec.id,
            enroll_id=alt_enroll.id,
            scaled_interferer=primary.target,
        )
        examples.extend([primary, alternated])
    return examples
