"""Transcript normalization and the default character-level tokenizer.

Normalization rules (fixed; applied before tokenizing and before WER):
  1. lowercase
  2. hyphens become spaces
  3. every character outside [a-z0-9' ] is dropped
  4. whitespace runs collapse to a single space; leading/trailing stripped

Token ids: 0..3 are the decoding condition tokens (start, language, task,
no-timestamps), 4 is end-of-text, characters start at 5. A pretrained BPE
tokenizer can be plugged in behind the same interface.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidInputError

SOT_ID = 0
LANG_ID = 1
TASK_ID = 2
NO_TIMESTAMPS_ID = 3
EOT_ID = 4
CONDITION_IDS = (SOT_ID, LANG_ID, TASK_ID, NO_TIMESTAMPS_ID)
N_RESERVED = 5

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789' "

_DROP_RE = re.compile(r"[^a-z0-9' ]+")


def normalize_text(text: str) -> str:
    text = text.lower().replace("-", " ")
    text = _DROP_RE.sub("", text)
    return re.sub(r"\s+", " ", text).strip()


@dataclass
class CharTokenizer:
    """Maps normalized text to token ids and back."""

    alphabet: str = DEFAULT_ALPHABET

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise InvalidInputError("tokenizer alphabet contains duplicate characters")
        self._char_to_id = {c: N_RESERVED + i for i, c in enumerate(self.alphabet)}
        self._id_to_char = {i: c for c, i in self._char_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return N_RESERVED + len(self.alphabet)

    def encode(self, text: str) -> list[int]:
        """Token ids of the normalized text body (no condition tokens, no EOT)."""
        return [self._char_to_id[c] for c in normalize_text(text)]

    def decode(self, ids) -> str:
        chars = []
        for i in ids:
            if i == EOT_ID:
                break
            if i in self._id_to_char:
                chars.append(self._id_to_char[i])
        return "".join(chars)

    def save(self, path):
        spec = {
            "alphabet": self.alphabet,
            "reserved": {"sot": SOT_ID, "lang": LANG_ID, "task": TASK_ID,
                         "no_timestamps": NO_TIMESTAMPS_ID, "eot": EOT_ID},
            "table": {c: i for c, i in self._char_to_id.items()},
        }
        Path(path).write_text(json.dumps(spec, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "CharTokenizer":
        spec = json.loads(Path(path).read_text())
        return cls(alphabet=spec["alphabet"])


@dataclass
class TranscriptTokens:
    """Condition prefix + transcript body, as fed to the text decoder."""

    body: list[int] = field(default_factory=list)
    condition: tuple[int, ...] = CONDITION_IDS
    eot: int = EOT_ID
    truncated: bool = False

    def prefix_ids(self) -> list[int]:
        """Teacher-forcing input: condition tokens followed by the body."""
        return list(self.condition) + list(self.body)

    def full_ids(self) -> list[int]:
        return self.prefix_ids() + [self.eot]

    def __len__(self) -> int:
        return len(self.body)
