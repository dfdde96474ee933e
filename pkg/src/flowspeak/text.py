"""Phonemization boundary, symbol vocabulary and blank interspersal."""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

PAD = "<pad>"
BLANK = "<blank>"
UNK = "<unk>"


class TextError(ValueError):
    pass


class PhonemizerConfigError(TextError):
    pass


@dataclass(frozen=True)
class SymbolVocabulary:
    """Ordered symbol table. Index 0..2 are reserved for pad, blank and unk."""

    symbols: tuple[str, ...]
    pad_id: int = 0
    blank_id: int = 1
    unk_id: int = 2

    def __post_init__(self):
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(set(symbols)) != len(symbols):
            raise TextError("vocabulary symbols must be distinct")
        if self.blank_id == self.pad_id:
            raise TextError("blank_id and pad_id must differ")
        for name in ("pad_id", "blank_id", "unk_id"):
            if not 0 <= getattr(self, name) < len(symbols):
                raise TextError(f"{name} out of range")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(symbols)})

    @classmethod
    def build(cls, phoneme_lists: Iterable[Sequence[str]]) -> "SymbolVocabulary":
        seen = []
        known = {PAD, BLANK, UNK}
        for phonemes in phoneme_lists:
            for p in phonemes:
                if p not in known:
                    known.add(p)
                    seen.append(p)
        return cls((PAD, BLANK, UNK, *sorted(seen)))

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def id(self, symbol: str) -> int:
        return self._index.get(symbol, self.unk_id)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.blank_id, self.unk_id))

    def content_symbols(self) -> set[str]:
        return {s for i, s in enumerate(self.symbols) if i not in self.special_ids}

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict()).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "symbols": list(self.symbols),
            "pad_id": self.pad_id,
            "blank_id": self.blank_id,
            "unk_id": self.unk_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SymbolVocabulary":
        return cls(tuple(d["symbols"]), d["pad_id"], d["blank_id"], d["unk_id"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path) -> "SymbolVocabulary":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SymbolSequence:
    ids: tuple[int, ...]
    unknown_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if len(self.ids) < 1:
            raise TextError("symbol sequence must be non-empty")

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


class SubprocessPhonemizer:
    """Line protocol client: one sentence per line in, space-separated phonemes out.

    The process is started lazily and kept alive; calls are serialized.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 30.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc = None
        self._lock = threading.Lock()

    def _start(self):
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except FileNotFoundError as exc:
            raise PhonemizerConfigError(
                f"phonemizer executable not found: {self.command[0]}"
            ) from exc

    def __call__(self, text: str) -> list[str]:
        line = " ".join(text.splitlines())
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                self._start()
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
            out = self._proc.stdout.readline()
        if not out:
            raise PhonemizerConfigError("phonemizer process closed its output")
        return out.split()

    def close(self):
        with self._lock:
            if self._proc is not None:
                self._proc.stdin.close()
                self._proc.wait(timeout=self.timeout)
                self._proc = None


class Phonemizer:
    """Phonemizer front with an optional character-level fallback.

    ``command=None`` means no external tool is configured.
    """

    def __init__(
        self,
        command: str | Sequence[str] | None = None,
        language: str = "en-us",
        fallback: bool = True,
    ):
        self.language = language
        self.fallback = fallback
        self._external = SubprocessPhonemizer(command) if command else None

    def __call__(self, text: str) -> list[str]:
        return phonemize(text, self.language, external=self._external, fallback=self.fallback)


def phonemize(
    text: str,
    language: str = "en-us",
    external: SubprocessPhonemizer | None = None,
    fallback: bool = True,
) -> list[str]:
    """Phoneme list for ``text``.

    Without an external tool the fallback returns lower-cased characters,
    spaces included.
    """
    if not text or not text.strip():
        raise TextError("cannot phonemize empty text")
    if external is not None:
        try:
            return external(text)
        except PhonemizerConfigError:
            if not fallback:
                raise
            logger.warning("external phonemizer failed, using character fallback")
    elif not fallback:
        raise PhonemizerConfigError(
            f"no external phonemizer configured for language {language!r} and fallback disabled"
        )
    return list(text.lower())


def encode_symbols(phonemes: Sequence[str], vocab: SymbolVocabulary) -> SymbolSequence:
    """Map phonemes to ids; unknown symbols become ``unk_id`` and are counted."""
    if len(phonemes) == 0:
        raise TextError("empty phoneme list")
    ids = [vocab.id(p) for p in phonemes]
    unknown = sum(1 for p in phonemes if p not in vocab or vocab.id(p) in vocab.special_ids)
    if unknown:
        logger.debug("encode_symbols: %d unknown symbols", unknown)
    return SymbolSequence(tuple(ids), unknown_count=unknown)


def decode_symbols(seq: SymbolSequence, vocab: SymbolVocabulary) -> list[str]:
    return [vocab.symbols[i] for i in seq.ids]


def intersperse_blank(seq: SymbolSequence, vocab: SymbolVocabulary) -> SymbolSequence:
    """``[s1..sn] -> [b, s1, b, s2, ..., sn, b]``."""
    if vocab.blank_id in seq.ids:
        raise TextError("sequence already contains blank tokens")
    out = [vocab.blank_id] * (2 * len(seq) + 1)
    out[1::2] = seq.ids
    return SymbolSequence(tuple(out), seq.unknown_count)


def deintersperse_blank(seq: SymbolSequence, vocab: SymbolVocabulary) -> SymbolSequence:
    ids = seq.ids
    if len(ids) % 2 == 0 or any(i != vocab.blank_id for i in ids[0::2]):
        raise TextError("sequence is not blank-interspersed")
    return SymbolSequence(ids[1::2], seq.unknown_count)


def text_to_sequence(
    text: str,
    vocab: SymbolVocabulary,
    phonemizer: Phonemizer | None = None,
    add_blank: bool = True,
) -> SymbolSequence:
    phonemes = (phonemizer or Phonemizer())(text)
    if not phonemes:
        raise TextError(f"phonemization of {text!r} is empty")
    seq = encode_symbols(phonemes, vocab)
    return intersperse_blank(seq, vocab) if add_blank else seq
