"""Transcript normalisation, character vocabularies and manifest files."""

from __future__ import annotations

import hashlib
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InputError, ParseError

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
UNK_PLACEHOLDER = "⁇"  # rendered for unknown characters on decode

# Typographic variants folded before punctuation stripping.
_PUNCT_TABLE = str.maketrans({
    "‘": "'", "’": "'", "‚": "'", "‛": "'", "′": "'", "`": "'",
    "´": "'",
    "“": '"', "”": '"', "„": '"', "«": '"', "»": '"',
    "‐": "-", "‑": "-", "‒": "-", "–": "-", "—": "-", "―": "-",
    "−": "-",
    "…": "...",
    " ": " ", " ": " ", " ": " ", "　": " ",
})


@dataclass(frozen=True)
class NormalizedTranscript:
    text: str
    language_tag: str = ""

    def __str__(self) -> str:
        return self.text


def normalize_text(raw: str, lowercase: bool = True, language_tag: str = "") -> NormalizedTranscript:
    """Fold typographic punctuation, drop every punctuation mark except the
    apostrophe, optionally lowercase and collapse whitespace.

    Punctuation is replaced by a space, so ``"well-known"`` becomes
    ``"well known"``; the result is a fixed point of this function.
    """
    text = unicodedata.normalize("NFC", raw).translate(_PUNCT_TABLE)
    if lowercase:
        text = text.lower()
    chars = []
    for ch in text:
        if ch == "'":
            chars.append(ch)
        elif unicodedata.category(ch).startswith("P") or ch.isspace():
            chars.append(" ")
        else:
            chars.append(ch)
    return NormalizedTranscript(" ".join("".join(chars).split()), language_tag)


class CharVocabulary:
    """Index <-> character bijection with reserved symbols at indices 0..3."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if tuple(symbols[:4]) != RESERVED:
            raise InputError(f"vocabulary must start with {RESERVED}")
        if len(set(symbols)) != len(symbols):
            raise InputError("vocabulary contains duplicate symbols")
        for s in symbols[4:]:
            if len(s) != 1:
                raise InputError(f"non-reserved symbols must be single characters, got {s!r}")
        self.symbols = tuple(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, CharVocabulary) and self.symbols == other.symbols

    def __hash__(self) -> int:
        return hash(self.symbols)

    def __repr__(self) -> str:
        return f"CharVocabulary({len(self)} symbols, fingerprint={self.fingerprint})"

    @property
    def characters(self) -> tuple[str, ...]:
        return self.symbols[4:]

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()[:16]

    def encode(self, text: str | NormalizedTranscript) -> np.ndarray:
        text = str(text)
        ids = [BOS_ID]
        ids.extend(self.index.get(ch, UNK_ID) for ch in text)
        ids.append(EOS_ID)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, BOS_ID):
                continue
            if i == EOS_ID:
                break
            out.append(UNK_PLACEHOLDER if i == UNK_ID else self.symbols[i])
        return "".join(out)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for s in self.symbols:
                f.write(s + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CharVocabulary":
        with open(path, encoding="utf-8", newline="\n") as f:
            symbols = [line[:-1] if line.endswith("\n") else line for line in f]
        return cls(symbols)


def build_char_vocab(corpus: Iterable[str | NormalizedTranscript]) -> CharVocabulary:
    """Every character of the corpus once, most frequent first, ties by codepoint."""
    counts: Counter = Counter()
    n = 0
    for t in corpus:
        counts.update(str(t))
        n += 1
    if n == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    chars = sorted(counts, key=lambda ch: (-counts[ch], ord(ch)))
    return CharVocabulary(list(RESERVED) + chars)


def encode(t: str | NormalizedTranscript, vocab: CharVocabulary) -> np.ndarray:
    return vocab.encode(t)


def decode(ids: Iterable[int], vocab: CharVocabulary) -> str:
    return vocab.decode(ids)


# ------------------------------------------------------------------ manifests


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    path: str
    text: str
    language: str


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in entries:
            fields = (e.utt_id, e.path, e.text, e.language)
            if any("\t" in x or "\n" in x for x in fields):
                raise InputError(f"manifest fields may not contain tabs or newlines: {e.utt_id!r}")
            f.write("\t".join(fields) + "\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
            entries.append(ManifestEntry(*parts))
    return entries
