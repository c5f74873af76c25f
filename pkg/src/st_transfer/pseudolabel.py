"""N-best pseudo-labels for ST training: ingest, filter, per-epoch sampling.

Also provides a synthetic translation oracle that plays the role of an MT
system on the synthetic language pair.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import InputError, ParseError, UsageError
from .synth import SyntheticLanguageSpec, translate_exact


@dataclass(frozen=True)
class Candidate:
    text: str
    confidence: float  # length-normalised log-likelihood


@dataclass(frozen=True)
class NBestLabelSet:
    """Candidates for one utterance, best first."""

    utt_id: str
    candidates: tuple[Candidate, ...]
    k: int | None = None

    def __post_init__(self):
        if not self.candidates:
            raise InputError(f"utterance {self.utt_id!r} has no candidates")
        for c in self.candidates:
            if not (math.isfinite(c.confidence) and c.confidence <= 0):
                raise InputError(f"utterance {self.utt_id!r}: confidence {c.confidence} must be finite and <= 0")
        k = self.k if self.k is not None else len(self.candidates)
        if len(self.candidates) > k:
            raise InputError(f"utterance {self.utt_id!r} has {len(self.candidates)} candidates, more than k={k}")
        # stable: equal confidences keep their given (rank) order
        ordered = tuple(sorted(self.candidates, key=lambda c: -c.confidence))
        object.__setattr__(self, "candidates", ordered)
        object.__setattr__(self, "k", k)

    @property
    def top(self) -> Candidate:
        return self.candidates[0]

    def texts(self) -> list[str]:
        return [c.text for c in self.candidates]


@dataclass(frozen=True)
class LabelSamplerConfig:
    n: int = 1
    filter_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise UsageError(f"n must be >= 1, got {self.n}")
        if not 0 <= self.filter_fraction < 1:
            raise UsageError(f"filter_fraction must be in [0, 1), got {self.filter_fraction}")


# ------------------------------------------------------------------ file formats


def write_nbest(sets: Mapping[str, NBestLabelSet] | Iterable[NBestLabelSet], path: str | Path,
                fmt: str | None = None) -> None:
    """Write ``id<TAB>rank<TAB>confidence<TAB>text`` lines, or JSON lines with ``fmt="jsonl"``."""
    path = Path(path)
    items = list(sets.values()) if isinstance(sets, Mapping) else list(sets)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "tsv")
    lines = []
    for s in items:
        if fmt == "jsonl":
            lines.append(json.dumps({"id": s.utt_id, "candidates": [
                {"text": c.text, "confidence": c.confidence} for c in s.candidates]}, ensure_ascii=False))
            continue
        for rank, c in enumerate(s.candidates, 1):
            if "\t" in c.text or "\n" in c.text or "\t" in s.utt_id:
                raise InputError(f"tab or newline inside a field of {s.utt_id!r}")
            lines.append(f"{s.utt_id}\t{rank}\t{c.confidence!r}\t{c.text}")
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _parse_tsv(lines: Sequence[str]) -> dict[str, NBestLabelSet]:
    raw: dict[str, dict[int, Candidate]] = {}
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", line=no)
        utt, rank_s, conf_s, text = fields
        try:
            rank, conf = int(rank_s), float(conf_s)
        except ValueError:
            raise ParseError(f"bad rank or confidence {rank_s!r}, {conf_s!r}", line=no) from None
        ranks = raw.setdefault(utt, {})
        if rank in ranks:
            raise InputError(f"duplicate entry for utterance {utt!r} rank {rank} (line {no})")
        ranks[rank] = Candidate(text, conf)
    return {u: NBestLabelSet(u, tuple(r[k] for k in sorted(r))) for u, r in raw.items()}


def _parse_jsonl(lines: Sequence[str]) -> dict[str, NBestLabelSet]:
    out: dict[str, NBestLabelSet] = {}
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            utt = rec["id"]
            cands = tuple(Candidate(str(c["text"]), float(c["confidence"])) for c in rec["candidates"])
        except (ValueError, KeyError, TypeError) as e:
            raise ParseError(f"malformed record: {e}", line=no) from None
        if utt in out:
            raise InputError(f"duplicate utterance id {utt!r} (line {no})")
        out[utt] = NBestLabelSet(utt, cands, rec.get("k"))
    return out


def ingest_nbest(path: str | Path) -> dict[str, NBestLabelSet]:
    """Read an n-best file (TSV, or JSON lines if it ends in .jsonl or starts with '{')."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    first = next((ln for ln in lines if ln.strip()), "")
    if Path(path).suffix == ".jsonl" or first.lstrip().startswith("{"):
        return _parse_jsonl(lines)
    return _parse_tsv(lines)


# ------------------------------------------------------------------ filtering and sampling


def num_filtered(n: int, fraction: float) -> int:
    # Fraction of the decimal repr avoids 0.1 * 30 -> 3.0000000000000004 style surprises
    return math.floor(Fraction(repr(float(fraction))) * n)


def filter_by_confidence(sets: Mapping[str, NBestLabelSet], fraction: float = 0.10,
                         ) -> tuple[dict[str, NBestLabelSet], list[str]]:
    """Drop the ``floor(fraction * N)`` examples with the lowest top-1 confidence.

    Ties go to the lexicographically smaller id first. Returns the retained
    sets (original order) and the removed ids.
    """
    if not 0 <= fraction < 1:
        raise UsageError(f"fraction must be in [0, 1), got {fraction}")
    ranked = sorted(sets, key=lambda u: (sets[u].top.confidence, u))
    removed = ranked[:num_filtered(len(sets), fraction)]
    gone = set(removed)
    return {u: s for u, s in sets.items() if u not in gone}, removed


def _stable_hash(s: str) -> int:
    return zlib.crc32(s.encode("utf-8"))


def sample_label(label_set: NBestLabelSet, cfg: LabelSamplerConfig, epoch: int) -> str:
    """Uniform draw from the top ``min(n, |candidates|)``; a pure function of (seed, id, epoch)."""
    m = min(cfg.n, len(label_set.candidates))
    if m == 1:
        return label_set.candidates[0].text
    rng = np.random.default_rng([cfg.seed, _stable_hash(label_set.utt_id), epoch])
    return label_set.candidates[int(rng.integers(m))].text


class PseudoLabelProvider:
    """``label_provider(utt, epoch)`` for the trainer, backed by n-best sets."""

    def __init__(self, sets: Mapping[str, NBestLabelSet], cfg: LabelSamplerConfig):
        self.sets = dict(sets)
        self.cfg = cfg

    def __call__(self, utt, epoch: int) -> str:
        try:
            s = self.sets[utt.utt_id]
        except KeyError:
            raise InputError(f"no pseudo-label for utterance {utt.utt_id!r}") from None
        return sample_label(s, self.cfg, epoch)

    def select(self, dataset: Sequence) -> list:
        """Utterances of ``dataset`` that still have labels (after filtering)."""
        return [u for u in dataset if u.utt_id in self.sets]


def prepare_labels(sets: Mapping[str, NBestLabelSet], cfg: LabelSamplerConfig,
                   ) -> tuple[PseudoLabelProvider, list[str]]:
    """Filter once up front, then sample per epoch from what is left."""
    kept, removed = filter_by_confidence(sets, cfg.filter_fraction)
    return PseudoLabelProvider(kept, cfg), removed


# ------------------------------------------------------------------ synthetic MT oracle


def corrupt_words(words: Sequence[str], lexicon: Sequence[str], rate: float,
                  rng: np.random.Generator) -> tuple[list[str], int]:
    """Replace each word with probability ``rate`` by a different lexicon word."""
    out, changed = [], 0
    for w in words:
        if rate > 0 and len(lexicon) > 1 and rng.random() < rate:
            choices = [x for x in lexicon if x != w]
            out.append(choices[int(rng.integers(len(choices)))])
            changed += 1
        else:
            out.append(w)
    return out, changed


def synthetic_translate(source: str, oracle: SyntheticLanguageSpec, k: int = 5,
                        noise_rate: float = 0.0, rng: np.random.Generator | None = None,
                        top1_error_rate: float = 0.0, utt_id: str = "") -> NBestLabelSet:
    """N-best "MT output" for a synthetic source sentence.

    Candidate 1 is the exact translation, except that with probability
    ``top1_error_rate`` it is itself corrupted (emulating a weak MT system).
    Candidates 2..k are word-substitution corruptions at ``noise_rate``.
    Confidences fall by 0.1 per rank and start lower when candidate 1 is
    corrupted, so confidence tracks label quality the way a calibrated MT
    model's would.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    text = getattr(source, "text", source)
    exact = translate_exact(text, oracle).split()
    target_lexicon = sorted(set(oracle.translation.values()))
    top, bad = list(exact), 0
    if top1_error_rate > 0 and rng.random() < top1_error_rate:
        top, bad = corrupt_words(exact, target_lexicon, noise_rate, rng)
        if bad == 0:
            # an erroneous top-1 has at least one wrong word
            i = int(rng.integers(len(exact)))
            top[i:i + 1], bad = corrupt_words(exact[i:i + 1], target_lexicon, 1.0, rng)
    texts = [" ".join(top)]
    for _ in range(1, k):
        texts.append(" ".join(corrupt_words(exact, target_lexicon, noise_rate, rng)[0]))
    base = -0.05 - bad / len(exact) - 0.02 * float(rng.random())
    cands = tuple(Candidate(t, base - 0.1 * r) for r, t in enumerate(texts))
    return NBestLabelSet(utt_id or text, cands, k)


def synthetic_nbest(utterances: Sequence, oracle: SyntheticLanguageSpec, k: int = 5,
                    noise_rate: float = 0.0, seed: int = 0,
                    top1_error_rate: float = 0.0) -> dict[str, NBestLabelSet]:
    """Pseudo-label a source corpus with the oracle, one n-best set per utterance.

    Items need ``utt_id`` and ``text`` (utterances or manifest entries).
    """
    out = {}
    for u in utterances:
        rng = np.random.default_rng([seed, _stable_hash(u.utt_id)])
        out[u.utt_id] = synthetic_translate(u.text, oracle, k, noise_rate, rng, top1_error_rate, u.utt_id)
    return out


def word_differences(a: str, b: str) -> int:
    """Positionwise differing words (the oracle never changes word counts)."""
    wa, wb = a.split(), b.split()
    return sum(x != y for x, y in zip(wa, wb)) + abs(len(wa) - len(wb))


__all__ = [
    "Candidate", "NBestLabelSet", "LabelSamplerConfig", "write_nbest", "ingest_nbest",
    "filter_by_confidence", "sample_label", "PseudoLabelProvider", "prepare_labels",
    "synthetic_translate", "synthetic_nbest", "corrupt_words", "word_differences",
]
