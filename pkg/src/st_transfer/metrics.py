"""WER / CER via Levenshtein alignment, and corpus BLEU-4."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .exceptions import UsageError
from .text import normalize_text


@dataclass(frozen=True)
class Alignment:
    substitutions: int
    insertions: int
    deletions: int
    ops: tuple[tuple[str, object, object], ...]  # ("C"|"S"|"I"|"D", ref token, hyp token)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def edit_distance_align(ref: Sequence, hyp: Sequence) -> Alignment:
    """Unit-cost Levenshtein alignment of two token sequences."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri, row, prev = ref[i - 1], d[i], d[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ri != hyp[j - 1])
            row[j] = min(sub, prev[j] + 1, row[j - 1] + 1)
    ops = []
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            same = ref[i - 1] == hyp[j - 1]
            ops.append(("C" if same else "S", ref[i - 1], hyp[j - 1]))
            s += not same
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append(("D", ref[i - 1], None))
            dele += 1
            i -= 1
        else:
            ops.append(("I", None, hyp[j - 1]))
            ins += 1
            j -= 1
    return Alignment(s, ins, dele, tuple(reversed(ops)))


def tokenize_for_scoring(text: str, mode: str) -> list[str]:
    text = normalize_text(text, lowercase=True).text
    if mode == "word":
        return text.split()
    if mode == "char":
        return [c for c in text if not c.isspace()]
    raise UsageError(f"mode must be 'word' or 'char', got {mode!r}")


@dataclass
class MetricsReport:
    mode: str = "word"
    error_rate: float = 0.0
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_length: int = 0
    bleu: float | None = None
    per_utterance: list[dict] = field(default_factory=list)

    @property
    def wer(self) -> float | None:
        return self.error_rate if self.mode == "word" else None

    @property
    def cer(self) -> float | None:
        return self.error_rate if self.mode == "char" else None

    def summary(self) -> str:
        name = "WER" if self.mode == "word" else "CER"
        line = (f"{name} {100 * self.error_rate:.2f}% (S={self.substitutions} I={self.insertions} "
                f"D={self.deletions} N={self.ref_length})")
        if self.bleu is not None:
            line += f" BLEU {self.bleu:.2f}"
        return line


def score_wer_cer(refs: Sequence[str], hyps: Sequence[str], mode: str = "word",
                  ids: Sequence[str] | None = None) -> MetricsReport:
    """Corpus-level error rate: edit operations pooled over all utterances."""
    if len(refs) != len(hyps):
        raise UsageError(f"{len(refs)} references but {len(hyps)} hypotheses")
    rep = MetricsReport(mode=mode)
    for k, (r, h) in enumerate(zip(refs, hyps)):
        rt, ht = tokenize_for_scoring(r, mode), tokenize_for_scoring(h, mode)
        a = edit_distance_align(rt, ht)
        rep.substitutions += a.substitutions
        rep.insertions += a.insertions
        rep.deletions += a.deletions
        rep.ref_length += len(rt)
        rep.per_utterance.append({
            "id": ids[k] if ids is not None else str(k), "errors": a.errors, "ref_length": len(rt),
            "S": a.substitutions, "I": a.insertions, "D": a.deletions})
    errors = rep.substitutions + rep.insertions + rep.deletions
    if rep.ref_length:
        rep.error_rate = errors / rep.ref_length
    else:
        rep.error_rate = 0.0 if errors == 0 else math.inf
    return rep


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(refs: Sequence[str], hyps: Sequence[str], max_n: int = 4):
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for r, h in zip(refs, hyps):
        rt, ht = r.split(), h.split()
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(ht) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def score_bleu(refs: Sequence[str], hyps: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU (0-100) on whitespace-tokenised, lowercased text, no smoothing."""
    if len(refs) != len(hyps):
        raise UsageError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise UsageError("BLEU needs a non-empty corpus")
    matches, totals, c, r = bleu_statistics([x.lower() for x in refs], [x.lower() for x in hyps], max_n)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)
