import itertools
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from st_transfer.exceptions import UsageError
from st_transfer.metrics import edit_distance_align, score_bleu, score_wer_cer


def brute_force_distance(ref, hyp) -> int:
    """Plain recursive Levenshtein, written independently of the DP under test."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))
    return d(len(ref), len(hyp))


def random_pairs(n: int, seed: int):
    r = np.random.default_rng(seed)
    words = ["a", "b", "c", "dd", "ee"]
    for _ in range(n):
        ref = " ".join(r.choice(words, size=r.integers(1, 7)))
        hyp = " ".join(r.choice(words, size=r.integers(0, 7)))
        yield ref, hyp


def test_wer_and_cer_match_brute_force_on_1000_pairs():
    pairs = list(random_pairs(1000, 0))
    for mode, tok in (("word", str.split), ("char", lambda s: [c for c in s if c != " "])):
        rep = score_wer_cer([r for r, _ in pairs], [h for _, h in pairs], mode)
        errs = sum(brute_force_distance(tok(r), tok(h)) for r, h in pairs)
        n = sum(len(tok(r)) for r, _ in pairs)
        assert rep.error_rate == errs / n
        for row, (r, h) in zip(rep.per_utterance, pairs):
            assert row["errors"] == brute_force_distance(tok(r), tok(h))


def test_wer_examples():
    assert score_wer_cer(["a b c"], ["a b c"]).error_rate == 0
    rep = score_wer_cer(["a b c"], ["a x c d"])
    assert (rep.substitutions, rep.insertions, rep.deletions) == (1, 1, 0)
    assert rep.error_rate == pytest.approx(2 / 3)
    assert score_wer_cer(["a b"], [""]).error_rate == 1.0
    assert math.isinf(score_wer_cer([""], ["a"]).error_rate)
    assert score_wer_cer([""], [""]).error_rate == 0


def test_cer_ignores_spaces_and_case():
    assert score_wer_cer(["Ab c"], ["a bc"], "char").error_rate == 0


def test_mismatched_lengths_rejected():
    with pytest.raises(UsageError):
        score_wer_cer(["a"], [])
    with pytest.raises(UsageError):
        score_wer_cer(["a"], ["a"], "phone")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=8), st.lists(st.sampled_from("abc"), max_size=8))
def test_alignment_ops_reconstruct_hypothesis(ref, hyp):
    a = edit_distance_align(ref, hyp)
    assert a.errors == brute_force_distance(ref, hyp)
    assert [h for op, _, h in a.ops if op != "D"] == hyp
    assert [r for op, r, _ in a.ops if op != "I"] == ref


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=6), st.lists(st.sampled_from("abc"), max_size=6),
       st.lists(st.sampled_from("abc"), max_size=6))
def test_edit_distance_triangle_inequality(x, y, z):
    d = lambda a, b: edit_distance_align(a, b).errors  # noqa: E731
    assert d(x, z) <= d(x, y) + d(y, z)
    assert d(x, y) == d(y, x)


# ------------------------------------------------------------------ BLEU

def test_bleu_identity_is_100():
    s = ["the quick brown fox jumps", "over the lazy dog today"]
    assert abs(score_bleu(s, s) - 100.0) < 1e-6


def test_bleu_half_length_brevity_penalty():
    ref = "a b c d e f g h"
    hyp = "a b c d"
    assert abs(score_bleu([ref], [hyp]) - 100.0 * math.exp(-1)) < 1e-6


def test_bleu_zero_fourgram_matches_is_zero():
    assert score_bleu(["a b c d e"], ["a b c e d"]) == 0.0


def test_bleu_errors():
    with pytest.raises(UsageError):
        score_bleu([], [])
    with pytest.raises(UsageError):
        score_bleu(["a"], ["a", "b"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text("abcd ", min_size=1, max_size=20), min_size=1, max_size=4))
def test_bleu_bounded(refs):
    hyps = [r[::-1] for r in refs]
    assert 0 <= score_bleu(refs, hyps) <= 100 + 1e-9
