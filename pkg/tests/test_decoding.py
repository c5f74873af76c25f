import itertools

import numpy as np
import pytest

from st_transfer.autograd import log_softmax_np
from st_transfer.decoding import beam_search, beam_search_core, greedy_decode, greedy_search_core
from st_transfer.exceptions import UsageError
from st_transfer.model import init_params
from st_transfer.text import BOS_ID, EOS_ID
from st_transfer.trainer import Checkpoint
from st_transfer.text import build_char_vocab

from conftest import tiny_config


class ToyModel:
    """Next-token distribution as a random function of the whole prefix."""

    def __init__(self, vocab_size: int, seed: int, temperature: float = 1.0):
        self.v, self.seed, self.t = vocab_size, seed, temperature

    def logp(self, prefix: tuple[int, ...]) -> np.ndarray:
        r = np.random.default_rng([self.seed, *prefix])
        return log_softmax_np(r.standard_normal(self.v) * 3 / self.t)

    def step(self, prefixes, state):
        return np.stack([self.logp(p) for p in prefixes]), state


BANNED = (0, BOS_ID)


def brute_force(model: ToyModel, max_len: int):
    """Every complete sequence up to ``max_len`` tokens (eos forced at max_len)."""
    allowed = [t for t in range(model.v) if t not in BANNED and t != EOS_ID]
    out = []
    for n in range(0, max_len):
        for body in itertools.product(allowed, repeat=n):
            toks = body + (EOS_ID,)
            ll, prefix = 0.0, (BOS_ID,)
            for t in toks:
                row = model.logp(prefix).copy()
                row[list(BANNED)] = -np.inf
                if len(prefix) == max_len:
                    row[:] = -np.inf
                    row[EOS_ID] = model.logp(prefix)[EOS_ID]
                ll += row[t]
                prefix += (t,)
            out.append((toks, ll))
    return out


@pytest.mark.parametrize("seed", range(50))
def test_beam_one_equals_greedy(seed):
    m = ToyModel(6, seed)
    b = beam_search_core(m.step, None, 1, 8, 6)
    g = greedy_search_core(m.step, None, 8, 6)
    assert b[0].tokens == g.tokens
    assert b[0].log_likelihood == pytest.approx(g.log_likelihood)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("v", [4, 5])
def test_exhaustive_beam_finds_brute_force_optimum(v, seed):
    max_len = 5  # ids 0 and 1 are banned, 2 is eos
    m = ToyModel(v, seed, temperature=2.0)
    cands = brute_force(m, max_len)
    best = max(cands, key=lambda c: (c[1] / len(c[0])))
    hyps = beam_search_core(m.step, None, len(cands), max_len, v)
    assert hyps[0].tokens == best[0]
    assert hyps[0].normalized_score == pytest.approx(best[1] / len(best[0]))
    # wide enough beams find every complete sequence with its exact score
    assert {h.tokens for h in hyps} == {c[0] for c in cands}
    scores = {c[0]: c[1] for c in cands}
    for h in hyps:
        assert h.log_likelihood == pytest.approx(scores[h.tokens])


def test_hypotheses_sorted_and_complete():
    m = ToyModel(7, 3)
    hyps = beam_search_core(m.step, None, 4, 6, 7)
    assert all(h.complete for h in hyps)
    s = [h.normalized_score for h in hyps]
    assert s == sorted(s, reverse=True)
    assert all(BOS_ID not in h.tokens and 0 not in h.tokens for h in hyps)


def test_invalid_beam():
    with pytest.raises(UsageError):
        beam_search_core(ToyModel(4, 0).step, None, 0, 5, 4)


def test_model_beam_one_equals_greedy(rng):
    vocab = build_char_vocab(["ab"])
    cfg = tiny_config(len(vocab))
    ck = Checkpoint(init_params(cfg, 1), cfg, vocab)
    for _ in range(3):
        x = rng.standard_normal((10, cfg.d0)).astype(np.float32)
        assert beam_search(x, ck, beam=1, max_len=6)[0].tokens == greedy_decode(x, ck, max_len=6).tokens
        assert len(beam_search(x, ck, beam=3, max_len=6)) <= 3
