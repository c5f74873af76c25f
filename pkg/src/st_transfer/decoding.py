"""Beam search with length-normalised final ranking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import log_softmax_np
from .exceptions import UsageError
from .model import DecoderState, decode_step, encode
from .text import BOS_ID, EOS_ID, PAD_ID


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # without bos; ends with eos when complete
    log_likelihood: float

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def normalized_score(self) -> float:
        return self.log_likelihood / max(len(self.tokens), 1)

    @property
    def complete(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS_ID


# step_fn(prefixes, state) -> (log-probs [n, V], new state); state rows follow prefixes
StepFn = Callable[[list[tuple[int, ...]], object], tuple[np.ndarray, object]]


def beam_search_core(step_fn: StepFn, init_state, beam: int, max_len: int, vocab_size: int,
                     bos: int = BOS_ID, eos: int = EOS_ID,
                     banned: Sequence[int] = (PAD_ID, BOS_ID),
                     select_state: Callable[[object, np.ndarray], object] | None = None) -> list[Hypothesis]:
    """Generic beam search over a next-token log-prob function.

    Each step keeps the ``beam`` best expansions by total log-likelihood;
    expansions ending in eos leave the beam as finished hypotheses. At step
    ``max_len`` only eos is allowed, so every returned hypothesis is complete.
    Ties are broken by parent rank, then token index.
    """
    if beam < 1 or max_len < 1:
        raise UsageError("beam and max_len must be >= 1")
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    state = init_state
    finished: list[Hypothesis] = []
    ban = np.array([t for t in banned if t != eos], dtype=np.int64)
    for step in range(1, max_len + 1):
        logp, state = step_fn([(bos,) + toks for toks, _ in live], state)
        logp = np.array(logp, dtype=np.float64, copy=True)
        if ban.size:
            logp[:, ban] = -np.inf
        if step == max_len:
            keep = logp[:, eos].copy()
            logp[:] = -np.inf
            logp[:, eos] = keep
        scores = np.array([s for _, s in live])[:, None] + logp
        flat = scores.reshape(-1)
        # stable sort on -score keeps (parent, token) order for ties
        order = np.argsort(-flat, kind="stable")[:beam]
        new_live, parents = [], []
        for idx in order:
            sc = flat[idx]
            if not np.isfinite(sc):
                break
            parent, tok = divmod(int(idx), vocab_size)
            toks = live[parent][0] + (tok,)
            if tok == eos:
                finished.append(Hypothesis(toks, float(sc)))
            else:
                new_live.append((toks, float(sc)))
                parents.append(parent)
        if not new_live:
            break
        live = new_live
        if select_state is not None:
            state = select_state(state, np.asarray(parents))
    finished.sort(key=lambda h: -h.normalized_score)
    return finished[:beam]


def greedy_search_core(step_fn: StepFn, init_state, max_len: int, vocab_size: int,
                       bos: int = BOS_ID, eos: int = EOS_ID,
                       banned: Sequence[int] = (PAD_ID, BOS_ID)) -> Hypothesis:
    """Argmax decoding (lowest index on ties), eos forced at ``max_len``."""
    toks: tuple[int, ...] = ()
    ll = 0.0
    state = init_state
    for step in range(1, max_len + 1):
        logp, state = step_fn([(bos,) + toks], state)
        row = np.array(logp[0], dtype=np.float64, copy=True)
        for t in banned:
            if t != eos:
                row[t] = -np.inf
        if step == max_len:
            tok = eos
        else:
            tok = int(np.argmax(row))
        ll += row[tok]
        toks += (tok,)
        if tok == eos:
            break
    return Hypothesis(toks, ll)


# ------------------------------------------------------------------ model decoding


def _model_step_fn(ckpt_tensors, cfg, states):
    def step(prefixes, dstate):
        n = len(prefixes)
        enc = states if states.h.shape[0] == n else states.select(np.zeros(n, dtype=np.int64))
        prev = np.array([p[-1] for p in prefixes], dtype=np.int64)
        logits, new = decode_step(prev, dstate, enc, ckpt_tensors, cfg)
        return log_softmax_np(logits.data.astype(np.float64)), new
    return step


def beam_search(x, ckpt, beam: int = 5, max_len: int | None = None) -> list[Hypothesis]:
    """Decode one utterance with a checkpoint; returns up to ``beam`` ranked hypotheses."""
    frames = np.asarray(getattr(x, "frames", x))
    cfg = ckpt.config
    if max_len is None:
        max_len = default_max_len(frames.shape[0])
    tensors = {k: ag.Tensor(v) for k, v in ckpt.params.items()}
    with ag.no_grad():
        states = encode(frames, tensors, cfg)
        init = DecoderState.initial(1, cfg, tensors["enc.dnn1.W"].dtype)
        return beam_search_core(_model_step_fn(tensors, cfg, states), init, beam, max_len,
                                cfg.vocab_size, select_state=lambda s, rows: s.select(rows))


def greedy_decode(x, ckpt, max_len: int | None = None) -> Hypothesis:
    frames = np.asarray(getattr(x, "frames", x))
    cfg = ckpt.config
    if max_len is None:
        max_len = default_max_len(frames.shape[0])
    tensors = {k: ag.Tensor(v) for k, v in ckpt.params.items()}
    with ag.no_grad():
        states = encode(frames, tensors, cfg)
        init = DecoderState.initial(1, cfg, tensors["enc.dnn1.W"].dtype)
        return greedy_search_core(_model_step_fn(tensors, cfg, states), init, max_len, cfg.vocab_size)


def default_max_len(num_frames: int) -> int:
    return max(8, num_frames // 2)


def transcribe(utterances, ckpt, beam: int = 5, max_len: int | None = None) -> list[str]:
    """Best hypothesis text for each utterance."""
    out = []
    for u in utterances:
        feats = getattr(u, "features", u)
        hyps = beam_search(feats, ckpt, beam, max_len)
        out.append(ckpt.vocab.decode(hyps[0].tokens) if hyps else "")
    return out
