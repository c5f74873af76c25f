"""Parameter transfer between checkpoints and run comparison."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import IncompatibleError, UsageError
from .model import ModelConfig, ParameterSet, init_params
from .text import CharVocabulary
from .trainer import Checkpoint

VOCAB_ROLES = ("embedding", "softmax")


@dataclass
class TransferReport:
    transferred: list[str] = field(default_factory=list)
    replaced: list[str] = field(default_factory=list)
    reasons: dict[str, str] = field(default_factory=dict)  # replaced name -> why

    def summary(self) -> str:
        return f"transferred {len(self.transferred)} tensors, re-initialised {len(self.replaced)}"


def transfer_parameters(src: Checkpoint, tgt_cfg: ModelConfig, tgt_vocab: CharVocabulary,
                        seed: int = 0) -> tuple[ParameterSet, TransferReport]:
    """Initial parameters for a model of ``tgt_cfg`` warm-started from ``src``.

    With the same vocabulary everything is copied. Otherwise the embedding and
    output layers are freshly initialised (from ``seed``) and all other tensors
    are copied unchanged.
    """
    if src.config.core() != tgt_cfg.core():
        raise IncompatibleError(
            f"core dimensions differ: source {src.config.core()} vs target {tgt_cfg.core()}")
    if len(tgt_vocab) != tgt_cfg.vocab_size:
        raise UsageError(f"target vocabulary has {len(tgt_vocab)} symbols, config says {tgt_cfg.vocab_size}")
    same_vocab = src.vocab_fingerprint == tgt_vocab.fingerprint
    report = TransferReport()
    if same_vocab:
        if src.config.vocab_size != tgt_cfg.vocab_size:
            raise IncompatibleError("identical vocabulary fingerprints but different vocab sizes")
        report.transferred = list(src.params)
        return src.params.copy(), report
    fresh_names = src.params.names_with_role(*VOCAB_ROLES)
    fresh = init_params(tgt_cfg, seed, names=fresh_names)
    arrays = {}
    for name, value in src.params.items():
        if name in fresh_names:
            arrays[name] = fresh[name]
            report.replaced.append(name)
            report.reasons[name] = f"{src.params.roles[name]} layer depends on the vocabulary"
        else:
            arrays[name] = value.copy()
            report.transferred.append(name)
    return ParameterSet(arrays, src.params.roles), report


# ------------------------------------------------------------------ comparison


def relative_reduction(base: float, new: float) -> float:
    """``(base - new) / base`` as a percentage; negative when ``new`` is worse."""
    if base == 0:
        return 0.0 if new == 0 else -np.inf
    return 100.0 * (base - new) / base


def format_change(base: float, new: float) -> str:
    """Table-style signed relative change: ``40.9 -> 33.7`` renders ``-17.6%``."""
    change = -relative_reduction(base, new)
    return f"{change:+.1f}%" if change else "0.0%"


@dataclass(frozen=True)
class RunResult:
    name: str
    wer: float  # percent
    test_split: str  # identifies the evaluation set (e.g. a hash of its ids)


def compare_runs(runs: Sequence[RunResult], baseline: str | None = None) -> list[dict]:
    """Rows of (name, WER, relative reduction vs the baseline run, default the first)."""
    if not runs:
        raise UsageError("no runs to compare")
    splits = {r.test_split for r in runs}
    if len(splits) > 1:
        raise UsageError(f"runs were evaluated on different test splits: {sorted(splits)}")
    base = runs[0] if baseline is None else next((r for r in runs if r.name == baseline), None)
    if base is None:
        raise UsageError(f"baseline run {baseline!r} not found")
    return [{"run": r.name, "wer": round(r.wer, 2),
             "reduction": round(relative_reduction(base.wer, r.wer), 1),
             "change": format_change(base.wer, r.wer)} for r in runs]
