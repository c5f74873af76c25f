"""scikit-learn style wrappers around the frontend and the seq2seq model.

``X`` is a list of waveforms or feature matrices (one per utterance) and
``y`` a list of transcripts; for translation targets ``y`` may hold n-best
label sets instead of strings.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .audio import (AugmentPolicy, FeatureMatrix, Utterance, Waveform, apply_cmvn, apply_spec_augment,
                    compute_logmel)
from .decoding import beam_search, default_max_len
from .exceptions import UsageError
from .metrics import score_wer_cer
from .model import ModelConfig, init_params
from .optim import AdamConfig
from .pseudolabel import Candidate, LabelSamplerConfig, NBestLabelSet, prepare_labels
from .text import build_char_vocab
from .trainer import Checkpoint, TrainConfig, identity_labels, train
from .transfer import transfer_parameters


def _as_features(x) -> FeatureMatrix:
    if isinstance(x, FeatureMatrix):
        return x
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise UsageError(f"expected a [T, D] feature matrix, got shape {arr.shape}")
    return FeatureMatrix(arr.astype(np.float32))


class LogMelExtractor(TransformerMixin, BaseEstimator):
    """Waveforms -> 80-channel log-mel feature matrices (stateless)."""

    def __init__(self, n_mels: int = 80):
        self.n_mels = n_mels

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> list[FeatureMatrix]:
        out = []
        for w in X:
            if not isinstance(w, Waveform):
                w = Waveform(np.asarray(w, dtype=np.float64))
            out.append(compute_logmel(w, self.n_mels))
        return out


class CMVN(TransformerMixin, BaseEstimator):
    """Per-utterance mean/variance normalisation, or corpus statistics learned in ``fit``."""

    def __init__(self, per_utterance: bool = True):
        self.per_utterance = per_utterance

    def fit(self, X, y=None):
        if not self.per_utterance:
            allx = np.concatenate([_as_features(x).frames.astype(np.float64) for x in X])
            self.mean_, self.std_ = allx.mean(axis=0), allx.std(axis=0)
        return self

    def transform(self, X) -> list[FeatureMatrix]:
        feats = [_as_features(x) for x in X]
        if self.per_utterance:
            return [apply_cmvn(f) for f in feats]
        if not hasattr(self, "mean_"):
            raise NotFittedError("CMVN(per_utterance=False) must be fitted first")
        sd = np.where(self.std_ < 1e-6, 1.0, self.std_)
        out = []
        for f in feats:
            if f.cmvn_applied:
                raise UsageError("CMVN has already been applied to this feature matrix")
            z = (f.frames - self.mean_) / sd
            z[:, self.std_ < 1e-6] = 0.0
            out.append(FeatureMatrix(z.astype(np.float32), f.frame_shift_ms, f.frame_size_ms, True))
        return out


class SpecAugmenter(TransformerMixin, BaseEstimator):
    """Random frequency/time masks; meant for training data only."""

    def __init__(self, num_freq_masks: int = 1, max_freq_width: int = 27, num_time_masks: int = 1,
                 max_time_width: int = 100, random_state: int = 0):
        self.num_freq_masks = num_freq_masks
        self.max_freq_width = max_freq_width
        self.num_time_masks = num_time_masks
        self.max_time_width = max_time_width
        self.random_state = random_state

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> list[FeatureMatrix]:
        policy = AugmentPolicy(self.num_freq_masks, self.max_freq_width, self.num_time_masks,
                               self.max_time_width)
        rng = np.random.default_rng(self.random_state)
        return [apply_spec_augment(_as_features(x), policy, rng) for x in X]


class SpeechToTextModel(BaseEstimator):
    """Attention encoder-decoder for ASR or ST.

    ``init_checkpoint`` warm-starts ``fit`` from a trained model (a path or a
    ``Checkpoint``); vocabulary layers are re-initialised when the
    vocabulary changes. After fitting, ``checkpoint_`` holds the average of
    the last ``average_last`` epochs and ``curve_`` the training curve.
    """

    def __init__(self, d1: int = 256, d2: int = 128, d3: int = 512, d_o: int = 128,
                 encoder_blstm_layers: int = 3, decoder_layers: int = 2, epochs: int = 10,
                 learning_rate: float = 1e-3, max_frames_per_batch: int = 10000,
                 average_last: int = 5, beam: int = 5, specaugment: AugmentPolicy | None = None,
                 n_best: int = 1, filter_fraction: float = 0.0, init_checkpoint=None,
                 vocab=None, random_state: int = 0):
        self.d1 = d1
        self.d2 = d2
        self.d3 = d3
        self.d_o = d_o
        self.encoder_blstm_layers = encoder_blstm_layers
        self.decoder_layers = decoder_layers
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.max_frames_per_batch = max_frames_per_batch
        self.average_last = average_last
        self.beam = beam
        self.specaugment = specaugment
        self.n_best = n_best
        self.filter_fraction = filter_fraction
        self.init_checkpoint = init_checkpoint
        self.vocab = vocab
        self.random_state = random_state

    def _utterances(self, X, y=None) -> list[Utterance]:
        feats = [_as_features(x) for x in X]
        if y is not None and len(y) != len(feats):
            raise UsageError(f"{len(feats)} inputs but {len(y)} targets")
        out = []
        for i, f in enumerate(feats):
            if not f.cmvn_applied:
                f = apply_cmvn(f)
            target = "" if y is None else y[i]
            text = target.top.text if isinstance(target, NBestLabelSet) else str(target)
            out.append(Utterance(f"utt{i:06d}", f, text))
        return out

    def fit(self, X, y):
        utts = self._utterances(X, y)
        labeler = identity_labels
        texts: list[str] = [u.text for u in utts]
        if any(isinstance(t, NBestLabelSet) for t in y):
            # re-key by the internal utterance ids
            sets = {u.utt_id: NBestLabelSet(u.utt_id, t.candidates, t.k) if isinstance(t, NBestLabelSet)
                    else NBestLabelSet(u.utt_id, (Candidate(str(t), 0.0),)) for u, t in zip(utts, y)}
            labeler, _ = prepare_labels(sets, LabelSamplerConfig(self.n_best, self.filter_fraction,
                                                                 self.random_state))
            utts = labeler.select(utts)
            texts = [c for s in labeler.sets.values() for c in s.texts()]
        vocab = self.vocab if self.vocab is not None else build_char_vocab(texts)
        cfg = ModelConfig(len(vocab), d1=self.d1, d2=self.d2, d3=self.d3, d_o=self.d_o,
                          encoder_blstm_layers=self.encoder_blstm_layers, decoder_layers=self.decoder_layers)
        if self.init_checkpoint is not None:
            src = self.init_checkpoint
            if not isinstance(src, Checkpoint):
                src = Checkpoint.load(Path(src))
            params, self.transfer_report_ = transfer_parameters(src, cfg, vocab, self.random_state)
        else:
            params, self.transfer_report_ = init_params(cfg, self.random_state), None
        tc = TrainConfig(max_epochs=self.epochs, seed=self.random_state,
                         max_frames_per_batch=self.max_frames_per_batch, specaugment=self.specaugment,
                         optimizer=AdamConfig(lr=self.learning_rate), keep_last=self.average_last)
        result = train(cfg, params, utts, tc, vocab, labeler)
        self.checkpoint_ = result.averaged(self.average_last)
        self.curve_ = result.curve
        self.vocab_ = vocab
        return self

    def _check(self) -> Checkpoint:
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("call fit first")
        return self.checkpoint_

    def predict(self, X) -> list[str]:
        ckpt = self._check()
        out = []
        for u in self._utterances(X):
            hyps = beam_search(u.features, ckpt, self.beam, default_max_len(u.features.num_frames))
            out.append(ckpt.vocab.decode(hyps[0].tokens) if hyps else "")
        return out

    def score(self, X, y: Sequence[str]) -> float:
        """``1 - WER`` (higher is better, as scikit-learn expects)."""
        return 1.0 - score_wer_cer(list(y), self.predict(X), "word").error_rate
