import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from st_transfer.audio import FeatureMatrix, Waveform
from st_transfer.estimator import CMVN, LogMelExtractor, SpecAugmenter, SpeechToTextModel
from st_transfer.pseudolabel import Candidate, NBestLabelSet
from st_transfer.synth import generate_corpus, make_language_pair

SMALL = dict(d1=8, d2=4, d3=8, d_o=8, encoder_blstm_layers=1, decoder_layers=1, epochs=2,
             max_frames_per_batch=400, average_last=2, beam=2)


@pytest.fixture(scope="module")
def corpus():
    src, _ = make_language_pair(0, n_letters=6, n_words=6, word_length=(2, 3), frames_per_char=2)
    utts = generate_corpus(src, 10, (1, 2), seed=1)
    return [u.features for u in utts], [u.text for u in utts]


def test_clone_and_params():
    m = SpeechToTextModel(**SMALL)
    c = clone(m)
    assert c.get_params() == m.get_params()
    c.set_params(epochs=7)
    assert c.epochs == 7 and m.epochs == 2


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        SpeechToTextModel(**SMALL).predict([np.zeros((20, 80), np.float32)])


def test_fit_predict_score(corpus):
    X, y = corpus
    m = SpeechToTextModel(**SMALL).fit(X, y)
    assert len(m.curve_) == 2
    hyps = m.predict(X[:3])
    assert len(hyps) == 3 and all(isinstance(h, str) for h in hyps)
    s = m.score(X, y)
    assert s <= 1.0
    again = SpeechToTextModel(**SMALL).fit(X, y)
    assert again.predict(X[:3]) == hyps


def test_warm_start_with_new_vocab(corpus):
    X, y = corpus
    asr = SpeechToTextModel(**SMALL).fit(X, y)
    st_targets = [NBestLabelSet(str(i), (Candidate(t[::-1], -0.1), Candidate(t, -1.0)))
                  for i, t in enumerate(y)]
    st = SpeechToTextModel(**SMALL, n_best=2, init_checkpoint=asr.checkpoint_).fit(X, st_targets)
    assert st.transfer_report_ is not None
    assert asr.checkpoint_.params["enc.conv1.K"].shape == st.checkpoint_.params["enc.conv1.K"].shape


def test_filter_fraction_drops_examples(corpus):
    X, y = corpus
    targets = [NBestLabelSet(str(i), (Candidate(t, -float(i)),)) for i, t in enumerate(y)]
    m = SpeechToTextModel(**{**SMALL, "epochs": 1}, filter_fraction=0.2).fit(X, targets)
    assert m.checkpoint_ is not None


def test_length_mismatch(corpus):
    X, y = corpus
    with pytest.raises(Exception, match="targets"):
        SpeechToTextModel(**SMALL).fit(X, y[:-1])


def test_frontend_transformers():
    rng = np.random.default_rng(0)
    waves = [Waveform(rng.normal(0, 0.1, 16000)), Waveform(rng.normal(0, 0.1, 8000))]
    feats = make_pipeline(LogMelExtractor(), CMVN()).fit_transform(waves)
    assert [f.num_frames for f in feats] == [98, 48]
    for f in feats:
        assert np.abs(f.frames.mean(axis=0)).max() < 1e-4


def test_corpus_cmvn_uses_fitted_stats():
    rng = np.random.default_rng(1)
    X = [rng.normal(3, 2, (50, 80)).astype(np.float32) for _ in range(4)]
    cm = CMVN(per_utterance=False).fit(X)
    pooled = np.concatenate([f.frames for f in cm.transform(X)])
    assert np.allclose(pooled.mean(axis=0), 0, atol=1e-4)
    assert np.allclose(pooled.std(axis=0), 1, atol=1e-3)
    with pytest.raises(NotFittedError):
        CMVN(per_utterance=False).transform(X)


def test_spec_augmenter_is_seeded():
    X = CMVN().fit_transform([np.random.default_rng(2).normal(size=(200, 80))])
    a = SpecAugmenter(max_freq_width=10, max_time_width=20, random_state=4).fit_transform(X)[0]
    b = SpecAugmenter(max_freq_width=10, max_time_width=20, random_state=4).fit_transform(X)[0]
    assert isinstance(a, FeatureMatrix)
    assert np.array_equal(a.frames, b.frames)
    assert (a.frames == 0).any()
