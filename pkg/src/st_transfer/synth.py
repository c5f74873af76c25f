"""Synthetic paired languages rendered directly as filterbank-like features.

Both languages of a pair draw their characters' spectral templates from one
shared "phone" inventory, so an encoder trained on one language is a useful
starting point for the other, while the character sets (and therefore the
vocabularies) are disjoint.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .audio import FeatureMatrix, NUM_MEL, Utterance, Waveform, compute_logmel
from .exceptions import InputError

SOURCE_LETTERS = "abcdefghijklmnop"
TARGET_LETTERS = "абвгдежзиклмнопр"


@dataclass
class SyntheticLanguageSpec:
    name: str
    charset: str  # includes the space character
    lexicon: list[str]
    templates: dict[str, np.ndarray]  # char -> [frames_per_char, 80]
    frames_per_char: int = 4
    noise_std: float = 0.3
    translation: dict[str, str] = field(default_factory=dict)  # word -> paired-language word
    reordering: str = "swap_pairs"  # or "swap_last", "identity"
    seed: int = 0
    phones: dict[str, int] = field(default_factory=dict)  # char -> phone index (waveform mode)

    def check_distinguishable(self) -> float:
        """Minimum pairwise L2 distance between templates; raises if too small."""
        chars = sorted(self.templates)
        best = np.inf
        for i, a in enumerate(chars):
            for b in chars[i + 1:]:
                best = min(best, float(np.linalg.norm(self.templates[a] - self.templates[b])))
        if len(chars) > 1 and not best > 5 * self.noise_std:
            raise InputError(f"templates too close ({best:.3f}) for noise_std {self.noise_std}")
        return best

    def inverse_translation(self) -> dict[str, str]:
        return {v: k for k, v in self.translation.items()}


def reorder_words(words: Sequence[str], rule: str) -> list[str]:
    words = list(words)
    if rule == "identity":
        return words
    if rule == "swap_last":
        return words[:-2] + words[-2:][::-1]
    if rule == "swap_pairs":
        out = []
        for i in range(0, len(words) - 1, 2):
            out += [words[i + 1], words[i]]
        if len(words) % 2:
            out.append(words[-1])
        return out
    raise InputError(f"unknown reordering rule {rule!r}")


def translate_exact(text: str, spec: SyntheticLanguageSpec) -> str:
    """Word-by-word lexicon mapping followed by the reordering rule."""
    try:
        mapped = [spec.translation[w] for w in text.split()]
    except KeyError as e:
        raise InputError(f"word {e.args[0]!r} not in the oracle lexicon") from None
    return " ".join(reorder_words(mapped, spec.reordering))


def invert_translation(text: str, spec: SyntheticLanguageSpec) -> str:
    inv = spec.inverse_translation()
    # every supported rule is an involution
    return " ".join(inv[w] for w in reorder_words(text.split(), spec.reordering))


def _phone_inventory(n: int, frames: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.normal(0.0, 1.0, size=(n, frames, NUM_MEL))
    # light smoothing along frequency gives spectrum-like envelopes
    kernel = np.array([0.25, 0.5, 0.25])
    smooth = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), 2, base)
    return 2.0 * smooth


def _make_lexicon(letters: str, n_words: int, length_range: tuple[int, int],
                  rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen = set()
    lo, hi = length_range
    while len(words) < n_words:
        n = int(rng.integers(lo, hi + 1))
        w = "".join(rng.choice(list(letters), size=n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def make_language_pair(seed: int = 0, n_letters: int = 12, n_words: int = 24,
                       word_length: tuple[int, int] = (2, 4), frames_per_char: int = 4,
                       noise_std: float = 0.3, reordering: str = "swap_pairs",
                       ) -> tuple[SyntheticLanguageSpec, SyntheticLanguageSpec]:
    """Source and target languages sharing a phone inventory.

    Target letter ``j`` is pronounced like source letter ``perm[j]``; the space
    maps to a dedicated pause phone. The source spec carries the translation
    lexicon (source word -> target word).
    """
    rng = np.random.default_rng([seed, 7])
    if not 1 <= n_letters <= len(SOURCE_LETTERS):
        raise InputError(f"n_letters must be in [1, {len(SOURCE_LETTERS)}]")
    phones = _phone_inventory(n_letters + 1, frames_per_char, rng)
    src_letters, tgt_letters = SOURCE_LETTERS[:n_letters], TARGET_LETTERS[:n_letters]
    perm = rng.permutation(n_letters)
    src_phone = {c: i for i, c in enumerate(src_letters)}
    tgt_phone = {c: int(perm[j]) for j, c in enumerate(tgt_letters)}
    src_phone[" "] = tgt_phone[" "] = n_letters
    src_words = _make_lexicon(src_letters, n_words, word_length, rng)
    tgt_words = _make_lexicon(tgt_letters, n_words, word_length, rng)
    src = SyntheticLanguageSpec(
        "src", src_letters + " ", src_words, {c: phones[i] for c, i in src_phone.items()},
        frames_per_char, noise_std, dict(zip(src_words, tgt_words)), reordering, seed, src_phone)
    tgt = SyntheticLanguageSpec(
        "tgt", tgt_letters + " ", tgt_words, {c: phones[i] for c, i in tgt_phone.items()},
        frames_per_char, noise_std, dict(zip(tgt_words, src_words)), reordering, seed, tgt_phone)
    src.check_distinguishable()
    tgt.check_distinguishable()
    return src, tgt


def render_features(text: str, spec: SyntheticLanguageSpec, rng: np.random.Generator) -> FeatureMatrix:
    if not text:
        raise InputError("cannot render empty text")
    try:
        clean = np.concatenate([spec.templates[c] for c in text])
    except KeyError as e:
        raise InputError(f"character {e.args[0]!r} has no template in language {spec.name}") from None
    if spec.noise_std > 0:
        clean = clean + rng.normal(0.0, spec.noise_std, size=clean.shape)
    return FeatureMatrix(clean.astype(np.float32))


def render_waveform(text: str, spec: SyntheticLanguageSpec, sample_rate: int = 16000,
                    rng: np.random.Generator | None = None) -> Waveform:
    """Each character becomes ``10 * frames_per_char`` ms of a phone-specific chord."""
    n = sample_rate * spec.frames_per_char // 100
    t = np.arange(n) / sample_rate
    chunks = []
    for c in text:
        ph = spec.phones.get(c)
        if ph is None:
            raise InputError(f"character {c!r} has no phone in language {spec.name}")
        f0 = 300.0 + 250.0 * ph
        chunks.append(0.3 * np.sin(2 * np.pi * f0 * t) + 0.15 * np.sin(2 * np.pi * 2.3 * f0 * t))
    wav = np.concatenate(chunks)
    if rng is not None and spec.noise_std > 0:
        wav = wav + rng.normal(0.0, 0.01 * spec.noise_std, size=wav.shape)
    return Waveform(np.clip(wav, -1.0, 1.0), sample_rate)


def sample_sentence(spec: SyntheticLanguageSpec, n_words_range: tuple[int, int],
                    rng: np.random.Generator) -> str:
    lo, hi = n_words_range
    n = int(rng.integers(lo, hi + 1))
    return " ".join(spec.lexicon[i] for i in rng.integers(0, len(spec.lexicon), size=n))


def generate_corpus(spec: SyntheticLanguageSpec, n_utterances: int,
                    utterance_len_range: tuple[int, int] = (2, 4), seed: int | None = None,
                    prefix: str | None = None, waveform: bool = False) -> list[Utterance]:
    """Utterances of ``utterance_len_range`` words with template features plus noise.

    Features are returned before CMVN. ``waveform=True`` renders audio and runs
    the log-mel frontend instead of writing templates directly.
    """
    if n_utterances < 1:
        raise InputError("n_utterances must be >= 1")
    if not spec.lexicon:
        raise InputError("empty lexicon")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 11])
    prefix = prefix or spec.name
    out = []
    for i in range(n_utterances):
        text = sample_sentence(spec, utterance_len_range, rng)
        feats = (compute_logmel(render_waveform(text, spec, rng=rng)) if waveform
                 else render_features(text, spec, rng))
        out.append(Utterance(f"{prefix}-{i:05d}", feats, text, spec.name))
    return out


@dataclass(frozen=True)
class TranslationPair:
    source: Utterance
    reference: str  # exact target-language translation


def generate_translation_pairs(src_spec: SyntheticLanguageSpec, n: int,
                               utterance_len_range: tuple[int, int] = (2, 4),
                               seed: int | None = None, prefix: str | None = None) -> list[TranslationPair]:
    corpus = generate_corpus(src_spec, n, utterance_len_range, seed, prefix)
    return [TranslationPair(u, translate_exact(u.text, src_spec)) for u in corpus]


def spec_to_dict(spec: SyntheticLanguageSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["templates"] = {c: t.tolist() for c, t in spec.templates.items()}
    return d


def spec_from_dict(d: dict) -> SyntheticLanguageSpec:
    d = dict(d)
    d["templates"] = {c: np.asarray(t, dtype=np.float64) for c, t in d["templates"].items()}
    return SyntheticLanguageSpec(**d)
