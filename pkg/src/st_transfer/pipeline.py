"""Multi-stage transfer recipes (source ASR -> optional ST -> target ASR).

A pipeline file declares corpora, pseudo-label sets, vocabularies and an
ordered list of training stages. Each stage may warm-start from an earlier
stage; evaluated stages are decoded on the evaluation corpus and compared in
``report.csv``. Several chains can share upstream stages, which is how the
baseline, direct-transfer and ST-enhanced runs are trained in one go.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .audio import AugmentPolicy, FeatureMatrix, Utterance, apply_cmvn, filter_by_length, load_features
from .decoding import beam_search, default_max_len
from .exceptions import InputError, TrainingAborted, UsageError
from .metrics import score_wer_cer
from .model import ModelConfig, init_params
from .optim import AdamConfig
from .pseudolabel import (LabelSamplerConfig, NBestLabelSet, ingest_nbest, prepare_labels,
                          synthetic_nbest)
from .synth import SyntheticLanguageSpec, generate_corpus, make_language_pair
from .text import CharVocabulary, build_char_vocab, read_manifest
from .trainer import (Checkpoint, CurvePoint, TrainConfig, identity_labels, read_curve, train,
                      write_curve)
from .transfer import TransferReport, format_change, relative_reduction, transfer_parameters

log = logging.getLogger(__name__)

VARIANTS = ("TgtASR", "SrcASR→TgtASR", "SrcASR→ST→TgtASR", "Src+TgtASR→TgtASR",
            "Src+TgtASR→ST→TgtASR", "ST-scratch→TgtASR")
_DONE = "stage.json"


def check_keys(d: Mapping, allowed: Sequence[str], where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise UsageError(f"unknown key(s) {sorted(unknown)} in {where}")


def derive_seed(seed: int, name: str) -> int:
    """Per-stage/per-corpus seed fanned out from the top-level seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]).generate_state(1)[0])


# ------------------------------------------------------------------ spec


@dataclass(frozen=True)
class CorpusSpec:
    name: str
    language: str
    manifest: str | None = None
    synthetic: int | None = None  # number of utterances drawn from the synthetic pair
    words: tuple[int, int] = (2, 4)

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise UsageError(f"corpus {self.name!r} needs exactly one of 'manifest' or 'synthetic'")


@dataclass(frozen=True)
class LabelSpec:
    name: str
    file: str | None = None
    source: str | None = None  # corpus to pseudo-label with the synthetic oracle
    k: int = 5
    noise_rate: float = 0.0
    top1_error_rate: float = 0.0

    def __post_init__(self):
        if (self.file is None) == (self.source is None):
            raise UsageError(f"label set {self.name!r} needs exactly one of 'file' or 'source'")


@dataclass(frozen=True)
class VocabSpec:
    name: str
    file: str | None = None
    corpora: tuple[str, ...] = ()
    labels: tuple[str, ...] = ()
    charset: str | None = None  # "source" or "target": every letter of a synthetic language


@dataclass(frozen=True)
class StageSpec:
    name: str
    task: str  # "asr" or "st"
    corpora: tuple[str, ...]
    vocab: str
    init: str | None = None
    epochs: int = 10
    labels: str | None = None
    sampler: LabelSamplerConfig = LabelSamplerConfig(n=1, filter_fraction=0.0)
    evaluate: bool = False
    variant: str | None = None
    language_prefix: bool = False  # joint ASR: prepend "<lang> " to every label
    ratios: Mapping[str, float] | None = None  # joint ASR: per-corpus sampling proportion

    def __post_init__(self):
        if self.task not in ("asr", "st"):
            raise UsageError(f"stage {self.name!r}: task must be 'asr' or 'st'")
        if self.task == "st" and self.labels is None:
            raise UsageError(f"ST stage {self.name!r} needs a label set")
        if self.epochs < 1:
            raise UsageError(f"stage {self.name!r}: epochs must be >= 1")


@dataclass
class PipelineSpec:
    name: str
    corpora: dict[str, CorpusSpec]
    vocabs: dict[str, VocabSpec]
    stages: list[StageSpec]
    labels: dict[str, LabelSpec] = field(default_factory=dict)
    seed: int = 0
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    synthetic: dict | None = None
    source_language: str = "src"
    target_language: str = "tgt"
    evaluation: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for st in self.stages:
            if st.name in seen:
                raise UsageError(f"duplicate stage name {st.name!r}")
            if st.init is not None and st.init not in seen:
                raise UsageError(f"stage {st.name!r} initialises from {st.init!r}, which is not an earlier stage")
            seen.add(st.name)
            for c in st.corpora:
                if c not in self.corpora:
                    raise UsageError(f"stage {st.name!r} uses unknown corpus {c!r}")
            if st.vocab not in self.vocabs:
                raise UsageError(f"stage {st.name!r} uses unknown vocabulary {st.vocab!r}")
            if st.labels is not None and st.labels not in self.labels:
                raise UsageError(f"stage {st.name!r} uses unknown label set {st.labels!r}")
            if st.variant is not None:
                if st.variant not in VARIANTS:
                    raise UsageError(f"stage {st.name!r}: unknown variant {st.variant!r}")
                if st.variant != self.variant_of(st.name):
                    raise UsageError(f"stage {st.name!r} declares {st.variant!r} but its chain is "
                                     f"{self.variant_of(st.name)!r}")
        if not self.stages:
            raise UsageError("a pipeline needs at least one stage")
        ev = self.evaluation
        check_keys(ev, ("corpus", "beam", "average_last", "baseline", "max_len"), "evaluation")
        if any(s.evaluate for s in self.stages) and ev.get("corpus") not in self.corpora:
            raise UsageError("evaluated stages need evaluation.corpus naming a declared corpus")
        check_keys(self.model, [f.name for f in dataclasses.fields(ModelConfig) if f.name != "vocab_size"],
                   "model")
        check_keys(self.train, ("max_frames_per_batch", "bucket_size", "specaugment", "optimizer", "keep_last"),
                   "train")

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise UsageError(f"no stage named {name!r}")

    def stage_tag(self, st: StageSpec) -> str:
        if st.task == "st":
            return "ST" if st.init is not None else "ST-scratch"
        langs = {self.corpora[c].language for c in st.corpora}
        src, tgt = self.source_language in langs, self.target_language in langs
        if src and tgt:
            return "Src+TgtASR"
        return "SrcASR" if src else "TgtASR" if tgt else "ASR"

    def variant_of(self, name: str) -> str:
        chain = []
        st: StageSpec | None = self.stage(name)
        while st is not None:
            chain.append(self.stage_tag(st))
            st = self.stage(st.init) if st.init else None
        return "→".join(reversed(chain))

    def to_dict(self) -> dict:
        def clean(o):
            if dataclasses.is_dataclass(o):
                return {k: clean(v) for k, v in dataclasses.asdict(o).items() if k != "name"}
            if isinstance(o, (list, tuple)):
                return [clean(x) for x in o]
            if isinstance(o, Mapping):
                return {k: clean(v) for k, v in o.items()}
            return o
        stages = []
        for s in self.stages:
            d = {"name": s.name, **clean(s)}
            stages.append(d)
        return {"name": self.name, "seed": self.seed, "source_language": self.source_language,
                "target_language": self.target_language, "synthetic": self.synthetic,
                "model": dict(self.model), "train": clean(self.train),
                "corpora": {k: clean(v) for k, v in self.corpora.items()},
                "labels": {k: clean(v) for k, v in self.labels.items()},
                "vocabs": {k: clean(v) for k, v in self.vocabs.items()},
                "stages": stages, "evaluation": dict(self.evaluation)}


_TOP_KEYS = ("name", "seed", "source_language", "target_language", "synthetic", "model", "train",
             "corpora", "labels", "vocabs", "stages", "evaluation")


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)


def pipeline_from_dict(d: Mapping, base_dir: str | Path | None = None) -> PipelineSpec:
    """Build a spec from parsed YAML/JSON; relative paths resolve against ``base_dir``."""
    check_keys(d, _TOP_KEYS, "pipeline")
    base = Path(base_dir) if base_dir is not None else None

    def path(p):
        if p is None or base is None or Path(p).is_absolute():
            return p
        return str(base / p)

    corpora = {}
    for name, c in (d.get("corpora") or {}).items():
        check_keys(c, ("language", "manifest", "synthetic", "words"), f"corpora.{name}")
        if "language" not in c:
            raise UsageError(f"corpus {name!r} needs a language")
        corpora[name] = CorpusSpec(name, c["language"], path(c.get("manifest")), c.get("synthetic"),
                                   tuple(c.get("words", (2, 4))))
    labels = {}
    for name, lab in (d.get("labels") or {}).items():
        check_keys(lab, ("file", "source", "k", "noise_rate", "top1_error_rate"), f"labels.{name}")
        labels[name] = LabelSpec(name, path(lab.get("file")), lab.get("source"), int(lab.get("k", 5)),
                                 float(lab.get("noise_rate", 0.0)), float(lab.get("top1_error_rate", 0.0)))
    vocabs = {}
    for name, v in (d.get("vocabs") or {}).items():
        check_keys(v, ("file", "corpora", "labels", "charset"), f"vocabs.{name}")
        vocabs[name] = VocabSpec(name, path(v.get("file")), tuple(v.get("corpora", ())),
                                 tuple(v.get("labels", ())), v.get("charset"))
    stages = []
    for i, s in enumerate(d.get("stages") or []):
        check_keys(s, [f.name for f in dataclasses.fields(StageSpec)], f"stages[{i}]")
        s = dict(s)
        if "name" not in s:
            raise UsageError(f"stages[{i}] needs a name")
        sampler = s.pop("sampler", None)
        if sampler is not None:
            check_keys(sampler, ("n", "filter_fraction", "seed"), f"stages[{i}].sampler")
            s["sampler"] = LabelSamplerConfig(**sampler)
        s["corpora"] = _tuple(s.get("corpora", ()))
        stages.append(StageSpec(**s))
    synthetic = d.get("synthetic")
    if synthetic is not None:
        check_keys(synthetic, ("n_letters", "n_words", "word_length", "frames_per_char", "noise_std",
                               "reordering"), "synthetic")
    return PipelineSpec(
        name=d.get("name", "pipeline"), corpora=corpora, vocabs=vocabs, stages=stages, labels=labels,
        seed=int(d.get("seed", 0)), model=dict(d.get("model") or {}), train=dict(d.get("train") or {}),
        synthetic=synthetic, source_language=d.get("source_language", "src"),
        target_language=d.get("target_language", "tgt"), evaluation=dict(d.get("evaluation") or {}))


def load_pipeline(path: str | Path, overrides: Mapping[str, Any] | None = None) -> PipelineSpec:
    with open(path, encoding="utf-8") as f:
        d = yaml.safe_load(f) or {}
    if overrides:
        d = {**d, **overrides}
    return pipeline_from_dict(d, Path(path).parent)


def bundled_pipeline_path() -> Path:
    return Path(__file__).with_name("data") / "synthetic.yaml"


# ------------------------------------------------------------------ running


@dataclass
class StageResult:
    name: str
    variant: str
    checkpoint: Checkpoint  # averaged over the last checkpoints
    curve: list[CurvePoint]
    metrics: dict = field(default_factory=dict)
    transfer: TransferReport | None = None
    resumed: bool = False


@dataclass
class PipelineResult:
    stages: dict[str, StageResult]
    report: list[dict]
    run_dir: Path | None = None


class _Env:
    """Lazily materialised corpora, label sets and vocabularies."""

    def __init__(self, spec: PipelineSpec):
        self.spec = spec
        self._corpora: dict[str, list[Utterance]] = {}
        self._labels: dict[str, dict[str, NBestLabelSet]] = {}
        self._vocabs: dict[str, CharVocabulary] = {}
        self.pair: tuple[SyntheticLanguageSpec, SyntheticLanguageSpec] | None = None
        if spec.synthetic is not None:
            kw = dict(spec.synthetic)
            if "word_length" in kw:
                kw["word_length"] = tuple(kw["word_length"])
            self.pair = make_language_pair(spec.seed, **kw)

    def language(self, tag: str) -> SyntheticLanguageSpec:
        if self.pair is None:
            raise UsageError("synthetic corpora need a 'synthetic' section")
        if tag == self.spec.source_language:
            return self.pair[0]
        if tag == self.spec.target_language:
            return self.pair[1]
        raise UsageError(f"synthetic corpora must use language {self.spec.source_language!r} "
                         f"or {self.spec.target_language!r}, not {tag!r}")

    def corpus(self, name: str) -> list[Utterance]:
        if name not in self._corpora:
            c = self.spec.corpora[name]
            if c.synthetic is not None:
                raw = generate_corpus(self.language(c.language), int(c.synthetic), c.words,
                                      seed=derive_seed(self.spec.seed, "corpus/" + name), prefix=name)
                utts = [Utterance(u.utt_id, apply_cmvn(u.features), u.text, c.language) for u in raw]
            else:
                utts = load_manifest_corpus(c.manifest, c.language)
            kept, removed = filter_by_length(utts)
            if len(removed):
                log.info("corpus %s: removed %d over-long samples", name, len(removed))
            self._corpora[name] = kept
        return self._corpora[name]

    def labels(self, name: str) -> dict[str, NBestLabelSet]:
        if name not in self._labels:
            lab = self.spec.labels[name]
            if lab.file is not None:
                self._labels[name] = ingest_nbest(lab.file)
            else:
                if self.pair is None:
                    raise UsageError(f"label set {name!r} uses the synthetic oracle but there is no pair")
                self._labels[name] = synthetic_nbest(
                    self.corpus(lab.source), self.pair[0], lab.k, lab.noise_rate,
                    derive_seed(self.spec.seed, "labels/" + name), lab.top1_error_rate)
        return self._labels[name]

    def vocab(self, name: str) -> CharVocabulary:
        if name not in self._vocabs:
            v = self.spec.vocabs[name]
            if v.file is not None:
                self._vocabs[name] = CharVocabulary.load(v.file)
            else:
                texts: list[str] = []
                if v.charset is not None:
                    if self.pair is None or v.charset not in ("source", "target"):
                        raise UsageError(f"vocab {name!r}: charset must be 'source' or 'target' "
                                         "of a synthetic pair")
                    texts.append(self.pair[0 if v.charset == "source" else 1].charset)
                for c in v.corpora:
                    texts += [u.text for u in self.corpus(c)]
                for lab in v.labels:
                    texts += [t for s in self.labels(lab).values() for t in s.texts()]
                for st in self.spec.stages:
                    if st.vocab == name and st.language_prefix:
                        texts += [_prefix(self.spec.corpora[c].language) for c in st.corpora]
                self._vocabs[name] = build_char_vocab(texts)
        return self._vocabs[name]


def _prefix(language: str) -> str:
    return f"<{language}> "


def load_manifest_corpus(path: str | Path, language: str | None = None) -> list[Utterance]:
    """Utterances from a manifest whose paths reference a feature cache (``cache:offset``)."""
    base = Path(path).parent
    out = []
    for e in read_manifest(path):
        ref = e.path
        cache, _, off = ref.rpartition(":")
        if cache and not Path(cache).is_absolute():
            ref = f"{base / cache}:{off}"
        feats = FeatureMatrix(load_features(ref))
        out.append(Utterance(e.utt_id, apply_cmvn(feats), e.text, language or e.language))
    return out


def _mix(corpora: list[list[Utterance]], names: Sequence[str], ratios: Mapping[str, float] | None,
         rng: np.random.Generator) -> list[Utterance]:
    """Concatenate corpora; ``ratios`` rescale each corpus (repeat or subsample) before joining."""
    if not ratios:
        return [u for c in corpora for u in c]
    check_keys(ratios, names, "ratios")
    out = []
    for name, c in zip(names, corpora):
        r = float(ratios.get(name, 1.0))
        if r < 0:
            raise UsageError("ratios must be >= 0")
        if not c:
            continue
        whole, part = divmod(int(round(r * len(c))), len(c))
        for rep in range(whole):
            # repeated utterances get distinct ids so their augmentation streams differ
            out += c if rep == 0 else [dataclasses.replace(u, utt_id=f"{u.utt_id}#{rep}") for u in c]
        extra = [c[i] for i in sorted(rng.choice(len(c), part, replace=False))]
        out += extra if whole == 0 else [dataclasses.replace(u, utt_id=f"{u.utt_id}#{whole}") for u in extra]
    return out


def _model_config(spec: PipelineSpec, vocab: CharVocabulary) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), **spec.model)


def _train_config(spec: PipelineSpec, epochs: int, seed: int) -> TrainConfig:
    t = dict(spec.train)
    if t.get("specaugment") is not None:
        t["specaugment"] = AugmentPolicy(**t["specaugment"])
    if "optimizer" in t:
        t["optimizer"] = AdamConfig(**t["optimizer"])
    return TrainConfig(max_epochs=epochs, seed=seed, **t)


def _stage_key(spec: PipelineSpec, st: StageSpec) -> str:
    """Hash of everything that determines a stage's output, including its init chain."""
    chain = []
    s: StageSpec | None = st
    while s is not None:
        chain.append(dataclasses.asdict(s) | {"sampler": dataclasses.asdict(s.sampler)})
        s = spec.stage(s.init) if s.init else None
    d = spec.to_dict()
    blob = json.dumps({"chain": chain, "seed": spec.seed, "model": d["model"], "train": d["train"],
                       "synthetic": d["synthetic"], "corpora": d["corpora"], "labels": d["labels"],
                       "vocabs": d["vocabs"]}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def split_id(utts: Sequence[Utterance]) -> str:
    return hashlib.sha256("\n".join(sorted(u.utt_id for u in utts)).encode("utf-8")).hexdigest()[:12]


def evaluate_checkpoint(ckpt: Checkpoint, utts: Sequence[Utterance], beam: int = 5,
                        max_len: int | None = None, strip_prefix: str = "") -> tuple[dict, list[tuple]]:
    """Beam-search the corpus and score WER and CER; returns metrics and (id, ref, hyp) rows."""
    rows = []
    for u in utts:
        hyps = beam_search(u.features, ckpt, beam, max_len or default_max_len(u.features.num_frames))
        text = ckpt.vocab.decode(hyps[0].tokens) if hyps else ""
        if strip_prefix and text.startswith(strip_prefix):
            text = text[len(strip_prefix):]
        rows.append((u.utt_id, u.text, text))
    refs, outs = [r[1] for r in rows], [r[2] for r in rows]
    wer = score_wer_cer(refs, outs, "word")
    cer = score_wer_cer(refs, outs, "char")
    return {"wer": 100 * wer.error_rate, "cer": 100 * cer.error_rate, "num_utterances": len(rows),
            "test_split": split_id(utts)}, rows


def _write_metrics(path: Path, metrics: Mapping) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, v])


def _read_metrics(path: Path) -> dict:
    out: dict = {}
    if not path.exists():
        return out
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            try:
                out[row["metric"]] = float(row["value"])
            except ValueError:
                out[row["metric"]] = row["value"]
    return out


def run_pipeline(spec: PipelineSpec, run_dir: str | Path | None = None, resume: bool = True,
                 on_stage=None) -> PipelineResult:
    """Train every stage in order, evaluate the flagged ones and write the report.

    With ``run_dir`` set, stage outputs land in ``run_dir/stage-k/`` and a
    stage whose ``stage.json`` exists (with a matching configuration hash) is
    loaded instead of retrained.
    """
    env = _Env(spec)
    root = Path(run_dir) if run_dir is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "pipeline.resolved.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump(spec.to_dict(), f, sort_keys=False, allow_unicode=True)
    ev = spec.evaluation
    average_last = int(ev.get("average_last", 5))
    results: dict[str, StageResult] = {}
    for k, st in enumerate(spec.stages, 1):
        sdir = root / f"stage-{k}" if root is not None else None
        key = _stage_key(spec, st)
        variant = spec.variant_of(st.name)
        if resume and sdir is not None and (sdir / _DONE).exists():
            meta = json.loads((sdir / _DONE).read_text(encoding="utf-8"))
            if meta.get("key") == key:
                ckpt = Checkpoint.load(sdir / "checkpoints" / "averaged.ckpt")
                res = StageResult(st.name, variant, ckpt, read_curve(sdir / "curve.csv"),
                                  _read_metrics(sdir / "metrics.csv"), resumed=True)
                results[st.name] = res
                log.info("stage %d (%s): already complete, skipped", k, st.name)
                if on_stage is not None:
                    on_stage(res)
                continue
            log.info("stage %d (%s): configuration changed, retraining", k, st.name)
        seed = derive_seed(spec.seed, "stage/" + st.name)
        vocab = env.vocab(st.vocab)
        cfg = _model_config(spec, vocab)
        report = None
        if st.init is None:
            params = init_params(cfg, seed)
        else:
            params, report = transfer_parameters(results[st.init].checkpoint, cfg, vocab, seed)
        corpora = [env.corpus(c) for c in st.corpora]
        data = _mix(corpora, st.corpora, st.ratios, np.random.default_rng(seed))
        labeler = identity_labels
        metrics: dict = {}
        if st.task == "st":
            provider, removed = prepare_labels(env.labels(st.labels), st.sampler)
            data = provider.select(data)
            labeler = provider
            metrics["filtered_examples"] = len(removed)
        if st.language_prefix:
            base_labeler = labeler
            lang_of = {u.utt_id: u.language for u in data}
            labeler = lambda u, e: _prefix(lang_of[u.utt_id]) + base_labeler(u, e)  # noqa: E731
        if not data:
            raise InputError(f"stage {st.name!r} has no training data")
        log.info("stage %d (%s, %s): %d utterances, %d epochs", k, st.name, variant, len(data), st.epochs)
        try:
            tr = train(cfg, params, data, _train_config(spec, st.epochs, seed), vocab, labeler,
                       out_dir=sdir / "checkpoints" if sdir is not None else None)
        except TrainingAborted as e:
            raise TrainingAborted(f"stage {st.name!r}: {e}") from e
        ckpt = tr.averaged(average_last)
        metrics.update({"train_utterances": len(data), "epoch1_accuracy": tr.curve[0].token_accuracy,
                        "final_accuracy": tr.curve[-1].token_accuracy, "final_loss": tr.curve[-1].loss})
        rows = []
        if st.evaluate:
            prefix = _prefix(spec.target_language) if st.language_prefix else ""
            m, rows = evaluate_checkpoint(ckpt, env.corpus(ev["corpus"]), int(ev.get("beam", 5)),
                                          ev.get("max_len"), prefix)
            metrics.update(m)
        res = StageResult(st.name, variant, ckpt, tr.curve, metrics, report)
        results[st.name] = res
        if sdir is not None:
            ckpt.save(sdir / "checkpoints" / "averaged.ckpt")
            write_curve(tr.curve, sdir / "curve.csv")
            _write_metrics(sdir / "metrics.csv", metrics)
            if rows:
                with open(sdir / "hypotheses.tsv", "w", encoding="utf-8", newline="\n") as f:
                    f.writelines(f"{i}\t{r}\t{h}\n" for i, r, h in rows)
            meta = {"name": st.name, "variant": variant, "key": key, "seed": seed, "epochs": st.epochs,
                    "transfer": dataclasses.asdict(report) if report is not None else None}
            (sdir / _DONE).write_text(json.dumps(meta, indent=1, ensure_ascii=False), encoding="utf-8")
        if on_stage is not None:
            on_stage(res)
    rep = build_report(spec, results)
    if root is not None:
        write_report(rep, root / "report.csv")
    return PipelineResult(results, rep, root)


def build_report(spec: PipelineSpec, results: Mapping[str, StageResult]) -> list[dict]:
    evaluated = [results[s.name] for s in spec.stages if s.evaluate]
    if not evaluated:
        return []
    splits = {r.metrics.get("test_split") for r in evaluated}
    if len(splits) > 1:
        raise UsageError("evaluated stages were scored on different test splits")
    base_name = spec.evaluation.get("baseline", evaluated[0].name)
    if base_name not in results or "wer" not in results[base_name].metrics:
        raise UsageError(f"baseline {base_name!r} is not an evaluated stage")
    base = results[base_name].metrics["wer"]
    rows = []
    for r in evaluated:
        wer = r.metrics["wer"]
        rows.append({"stage": r.name, "variant": r.variant, "wer": round(wer, 2),
                     "cer": round(r.metrics["cer"], 2), "change": format_change(base, wer),
                     "reduction": round(relative_reduction(base, wer), 1),
                     "epoch1_accuracy": round(r.metrics["epoch1_accuracy"], 4),
                     "final_accuracy": round(r.metrics["final_accuracy"], 4)})
    return rows


REPORT_FIELDS = ("stage", "variant", "wer", "cer", "change", "reduction", "epoch1_accuracy", "final_accuracy")


def write_report(rows: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
