"""Command-line entry point: ``st-transfer <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training aborted. On
failure a single ``error<TAB>kind<TAB>message`` line goes to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import wave
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .audio import AugmentPolicy, Utterance, Waveform, compute_logmel, filter_by_length, write_feature_cache
from .decoding import beam_search, default_max_len
from .exceptions import InputError, ParseError, StTransferError, TrainingAborted, UsageError
from .metrics import score_bleu, score_wer_cer
from .model import ModelConfig, init_params
from .optim import AdamConfig
from .pipeline import (bundled_pipeline_path, derive_seed, load_manifest_corpus, load_pipeline,
                       run_pipeline)
from .plotting import plot_curves, plot_wer_bars
from .pseudolabel import (LabelSamplerConfig, filter_by_confidence, ingest_nbest, prepare_labels,
                          synthetic_nbest, write_nbest)
from .synth import generate_corpus, make_language_pair, spec_from_dict, spec_to_dict
from .text import (CharVocabulary, ManifestEntry, build_char_vocab, normalize_text, read_manifest,
                   write_manifest)
from .trainer import Checkpoint, TrainConfig, identity_labels, read_curve, train, write_curve
from .transfer import transfer_parameters

log = logging.getLogger("st_transfer")

GLOBAL_KEYS = ("seed", "threads", "run_dir", "log_level")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ helpers


def read_wav(path: str | Path) -> Waveform:
    """16-bit PCM mono WAV via the standard library."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise InputError(f"{path}: only 16-bit PCM is supported")
            raw = w.readframes(w.getnframes())
            rate, channels = w.getframerate(), w.getnchannels()
    except wave.Error as e:
        raise InputError(f"{path}: {e}") from None
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    return Waveform(x, rate)


def write_wav(w: Waveform, path: str | Path) -> None:
    pcm = np.clip(np.round(w.samples * 32767), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(pcm.tobytes())


def _write_corpus(utts: Sequence[Utterance], run_dir: Path, name: str) -> Path:
    """Feature cache plus manifest whose paths point into the cache."""
    cache = run_dir / f"{name}.feats"
    offsets = write_feature_cache(((u.utt_id, u.features) for u in utts), cache)
    manifest = run_dir / f"{name}.tsv"
    write_manifest([ManifestEntry(u.utt_id, f"{cache.name}:{offsets[u.utt_id]}", u.text, u.language)
                    for u in utts], manifest)
    return manifest


def _read_texts(path: str | Path) -> dict[str, str]:
    """id -> text from a manifest (4 fields), a decode file (rank 1 rows) or ``id<TAB>text``."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            p = line.split("\t")
            if len(p) == 2:
                utt, text = p
            elif len(p) == 4 and p[1].isdigit() and _is_float(p[2]):
                if p[1] != "1":
                    continue
                utt, text = p[0], p[3]
            elif len(p) == 4:
                utt, text = p[0], p[2]
            else:
                raise ParseError(f"expected 2 or 4 tab-separated fields, got {len(p)}", line=no)
            if utt in out:
                raise InputError(f"{path}: duplicate id {utt!r} (line {no})")
            out[utt] = text
    return out


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _load_corpora(paths: Sequence[str]) -> list[Utterance]:
    utts = []
    for p in paths:
        utts += load_manifest_corpus(p)
    kept, removed = filter_by_length(utts)
    if len(removed):
        log.info("removed %d over-long samples", len(removed))
    if not kept:
        raise InputError("no training utterances")
    return kept


def _model_config(args, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size, d1=args.d1, d2=args.d2, d3=args.d3, d_o=args.d_o,
                       encoder_blstm_layers=args.blstm_layers, decoder_layers=args.decoder_layers)


def _train_config(args, name: str) -> TrainConfig:
    aug = AugmentPolicy(1, args.freq_mask, 1, args.time_mask) if args.specaugment else None
    return TrainConfig(max_epochs=args.epochs, seed=derive_seed(args.seed, name),
                       max_frames_per_batch=args.max_frames, specaugment=aug,
                       optimizer=AdamConfig(lr=args.lr, clip_norm=args.clip_norm), keep_last=args.average)


def _init_from(args, cfg: ModelConfig, vocab: CharVocabulary, name: str):
    if args.init:
        params, report = transfer_parameters(Checkpoint.load(args.init), cfg, vocab, derive_seed(args.seed, name))
        log.info("%s", report.summary())
        return params
    return init_params(cfg, derive_seed(args.seed, name))


def _finish_training(args, result) -> None:
    run = Path(args.run_dir)
    ckpt = result.averaged(args.average)
    ckpt.save(run / "model.ckpt")
    write_curve(result.curve, run / "curve.csv")
    last = result.curve[-1]
    print(f"epochs={len(result.curve)} loss={last.loss:.4f} accuracy={last.token_accuracy:.4f} "
          f"model={run / 'model.ckpt'}")


def _vocab_for(args, texts: Sequence[str]) -> CharVocabulary:
    vocab = CharVocabulary.load(args.vocab) if args.vocab else build_char_vocab(texts)
    vocab.save(Path(args.run_dir) / "vocab.txt")
    return vocab


# ------------------------------------------------------------------ subcommands


def cmd_prepare(args) -> int:
    run = Path(args.run_dir)
    utts = []
    base = Path(args.manifest).parent
    for e in read_manifest(args.manifest):
        wav = Path(e.path) if Path(e.path).is_absolute() else base / e.path
        feats = compute_logmel(read_wav(wav))
        utts.append(Utterance(e.utt_id, feats, normalize_text(e.text).text, e.language))
    kept, removed = filter_by_length(utts, args.max_frames, args.max_chars)
    out = _write_corpus(kept, run, args.name)
    for utt, reason in removed.removed:
        print(f"removed\t{utt}\t{reason}")
    print(f"utterances={len(kept)} removed={len(removed)} manifest={out}")
    return 0


def cmd_synth(args) -> int:
    run = Path(args.run_dir)
    src, tgt = make_language_pair(args.seed, args.n_letters, args.n_words, noise_std=args.noise_std,
                                  reordering=args.reordering)
    (run / "language_pair.json").write_text(
        json.dumps({"source": spec_to_dict(src), "target": spec_to_dict(tgt)}, ensure_ascii=False),
        encoding="utf-8")
    for name, lang, n in (("src_train", src, args.n_source), ("tgt_train", tgt, args.n_target),
                          ("tgt_test", tgt, args.n_test)):
        utts = generate_corpus(lang, n, seed=derive_seed(args.seed, "corpus/" + name), prefix=name,
                               waveform=args.waveform)
        print(f"{name}={_write_corpus(utts, run, name)}")
    return 0


def cmd_pseudo_label(args) -> int:
    run = Path(args.run_dir)
    if (args.pair is None) == (args.nbest is None):
        raise UsageError("give exactly one of --pair (synthetic oracle) or --nbest (existing labels)")
    if args.pair:
        if not args.manifest:
            raise UsageError("--pair needs --manifest with the source utterances")
        pair = json.loads(Path(args.pair).read_text(encoding="utf-8"))
        oracle = spec_from_dict(pair["source"])
        entries = read_manifest(args.manifest)
        sets = synthetic_nbest(entries, oracle, args.k,
                               args.noise_rate, derive_seed(args.seed, "labels"), args.top1_error_rate)
    else:
        sets = ingest_nbest(args.nbest)
    kept, removed = filter_by_confidence(sets, args.filter)
    out = run / "nbest.tsv"
    write_nbest(kept, out)
    (run / "removed.txt").write_text("".join(u + "\n" for u in removed), encoding="utf-8")
    print(f"utterances={len(kept)} removed={len(removed)} labels={out}")
    return 0


def cmd_train_asr(args) -> int:
    data = _load_corpora(args.train)
    vocab = _vocab_for(args, [u.text for u in data])
    cfg = _model_config(args, len(vocab))
    params = _init_from(args, cfg, vocab, "train-asr")
    res = train(cfg, params, data, _train_config(args, "train-asr"), vocab, identity_labels,
                out_dir=Path(args.run_dir) / "checkpoints")
    _finish_training(args, res)
    return 0


def cmd_train_st(args) -> int:
    data = _load_corpora(args.train)
    sets = ingest_nbest(args.labels)
    provider, removed = prepare_labels(sets, LabelSamplerConfig(args.n, args.filter, derive_seed(args.seed, "sampler")))
    data = provider.select(data)
    if not data:
        raise InputError("no training utterance has a pseudo-label")
    vocab = _vocab_for(args, [t for s in provider.sets.values() for t in s.texts()])
    cfg = _model_config(args, len(vocab))
    params = _init_from(args, cfg, vocab, "train-st")
    log.info("training ST on %d utterances (%d filtered)", len(data), len(removed))
    res = train(cfg, params, data, _train_config(args, "train-st"), vocab, provider,
                out_dir=Path(args.run_dir) / "checkpoints")
    _finish_training(args, res)
    return 0


def cmd_transfer(args) -> int:
    src = Checkpoint.load(args.src)
    vocab = CharVocabulary.load(args.vocab)
    cfg = ModelConfig.from_dict({**src.config.to_dict(), "vocab_size": len(vocab)})
    params, report = transfer_parameters(src, cfg, vocab, derive_seed(args.seed, "transfer"))
    out = Path(args.out) if args.out else Path(args.run_dir) / "transferred.ckpt"
    Checkpoint(params, cfg, vocab, 0, {"transferred_from": str(args.src)}).save(out)
    (Path(args.run_dir) / "transfer_report.json").write_text(
        json.dumps({"transferred": report.transferred, "replaced": report.replaced,
                    "reasons": report.reasons}, indent=1), encoding="utf-8")
    print(f"{report.summary()} out={out}")
    return 0


def cmd_decode(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    utts = load_manifest_corpus(args.manifest)
    out = Path(args.out) if args.out else Path(args.run_dir) / "hyps.tsv"
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        for u in utts:
            hyps = beam_search(u.features, ckpt, args.beam,
                               args.max_len or default_max_len(u.features.num_frames))
            for rank, h in enumerate(hyps[:args.nbest], 1):
                f.write(f"{u.utt_id}\t{rank}\t{h.normalized_score!r}\t{ckpt.vocab.decode(h.tokens)}\n")
    print(f"utterances={len(utts)} hypotheses={out}")
    return 0


def cmd_score(args) -> int:
    refs, hyps = _read_texts(args.ref), _read_texts(args.hyp)
    missing = [u for u in refs if u not in hyps]
    if missing:
        raise InputError(f"{len(missing)} reference ids have no hypothesis, e.g. {missing[0]!r}")
    ids = list(refs)
    rep = score_wer_cer([refs[u] for u in ids], [hyps[u] for u in ids], args.mode, ids)
    if args.bleu:
        rep.bleu = score_bleu([refs[u] for u in ids], [hyps[u] for u in ids])
    out = Path(args.out) if args.out else Path(args.run_dir) / "scores.csv"
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["id", "errors", "ref_length", "S", "I", "D"], lineterminator="\n")
        w.writeheader()
        w.writerows(rep.per_utterance)
    print(rep.summary())
    return 0


def cmd_pipeline(args) -> int:
    overrides = {"seed": args.seed} if args.seed_given else None
    spec = load_pipeline(args.spec or bundled_pipeline_path(), overrides)
    res = run_pipeline(spec, args.run_dir, resume=not args.no_resume)
    for row in res.report:
        print("\t".join(str(row[k]) for k in ("stage", "variant", "wer", "change", "epoch1_accuracy")))
    return 0


def cmd_plot(args) -> int:
    if not args.curves and not args.bars:
        raise UsageError("give --curve LABEL=CSV (repeatable) and/or --bars CSV")
    run = Path(args.run_dir)
    if args.curves:
        curves = {}
        for item in args.curves:
            label, sep, path = item.partition("=")
            if not sep:
                raise UsageError(f"--curve expects LABEL=PATH, got {item!r}")
            curves[label] = read_curve(path)
        print(plot_curves(curves, args.out or run / "curves.svg", args.metric))
    if args.bars:
        with open(args.bars, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        print(plot_wer_bars(rows, run / "wer_vs_n.svg"))
    return 0


# ------------------------------------------------------------------ parser


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", action="append", required=True, help="training manifest (repeatable)")
    p.add_argument("--vocab", help="vocabulary file; built from the labels when omitted")
    p.add_argument("--init", help="checkpoint to warm-start from (vocabulary layers are re-initialised "
                                  "when the vocabulary differs)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--d1", type=int, default=256)
    p.add_argument("--d2", type=int, default=128)
    p.add_argument("--d3", type=int, default=512)
    p.add_argument("--d-o", dest="d_o", type=int, default=128)
    p.add_argument("--blstm-layers", type=int, default=3)
    p.add_argument("--decoder-layers", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--max-frames", type=int, default=10000, help="padded frames per batch")
    p.add_argument("--average", type=int, default=5, help="average the last N epoch checkpoints")
    p.add_argument("--specaugment", action="store_true")
    p.add_argument("--freq-mask", type=int, default=27)
    p.add_argument("--time-mask", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="st-transfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    parser.add_argument("--run-dir", default="run", help="directory for all outputs")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--config", help="YAML file of option values (e.g. a *.resolved.yaml)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("prepare", help="log-mel features for a manifest of WAV files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--name", default="corpus")
    p.add_argument("--max-frames", type=int, default=3000)
    p.add_argument("--max-chars", type=int, default=512)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate the synthetic language pair and corpora")
    p.add_argument("--n-source", type=int, default=500)
    p.add_argument("--n-target", type=int, default=50)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--n-letters", type=int, default=12)
    p.add_argument("--n-words", type=int, default=24)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--reordering", default="swap_last", choices=("identity", "swap_last", "swap_pairs"))
    p.add_argument("--waveform", action="store_true", help="render audio and run the log-mel frontend")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pseudo-label", help="n-best pseudo-labels from the oracle, or filter a label file")
    p.add_argument("--pair", help="language_pair.json written by 'synth'")
    p.add_argument("--manifest", help="source-language manifest to translate")
    p.add_argument("--nbest", help="existing n-best file to validate and filter")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--top1-error-rate", type=float, default=0.0)
    p.add_argument("--filter", type=float, default=0.0, help="fraction of least confident examples to drop")
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-asr", help="train an ASR model")
    _model_flags(p)
    p.set_defaults(func=cmd_train_asr)

    p = sub.add_parser("train-st", help="train an ST model on n-best pseudo-labels")
    _model_flags(p)
    p.add_argument("--labels", required=True, help="n-best file")
    p.add_argument("--n", type=int, default=1, help="sample each epoch's label from the n best")
    p.add_argument("--filter", type=float, default=0.0)
    p.set_defaults(func=cmd_train_st)

    p = sub.add_parser("transfer", help="warm-start a checkpoint for a new vocabulary")
    p.add_argument("--src", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("decode", help="beam search; writes id, rank, score, text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="WER/CER (and optionally BLEU) of hypotheses against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--mode", choices=("word", "char"), default="word")
    p.add_argument("--bleu", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pipeline", help="run a multi-stage transfer pipeline file")
    p.add_argument("spec", nargs="?", help="pipeline YAML (default: the bundled synthetic task)")
    p.add_argument("--no-resume", action="store_true", help="retrain stages that already finished")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("plot", help="SVG figures from curve or WER CSV files")
    p.add_argument("--curve", dest="curves", action="append", default=[], help="LABEL=curve.csv")
    p.add_argument("--metric", default="token_accuracy", choices=("token_accuracy", "loss"))
    p.add_argument("--bars", help="CSV with columns n, filtered, wer")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def _apply_config(parser: argparse.ArgumentParser, path: str, argv: Sequence[str]):
    """Parse with defaults taken from the YAML at ``path``; explicit flags still win."""
    with open(path, encoding="utf-8") as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: expected a mapping of option names to values")
    choices = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    given = next((a for a in argv if a in choices), None)
    cmd = cfg.pop("command", given)
    if cmd is None or cmd not in choices:
        raise UsageError(f"{path}: no subcommand given")
    if given is not None and cmd != given:
        raise UsageError(f"{path} is for '{cmd}', not '{given}'")
    if given is None:
        argv = [*argv, cmd]
    subparser = choices[cmd]
    known = {a.dest for a in subparser._actions} | set(GLOBAL_KEYS)
    unknown = set(cfg) - known - {"func", "config", "seed_given"}
    if unknown:
        raise UsageError(f"{path}: unknown key(s) {sorted(unknown)}")
    seed_given = bool(cfg.pop("seed_given", False))
    globals_ = {k: cfg.pop(k) for k in list(cfg) if k in GLOBAL_KEYS}
    parser.set_defaults(**globals_)
    subparser.set_defaults(**cfg)
    # required options satisfied by the file must not be demanded again
    for a in subparser._actions:
        if a.dest in cfg:
            a.required = False
    return parser.parse_args(argv), seed_given


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config")}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        config_path = pre.parse_known_args(argv)[0].config
        seed_given = "--seed" in argv or any(a.startswith("--seed=") for a in argv)
        if config_path:
            args, from_file = _apply_config(parser, config_path, argv)
            seed_given = seed_given or from_file
        else:
            args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; see --help")
        args.seed_given = seed_given
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        run = Path(args.run_dir)
        run.mkdir(parents=True, exist_ok=True)
        with open(run / f"{args.command}.resolved.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump(_resolved(args), f, sort_keys=True, allow_unicode=True)
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                return args.func(args)
        return args.func(args)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except UsageError as e:
        return _fail(1, "usage", e)
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        return _fail(2, "data", e)
    except TrainingAborted as e:
        return _fail(3, "training", e)
    except StTransferError as e:
        return _fail(1, "usage", e)


def _fail(code: int, kind: str, err: Exception) -> int:
    msg = " ".join(str(err).split())
    print(f"error\t{kind}\t{msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
