import csv

import numpy as np
import pytest
import yaml

from st_transfer import cli
from st_transfer.audio import Waveform
from st_transfer.exceptions import TrainingAborted
from st_transfer.pseudolabel import ingest_nbest
from st_transfer.text import CharVocabulary, read_manifest
from st_transfer.trainer import Checkpoint

TINY = ["--d1", "8", "--d2", "4", "--d3", "4", "--d-o", "4", "--blstm-layers", "1", "--epochs", "2",
        "--max-frames", "400", "--average", "2"]


def run(tmp_path, *argv, sub="run"):
    return cli.main(["--run-dir", str(tmp_path / sub), "--log-level", "WARNING", *argv])


def last_error(capsys) -> list[str]:
    return capsys.readouterr().err.strip().splitlines()[-1].split("\t")


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    """synth -> pseudo-label -> train-asr -> train-st -> transfer, on tiny settings."""
    root = tmp_path_factory.mktemp("cli")

    def call(sub, *argv):
        assert cli.main(["--run-dir", str(root / sub), "--log-level", "WARNING", *argv]) == 0
        return root / sub

    data = call("data", "synth", "--n-source", "12", "--n-target", "6", "--n-test", "4")
    labels = call("labels", "pseudo-label", "--pair", str(data / "language_pair.json"),
                  "--manifest", str(data / "src_train.tsv"), "--k", "3", "--noise-rate", "0.3",
                  "--filter", "0.25")
    src = call("src", "train-asr", "--train", str(data / "src_train.tsv"), *TINY)
    st = call("st", "train-st", "--train", str(data / "src_train.tsv"), "--labels", str(labels / "nbest.tsv"),
              "--init", str(src / "model.ckpt"), "--n", "2", *TINY)
    return root, data, labels, src, st


def test_synth_outputs(workflow):
    _, data, *_ = workflow
    assert len(read_manifest(data / "src_train.tsv")) == 12
    assert len(read_manifest(data / "tgt_test.tsv")) == 4
    assert (data / "synth.resolved.yaml").exists()


def test_pseudo_label_filters(workflow):
    _, _, labels, *_ = workflow
    sets = ingest_nbest(labels / "nbest.tsv")
    assert len(sets) == 9
    assert len((labels / "removed.txt").read_text().split()) == 3


def test_training_outputs(workflow):
    _, _, _, src, st = workflow
    for d in (src, st):
        ck = Checkpoint.load(d / "model.ckpt")
        assert ck.config.d3 == 4
        assert [r["epoch"] for r in csv.DictReader(open(d / "curve.csv"))] == ["1", "2"]
    # ST reuses the source encoder but has the target vocabulary
    assert Checkpoint.load(st / "model.ckpt").vocab != Checkpoint.load(src / "model.ckpt").vocab


def test_transfer_decode_score_plot(workflow, capsys):
    root, data, _, src, st = workflow
    out = root / "t"
    out.mkdir()
    assert cli.main(["--run-dir", str(out), "transfer", "--src", str(st / "model.ckpt"),
                     "--vocab", str(src / "vocab.txt")]) == 0
    report = yaml.safe_load((out / "transfer_report.json").read_text())
    assert sorted(report["replaced"]) == ["dec.embed.W", "dec.out.W", "dec.out.b"]
    assert cli.main(["--run-dir", str(out), "decode", "--ckpt", str(st / "model.ckpt"),
                     "--manifest", str(data / "tgt_test.tsv"), "--beam", "3", "--nbest", "2",
                     "--max-len", "6"]) == 0
    rows = [line.split("\t") for line in (out / "hyps.tsv").read_text(encoding="utf-8").splitlines()]
    assert {r[1] for r in rows} <= {"1", "2"} and all(len(r) == 4 for r in rows)
    capsys.readouterr()
    assert cli.main(["--run-dir", str(out), "score", "--ref", str(data / "tgt_test.tsv"),
                     "--hyp", str(out / "hyps.tsv"), "--mode", "char"]) == 0
    assert capsys.readouterr().out.startswith("CER ")
    assert cli.main(["--run-dir", str(out), "plot", "--curve", f"src={src / 'curve.csv'}",
                     "--curve", f"st={st / 'curve.csv'}"]) == 0
    svg = (out / "curves.svg").read_text()
    assert svg.count("<svg") == 1 and "src" in svg and "st" in svg


def test_score_identical_is_zero(tmp_path, capsys):
    ref = tmp_path / "ref.tsv"
    ref.write_text("a\tthe cat sat on the mat\nb\tit sat down by the door\n", encoding="utf-8")
    assert run(tmp_path, "score", "--ref", str(ref), "--hyp", str(ref), "--bleu") == 0
    out = capsys.readouterr().out
    assert out.startswith("WER 0.00%") and "BLEU 100.00" in out
    assert (tmp_path / "run" / "scores.csv").exists()


def test_plot_bars(tmp_path):
    bars = tmp_path / "bars.csv"
    bars.write_text("n,filtered,wer\n1,false,30\n1,true,25\n3,false,28\n3,true,24\n")
    assert run(tmp_path, "plot", "--bars", str(bars)) == 0
    assert (tmp_path / "run" / "wer_vs_n.svg").exists()


def test_wav_round_trip(tmp_path):
    w = Waveform(0.5 * np.sin(np.linspace(0, 100, 4000)))
    cli.write_wav(w, tmp_path / "a.wav")
    back = cli.read_wav(tmp_path / "a.wav")
    assert np.abs(back.samples - w.samples).max() < 1e-4


def test_prepare_from_wavs(tmp_path):
    w = Waveform(0.3 * np.sin(np.linspace(0, 2000, 16000)))
    cli.write_wav(w, tmp_path / "a.wav")
    (tmp_path / "m.tsv").write_text("u1\ta.wav\tHello, World!\ten\n", encoding="utf-8")
    assert run(tmp_path, "prepare", "--manifest", str(tmp_path / "m.tsv"), "--name", "dev") == 0
    entries = read_manifest(tmp_path / "run" / "dev.tsv")
    assert entries[0].text == "hello world"


def test_resolved_config_reusable(tmp_path, capsys):
    ref = tmp_path / "ref.tsv"
    ref.write_text("a\tx y\n", encoding="utf-8")
    assert run(tmp_path, "--seed", "7", "score", "--ref", str(ref), "--hyp", str(ref)) == 0
    resolved = tmp_path / "run" / "score.resolved.yaml"
    cfg = yaml.safe_load(resolved.read_text())
    assert cfg["seed"] == 7 and cfg["command"] == "score"
    assert cli.main(["--config", str(resolved), "score"]) == 0


# ------------------------------------------------------------------ exit codes

def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(tmp_path, "score", "--bogus") == 1
    assert last_error(capsys)[:2] == ["error", "usage"]
    assert run(tmp_path) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("command: score\nref: a\nhyp: b\nnot_an_option: 1\n")
    assert cli.main(["--config", str(bad), "score"]) == 1
    assert "not_an_option" in last_error(capsys)[2]


def test_missing_file_exits_2(tmp_path, capsys):
    assert run(tmp_path, "score", "--ref", str(tmp_path / "nope"), "--hyp", str(tmp_path / "nope")) == 2
    err = last_error(capsys)
    assert err[:2] == ["error", "data"] and len(capsys.readouterr().err.splitlines()) <= 1


def test_malformed_input_exits_2(tmp_path, capsys):
    f = tmp_path / "bad.tsv"
    f.write_text("only-one-field\n")
    assert run(tmp_path, "score", "--ref", str(f), "--hyp", str(f)) == 2


def test_training_abort_exits_3(tmp_path, capsys, monkeypatch, workflow):
    _, data, *_ = workflow

    def boom(*a, **k):
        raise TrainingAborted("loss became nan at epoch 1")
    monkeypatch.setattr(cli, "train", boom)
    assert run(tmp_path, "train-asr", "--train", str(data / "tgt_train.tsv"), *TINY) == 3
    assert last_error(capsys)[:2] == ["error", "training"]
