import copy

import pytest
import yaml

from st_transfer.exceptions import UsageError
from st_transfer.pipeline import (bundled_pipeline_path, derive_seed, load_pipeline, pipeline_from_dict,
                                  read_report, run_pipeline)

TINY_SPEC = {
    "name": "tiny",
    "seed": 3,
    "synthetic": {"n_letters": 6, "n_words": 6, "word_length": [2, 3], "frames_per_char": 2,
                  "noise_std": 0.1, "reordering": "swap_last"},
    "model": {"d1": 8, "d2": 4, "d3": 8, "d_o": 8, "encoder_blstm_layers": 1, "decoder_layers": 1},
    "train": {"max_frames_per_batch": 200, "keep_last": 2},
    "corpora": {"src": {"language": "src", "synthetic": 12, "words": [1, 2]},
                "tgt": {"language": "tgt", "synthetic": 6, "words": [1, 2]},
                "test": {"language": "tgt", "synthetic": 4, "words": [1, 2]}},
    "labels": {"mt": {"source": "src", "k": 3, "noise_rate": 0.3}},
    "vocabs": {"s": {"charset": "source"}, "t": {"charset": "target"}},
    "stages": [
        {"name": "a", "task": "asr", "corpora": ["src"], "vocab": "s", "epochs": 2},
        {"name": "b", "task": "st", "corpora": ["src"], "vocab": "t", "labels": "mt", "init": "a",
         "epochs": 2, "sampler": {"n": 2, "filter_fraction": 0.25}},
        {"name": "c", "task": "asr", "corpora": ["tgt"], "vocab": "t", "init": "a", "epochs": 2,
         "evaluate": True, "variant": "SrcASR→TgtASR"},
        {"name": "d", "task": "asr", "corpora": ["tgt"], "vocab": "t", "init": "b", "epochs": 2,
         "evaluate": True},
    ],
    "evaluation": {"corpus": "test", "beam": 2, "average_last": 2, "baseline": "c", "max_len": 6},
}


def spec(**changes):
    d = copy.deepcopy(TINY_SPEC)
    d.update(changes)
    return pipeline_from_dict(d)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("pipe")
    return run, run_pipeline(spec(), run)


def test_run_dir_layout(tiny_run):
    run, res = tiny_run
    assert (run / "pipeline.resolved.yaml").exists()
    for k in range(1, 5):
        d = run / f"stage-{k}"
        assert (d / "stage.json").exists() and (d / "curve.csv").exists()
        assert (d / "checkpoints" / "averaged.ckpt").exists()
    assert (run / "stage-3" / "hypotheses.tsv").exists()
    assert not (run / "stage-1" / "hypotheses.tsv").exists()


def test_report(tiny_run):
    run, res = tiny_run
    rows = read_report(run / "report.csv")
    assert [r["stage"] for r in rows] == ["c", "d"]
    assert [r["variant"] for r in rows] == ["SrcASR→TgtASR", "SrcASR→ST→TgtASR"]
    assert rows[0]["change"] == "0.0%"
    assert res.stages["b"].metrics["filtered_examples"] == 3  # floor(0.25 * 12)
    assert res.stages["b"].metrics["train_utterances"] == 9
    assert res.stages["d"].transfer is not None and not res.stages["d"].transfer.replaced


def test_resume_skips_completed_stages(tiny_run):
    run, first = tiny_run
    res = run_pipeline(spec(), run)
    assert all(s.resumed for s in res.stages.values())
    assert [{k: str(v) for k, v in r.items()} for r in res.report] == read_report(run / "report.csv")


def test_changed_stage_retrains_downstream(tmp_path):
    d = copy.deepcopy(TINY_SPEC)
    d["stages"] = d["stages"][:1]
    d["evaluation"] = {}
    run_pipeline(pipeline_from_dict(d), tmp_path)
    d["stages"][0]["epochs"] = 1
    res = run_pipeline(pipeline_from_dict(d), tmp_path)
    assert not res.stages["a"].resumed and len(res.stages["a"].curve) == 1


def test_no_resume_retrains(tmp_path):
    d = copy.deepcopy(TINY_SPEC)
    d["stages"] = d["stages"][:1]
    d["evaluation"] = {}
    run_pipeline(pipeline_from_dict(d), tmp_path)
    assert not run_pipeline(pipeline_from_dict(d), tmp_path, resume=False).stages["a"].resumed


def test_variant_derivation():
    s = spec()
    assert s.variant_of("a") == "SrcASR"
    assert s.variant_of("b") == "SrcASR→ST"
    assert s.variant_of("d") == "SrcASR→ST→TgtASR"


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d.update(bogus=1), "bogus"),
    (lambda d: d["model"].update(width=3), "width"),
    (lambda d: d["stages"][2].update(variant="TgtASR"), "declares"),
    (lambda d: d["stages"][2].update(variant="Nonsense"), "unknown variant"),
    (lambda d: d["stages"][0].update(init="d"), "not an earlier stage"),
    (lambda d: d["stages"][1].pop("labels"), "label set"),
    (lambda d: d["stages"][0].update(corpora=["nope"]), "unknown corpus"),
    (lambda d: d["stages"].append(dict(d["stages"][0])), "duplicate"),
    (lambda d: d["corpora"]["src"].pop("synthetic"), "exactly one"),
    (lambda d: d["stages"][1].update(sampler={"n": 1, "bogus": 2}), "bogus"),
    (lambda d: d["evaluation"].update(corpus="nope"), "evaluation.corpus"),
])
def test_strict_validation(mutate, match):
    d = copy.deepcopy(TINY_SPEC)
    mutate(d)
    with pytest.raises(UsageError, match=match):
        pipeline_from_dict(d)


def test_derive_seed():
    assert derive_seed(0, "x") == derive_seed(0, "x")
    assert len({derive_seed(0, n) for n in ("a", "b", "c")} | {derive_seed(1, "a")}) == 4


def test_bundled_spec_loads_and_round_trips(tmp_path):
    s = load_pipeline(bundled_pipeline_path(), {"seed": 5})
    assert s.seed == 5
    assert s.variant_of("tgt_st") == "SrcASR→ST→TgtASR"
    assert s.variant_of("tgt_scratch") == "TgtASR"
    assert s.corpora["src_train"].synthetic == 500 and s.corpora["tgt_train"].synthetic == 50
    p = tmp_path / "again.yaml"
    p.write_text(yaml.safe_dump(s.to_dict(), allow_unicode=True), encoding="utf-8")
    assert load_pipeline(p).to_dict() == s.to_dict()
