import json

import pytest

from ctxseq.cli import RunConfig, main
from ctxseq.data import Vocabulary, load_dataset
from ctxseq.model import read_checkpoint

TINY = ["--d-model", "16", "--ffn-dim", "32", "--warmup-steps", "5", "--lr-peak", "3e-3",
        "--validate-every", "10", "--max-len", "4"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(out), "--n-keys", "3", "--n-examples", "200"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["train", "--out-dir", str(out), "--data-dir", str(data_dir), "--strategy", "sequential",
            "--max-steps", "20", "--p-st", "0.3", "--p-sc", "0.2", *TINY]
    assert main(args) == 0
    return out


def test_synth_outputs_parse_and_are_disjoint(data_dir):
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    splits = [load_dataset(data_dir / f"{n}.tsv", vocab) for n in ("train", "valid", "test")]
    assert [len(s) for s in splits] == [160, 20, 20]
    keys = [set((ex.source, ex.context) for ex in s) for s in splits]
    assert not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["command"] == "synth" and len(manifest["run_config_hash"]) == 16


def test_synth_is_byte_identical_for_same_seed(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out-dir", str(tmp_path / name), "--n-keys", "3", "--n-examples", "50"]) == 0
    for f in ("train.tsv", "valid.tsv", "test.tsv", "vocab.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_env_seed_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("CTXSEQ_SEED", "17")
    assert RunConfig.build(None, {"seed": 3}).seed == 17
    main(["synth", "--out-dir", str(tmp_path), "--n-keys", "3", "--n-examples", "50"])
    assert json.loads((tmp_path / "manifest.json").read_text())["run_config"]["seed"] == 17


def test_capacity_overflow_leaves_no_files(tmp_path):
    out = tmp_path / "bad"
    assert main(["synth", "--out-dir", str(out), "--n-keys", "2", "--n-examples", "100000"]) == 2
    assert not out.exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"d_model": 32, "beam_size": 3}))
    cfg = RunConfig.build(str(cfg_file), {"beam_size": 7})
    assert cfg.d_model == 32 and cfg.beam_size == 7
    cfg_file.write_text(json.dumps({"nested": {"x": 1}}))
    with pytest.raises(Exception):
        RunConfig.build(str(cfg_file), {})


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["nonsense"]) == 1
    assert main(["synth"]) == 1
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert main(["synth", "--out-dir", str(tmp_path / "x"), "--config", str(bad)]) == 1


def test_train_stores_run_config(trained):
    header, _ = read_checkpoint(trained / "model.ckpt")
    rc = header["run_config"]
    assert rc["p_st"] == 0.3 and rc["p_sc"] == 0.2
    assert header["run_config_hash"] == RunConfig(**rc).digest()
    assert (trained / "train_log.jsonl").exists()


def test_interleave_layer_flags_accepted(data_dir, tmp_path):
    args = ["train", "--out-dir", str(tmp_path), "--data-dir", str(data_dir), "--strategy", "interleave",
            "--enc-layers", "1", "--dec-layers", "6", "--layers-source", "1,2,5,6", "--layers-context", "3,4",
            "--max-steps", "1", *TINY]
    assert main(args) == 0
    header, _ = read_checkpoint(tmp_path / "model.ckpt")
    assert header["model_config"]["source_layers"] == [1, 2, 5, 6]


def test_bad_interleave_partition_is_usage_error(data_dir, tmp_path):
    args = ["train", "--out-dir", str(tmp_path), "--data-dir", str(data_dir), "--strategy", "interleave",
            "--layers-source", "1", "--layers-context", "1", "--max-steps", "1", *TINY]
    assert main(args) == 1


def test_alternate_warm_start_from_sequential_rejected(data_dir, trained, tmp_path, capsys):
    args = ["train", "--out-dir", str(tmp_path), "--data-dir", str(data_dir), "--strategy", "alternate",
            "--init-checkpoint", str(trained / "model.ckpt"), "--max-steps", "1", *TINY]
    assert main(args) == 2
    assert "parameter mismatch" in capsys.readouterr().err


def test_generate_beam_five_beats_beam_one(data_dir, trained, tmp_path):
    scores = {}
    for beam in (1, 5):
        out = tmp_path / f"b{beam}"
        args = ["generate", "--out-dir", str(out), "--data-dir", str(data_dir),
                "--checkpoint", str(trained / "model.ckpt"), "--beam-size", str(beam), "--nbest", *TINY]
        assert main(args) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        scores[beam] = manifest["mean_top_score"]
        assert len((out / "generations.txt").read_text().splitlines()) == 20
        assert "generations.txt" in manifest["files"]
    assert scores[5] >= scores[1]


def test_eval_gold_vs_gold(data_dir, tmp_path):
    refs = tmp_path / "refs.txt"
    refs.write_text("v1\nv2 o1_3\nk0 v5 v6\n")
    assert main(["eval", "--out-dir", str(tmp_path / "ev"), "--gen", str(refs), "--ref", str(refs)]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["rouge1"] == report["rouge2"] == report["rougeL"] == report["f1"] == 100.0
    for key in ("rouge1", "rouge2", "rougeL", "f1", "bleu", "ppl", "bw_ppl", "u_ctx", "skipped_uctx"):
        assert key in report


def test_eval_with_model_and_reverse(data_dir, trained, tmp_path):
    rev = tmp_path / "rev"
    assert main(["train", "--out-dir", str(rev), "--data-dir", str(data_dir), "--reverse", "--max-steps", "5",
                 *TINY]) == 0
    out = tmp_path / "ev"
    assert main(["eval", "--out-dir", str(out), "--data-dir", str(data_dir), "--checkpoint",
                 str(trained / "model.ckpt"), "--reverse-checkpoint", str(rev / "model.ckpt"), *TINY]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["ppl"] >= 1.0 and report["bw_ppl"] >= 1.0 and report["bw_ppl_gold"] >= 1.0
    assert report["run_config_hash"]


def test_eval_refuses_other_vocabulary(data_dir, trained, tmp_path):
    other = tmp_path / "vocab.txt"
    Vocabulary(["x", "y"]).save(other)
    args = ["eval", "--out-dir", str(tmp_path / "ev"), "--data-dir", str(data_dir), "--vocab", str(other),
            "--checkpoint", str(trained / "model.ckpt")]
    assert main(args) == 2


def test_stats_on_sequential_checkpoint(data_dir, trained, tmp_path):
    out = tmp_path / "st"
    assert main(["stats", "--out-dir", str(out), "--data-dir", str(data_dir),
                 "--checkpoint", str(trained / "model.ckpt")]) == 0
    stats = json.loads((out / "stats.json").read_text())
    for key in ("s_attn_c", "c_attn_s", "win_attn"):
        assert 0.0 <= stats[key] <= 1.0
